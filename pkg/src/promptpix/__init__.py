"""promptpix: a desk-scale prompt-to-image training pipeline.

A toy assistant LM learns to emit tagged generation prompts, a conditional
denoising diffusion model renders them, and a reference-based restorer
cleans up edited outputs - all trained from scratch on a procedural scene
corpus, on a CPU.
"""

__version__ = "0.1.0"
