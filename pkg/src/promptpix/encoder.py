"""Dual text/image encoder trained with a symmetric in-batch contrastive
loss. It fills three roles downstream: per-token text conditioning for the
diffusion model, the embedding target of the embedding-control baseline,
and the shared feature space behind the image-similarity and Frechet
metrics. The text tower sees at most `window` tokens at a time; longer
prompts go through protocol.chunked_encode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import protocol, scenes
from .autodiff import AdamW, DivergenceError, LrSchedule, Tensor, cosine_lr, core, nn, no_grad


@dataclass(frozen=True)
class DualEncoderConfig:
    window: int = 16
    dim: int = 64
    text_layers: int = 2
    text_heads: int = 4
    # (channels, stride) per conv; stride-1 first layer keeps the spatial
    # detail that separates small glyph shapes
    conv_widths: tuple = ((16, 1), (32, 2), (64, 2), (64, 2))

    def __post_init__(self):
        if self.window < 4:
            raise ValueError("window must be >= 4")
        if self.dim < 8:
            raise ValueError("dim must be >= 8")


class TextTower(nn.Module):
    def __init__(self, rng, vocab_size, cfg):
        self.cfg = cfg
        self.emb = nn.Embedding(rng, vocab_size, cfg.dim)
        self.pos = nn.sinusoid_table(cfg.window, cfg.dim)
        self.blocks = [
            nn.TransformerBlock(rng, cfg.dim, cfg.text_heads) for _ in range(cfg.text_layers)
        ]
        self.ln_f = nn.LayerNorm(cfg.dim)

    def __call__(self, ids, key_mask=None):
        s = ids.shape[1]
        h = self.emb(ids) + Tensor(self.pos[:s])
        for blk in self.blocks:
            h = blk(h, key_mask=key_mask)
        return self.ln_f(h)  # (B, S, dim) per-token features


class ImageTower(nn.Module):
    def __init__(self, rng, cfg):
        self.convs = []
        c_in = scenes.CHANNELS
        side = scenes.H
        for c_out, stride in cfg.conv_widths:
            self.convs.append(nn.Conv2d(rng, c_in, c_out, k=3, stride=stride))
            c_in = c_out
            side //= stride
        self.fc = nn.Linear(rng, side * side * c_in, cfg.dim)

    def __call__(self, imgs):
        h = imgs
        for conv in self.convs:
            h = core.silu(conv(h))
        b = h.shape[0]
        return self.fc(core.reshape(h, (b, -1)))  # (B, dim)


class DualEncoder(nn.Module):
    """Text and image towers plus a learnable similarity temperature."""

    def __init__(self, rng, vocab_size, cfg=None):
        self.cfg = cfg or DualEncoderConfig()
        self.text = TextTower(rng, vocab_size, self.cfg)
        self.image = ImageTower(rng, self.cfg)
        self.logit_scale = Tensor(
            np.array(math.log(1.0 / 0.07), dtype=np.float32), requires_grad=True
        )
        self.vocab_size = vocab_size

    @property
    def window(self):
        return self.cfg.window

    # training graph -----------------------------------------------------

    def text_features(self, ids, mask):
        """Pooled caption features with grad. ids/mask are (B, K*W) padded;
        each W-token window is encoded independently (hard chunking), then
        features are masked-mean pooled and L2-normalized."""
        b, total = ids.shape
        w = self.cfg.window
        if total % w:
            raise ValueError("padded length must be a multiple of the window")
        k = total // w
        win_ids = ids.reshape(b * k, w)
        win_mask = mask.reshape(b * k, w)
        h = self.text(win_ids, key_mask=win_mask)  # (B*K, W, dim)
        h = core.reshape(h, (b, total, self.cfg.dim))
        m = Tensor(mask[:, :, None].astype(h.dtype))
        summed = core.tsum(h * m, axis=1)
        count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0).astype(np.float32)
        return core.l2_normalize(summed * Tensor(1.0 / count), axis=-1)

    def image_features(self, imgs):
        return core.l2_normalize(self.image(Tensor(imgs)), axis=-1)

    # eval API -------------------------------------------------------------

    def encode_text(self, tokens):
        """Single-window encode: per-token feature sequence plus pooled
        L2-normalized embedding. Rejects sequences longer than the window."""
        n = len(tokens)
        if n == 0:
            raise ValueError("empty token sequence")
        if n > self.cfg.window:
            raise ValueError(f"{n} tokens exceed window {self.cfg.window}")
        ids = np.asarray(tokens, dtype=np.int64)[None, :]
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError("token id outside vocabulary")
        with no_grad():
            per_token = self.text(ids).data[0]
            pooled = per_token.mean(axis=0)
            pooled = pooled / max(np.linalg.norm(pooled), 1e-12)
        return per_token, pooled

    def encode_image(self, img):
        return self.encode_images(np.asarray(img)[None])[0]

    def encode_images(self, imgs, chunk=64):
        imgs = np.asarray(imgs, dtype=np.float32)
        if imgs.shape[1:] != (scenes.H, scenes.W, scenes.CHANNELS):
            raise ValueError(f"expected (N, {scenes.H}, {scenes.W}, {scenes.CHANNELS}) images")
        if imgs.min() < 0.0 or imgs.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        with no_grad():
            feats = [
                self.image_features(imgs[s : s + chunk]).data
                for s in range(0, len(imgs), chunk)
            ]
        return np.concatenate(feats, axis=0)

    def encode_caption(self, tokens):
        """Pooled embedding for arbitrarily long token sequences: chunked
        per-token features, mean pooled, L2-normalized."""
        per_token = protocol.chunked_encode(tokens, self)
        pooled = per_token.mean(axis=0)
        return pooled / max(np.linalg.norm(pooled), 1e-12)


# training ---------------------------------------------------------------------


@dataclass(frozen=True)
class ContrastiveTrainConfig:
    batch: int = 64
    max_steps: int = 1500
    lr: float = 2e-3
    weight_decay: float = 1e-4
    eval_every: int = 50
    target_retrieval: float = 0.93
    seed: int = 0


def _pad_windows(token_lists, window, pad_id):
    """Right-pad each sequence to a common multiple of the window size."""
    k = max((len(t) + window - 1) // window for t in token_lists)
    total = k * window
    ids = np.full((len(token_lists), total), pad_id, dtype=np.int64)
    mask = np.zeros((len(token_lists), total), dtype=np.float32)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
        mask[i, : len(toks)] = 1.0
    return ids, mask


def clip_batch_loss(model, imgs, ids, mask):
    """Symmetric cross-entropy over the in-batch similarity matrix."""
    t_feat = model.text_features(ids, mask)
    i_feat = model.image_features(imgs)
    scale = core.exp(model.logit_scale)
    logits = core.matmul(i_feat, core.transpose(t_feat, (1, 0))) * scale
    labels = np.arange(imgs.shape[0])
    loss_i = core.cross_entropy(logits, labels)
    loss_t = core.cross_entropy(core.transpose(logits, (1, 0)), labels)
    return (loss_i + loss_t) * 0.5


def retrieval_accuracy(model, imgs, token_lists, group=64):
    """Mean of text->image and image->text top-1 accuracy over candidate
    groups of `group` held-out pairs."""
    feats_i = model.encode_images(imgs)
    feats_t = np.stack([model.encode_caption(t) for t in token_lists])
    n = (len(imgs) // group) * group
    hits_t2i = hits_i2t = 0
    for s in range(0, n, group):
        sim = feats_t[s : s + group] @ feats_i[s : s + group].T
        hits_t2i += (sim.argmax(axis=1) == np.arange(group)).sum()
        hits_i2t += (sim.argmax(axis=0) == np.arange(group)).sum()
    return {"t2i": hits_t2i / n, "i2t": hits_i2t / n, "mean": (hits_t2i + hits_i2t) / (2 * n)}


class SceneSampler:
    """Draws (image, caption tokens) batches from a spec pool. Base renders
    are cached per slot combo; pixel jitter is resampled on every draw so
    the encoder cannot key on a frozen noise pattern."""

    def __init__(self, specs, vocab, rng):
        self.specs = list(specs)
        self.vocab = vocab
        self.rng = rng
        self._bases = {}
        self._caps = [vocab.encode(scenes.detailed_caption(s)) for s in self.specs]

    def __len__(self):
        return len(self.specs)

    def _base(self, spec):
        b = self._bases.get(spec.combo_id)
        if b is None:
            b = scenes.render_base(spec)
            self._bases[spec.combo_id] = b
        return b

    def batch(self, n):
        idx = self.rng.choice(len(self.specs), size=n, replace=False)
        imgs = np.stack([scenes.add_jitter(self._base(self.specs[i]), self.rng) for i in idx])
        return imgs, [self._caps[i] for i in idx]


def _as_pairs(corpus, vocab):
    if corpus and isinstance(corpus[0], scenes.SceneSpec):
        return [
            (scenes.render(s), vocab.encode(scenes.detailed_caption(s))) for s in corpus
        ]
    return [(np.asarray(img, dtype=np.float32), list(toks)) for img, toks in corpus]


def contrastive_train(corpus, config, vocab=None, eval_corpus=None):
    """Train a DualEncoder from scratch.

    corpus: >= 2000 scene specs (images re-jittered per draw) or fixed
    (image, token) pairs. Stops early once held-out retrieval clears
    config.target_retrieval in both directions. Returns (model, history).
    """
    if len(corpus) < 2000:
        raise ValueError(f"corpus too small: {len(corpus)} < 2000 pairs")
    vocab = vocab or protocol.default_vocab()
    rng = np.random.default_rng(config.seed)
    model = DualEncoder(np.random.default_rng(config.seed + 1), len(vocab))

    if isinstance(corpus[0], scenes.SceneSpec):
        sampler = SceneSampler(corpus, vocab, rng)
    else:
        pairs = _as_pairs(corpus, vocab)
        imgs_all = np.stack([p[0] for p in pairs])
        caps_all = [p[1] for p in pairs]
        sampler = None
    if eval_corpus is not None:
        ev_pairs = _as_pairs(eval_corpus, vocab)
        ev_imgs = np.stack([p[0] for p in ev_pairs])
        ev_caps = [p[1] for p in ev_pairs]

    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = LrSchedule(config.lr, config.max_steps, floor_lr=config.lr * 0.1)
    history = {"loss": [], "retrieval": []}
    for step in range(config.max_steps):
        if sampler is not None:
            imgs, caps = sampler.batch(config.batch)
        else:
            idx = rng.choice(len(caps_all), size=config.batch, replace=False)
            imgs, caps = imgs_all[idx], [caps_all[i] for i in idx]
        ids, mask = _pad_windows(caps, model.window, vocab.pad_id)
        loss = clip_batch_loss(model, imgs, ids, mask)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite contrastive loss at step {step}")
        model.zero_grad()
        loss.backward()
        opt.step(lr=cosine_lr(step, sched))
        # keep similarity temperature in a sane band, as in standard recipes
        np.clip(model.logit_scale.data, 0.0, math.log(100.0), out=model.logit_scale.data)
        history["loss"].append(float(loss.data))
        if eval_corpus is not None and (step + 1) % config.eval_every == 0:
            acc = retrieval_accuracy(model, ev_imgs, ev_caps)
            history["retrieval"].append({"step": step + 1, **acc})
            if min(acc["t2i"], acc["i2t"]) >= config.target_retrieval:
                break
    return model, history
