"""Procedural scene corpus: deterministic 32x32 renders plus brief/detailed
captions generated from a fixed grammar.

Every image and caption is a pure function of a SceneSpec. The five slots
(subject, attire, background, action, style) each leave a distinct visual
signature so a small classifier can recover them from pixels, and each
contributes exactly one canonical keyword to the detailed caption so the
caption grammar is invertible. Subjects carry invented proper nouns, which
is what forces the assistant LM to learn noun-to-appearance associations
rather than leaning on dictionary words.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

H = W = 32
CHANNELS = 3

# slot tables ----------------------------------------------------------------

SUBJECTS = [
    # (proper noun, common noun, glyph shape)
    ("zorvik", "fox", "circle"),
    ("quenna", "owl", "square"),
    ("fyxar", "crab", "triangle"),
    ("drombel", "toad", "diamond"),
    ("ilyra", "moth", "plus"),
    ("voskin", "wolf", "ring"),
    ("perrun", "hare", "hourglass"),
    ("skaldi", "bee", "arch"),
]

ATTIRES = [
    # (garment keyword, color word, rgb)
    ("cloak", "crimson", (0.78, 0.10, 0.12)),
    ("armor", "azure", (0.10, 0.25, 0.85)),
    ("tunic", "gold", (0.92, 0.78, 0.12)),
    ("visor", "violet", (0.58, 0.12, 0.78)),
    ("scarf", "jade", (0.05, 0.66, 0.45)),
]

BACKGROUNDS = [
    # (keyword, rgb)
    ("desert", (0.82, 0.66, 0.34)),
    ("forest", (0.12, 0.44, 0.18)),
    ("harbor", (0.18, 0.34, 0.68)),
    ("glacier", (0.68, 0.80, 0.88)),
    ("dusk", (0.38, 0.18, 0.48)),
    ("cavern", (0.15, 0.15, 0.19)),
]

ACTIONS = [
    # (keyword, row offset, col offset, glyph half-size)
    ("leaping", -6, 0, 6),
    ("resting", 6, 0, 6),
    ("charging", 0, 6, 6),
    ("drifting", 0, -6, 6),
    ("guarding", 0, 0, 4),
    ("spinning", 0, 0, 9),
]

STYLES = ["plain", "pastel", "neon", "ember"]

SLOT_NAMES = ("subject", "attire", "background", "action", "style")
SLOT_SIZES = (len(SUBJECTS), len(ATTIRES), len(BACKGROUNDS), len(ACTIONS), len(STYLES))
N_COMBOS = int(np.prod(SLOT_SIZES))

ACTION_PHRASES = {
    "leaping": "caught leaping high above the ground",
    "resting": "resting calmly near the ground",
    "charging": "charging fast toward the right edge",
    "drifting": "drifting slowly toward the left edge",
    "guarding": "guarding a small spot at the center",
    "spinning": "spinning wide circles around the center",
}


@dataclass(frozen=True)
class SceneSpec:
    """Index into each slot table, plus a render seed for pixel jitter."""

    subject: int
    attire: int
    background: int
    action: int
    style: int
    seed: int = 0

    def __post_init__(self):
        for name, size in zip(SLOT_NAMES, SLOT_SIZES):
            v = getattr(self, name)
            if not 0 <= v < size:
                raise ValueError(f"{name}={v} outside [0, {size})")

    @property
    def combo_id(self):
        """Dense index over the 5760-element slot product space (seed-free)."""
        cid = 0
        for name, size in zip(SLOT_NAMES, SLOT_SIZES):
            cid = cid * size + getattr(self, name)
        return cid

    def slots(self):
        return tuple(getattr(self, n) for n in SLOT_NAMES)

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return SceneSpec(**d)


def spec_from_combo(combo_id, seed=0):
    vals = []
    for size in reversed(SLOT_SIZES):
        vals.append(combo_id % size)
        combo_id //= size
    s, a, b, ac, st = reversed(vals)
    return SceneSpec(s, a, b, ac, st, seed)


def sample_scene(rng):
    """Uniform draw over the slot product space; the seed field gets its own
    independent draw so renders of identical slot combos still vary."""
    return SceneSpec(
        subject=int(rng.integers(len(SUBJECTS))),
        attire=int(rng.integers(len(ATTIRES))),
        background=int(rng.integers(len(BACKGROUNDS))),
        action=int(rng.integers(len(ACTIONS))),
        style=int(rng.integers(len(STYLES))),
        seed=int(rng.integers(2**31)),
    )


# rendering -------------------------------------------------------------------


def _glyph_mask(shape, cy, cx, r):
    yy, xx = np.mgrid[0:H, 0:W]
    dy = yy - cy
    dx = xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.2 * r
    if shape == "plus":
        arm = 0.4 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "hourglass":
        return (np.abs(dy) <= r) & (np.abs(dx) <= np.abs(dy) * 0.9)
    if shape == "arch":
        s = 0.9 * r
        box = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        notch = (np.abs(dx) <= 0.45 * s) & (dy <= 0.1 * s)
        return box & ~notch
    raise ValueError(f"unknown glyph {shape!r}")


def glyph_region(spec):
    """Boolean mask of the subject glyph; the renderer's own region map."""
    _, drow, dcol, r = ACTIONS[spec.action]
    shape = SUBJECTS[spec.subject][2]
    return _glyph_mask(shape, H // 2 + drow, W // 2 + dcol, r)


def _apply_style(img, style):
    if style == "plain":
        return img
    if style == "pastel":
        return img * 0.55 + 0.45
    if style == "neon":
        return np.clip(0.5 + (img - 0.5) * 1.55, 0.0, 1.0)
    if style == "ember":
        out = img.copy()
        out[..., 0] = np.clip(img[..., 0] * 1.2 + 0.06, 0.0, 1.0)
        out[..., 1] = img[..., 1] * 0.95
        out[..., 2] = img[..., 2] * 0.55
        return out
    raise ValueError(f"unknown style {style!r}")


NOISE_AMP = 0.02


def render_base(spec):
    """Slot-determined layers only: background fill, subject glyph in the
    attire color at the action's pose, global style transform. Always lands
    in [0, 1]. The seed field plays no part here."""
    img = np.empty((H, W, CHANNELS), dtype=np.float64)
    img[...] = BACKGROUNDS[spec.background][1]
    mask = glyph_region(spec)
    img[mask] = ATTIRES[spec.attire][2]
    return _apply_style(img, STYLES[spec.style])


def add_jitter(base, rng):
    """Uniform pixel jitter over a base render, clipped back to [0, 1]."""
    img = base + rng.uniform(-NOISE_AMP, NOISE_AMP, size=base.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render(spec):
    """Deterministic layered render: render_base plus seeded pixel jitter.
    Jitter depends only on spec.seed, so two specs that share a seed differ
    exactly where their slot signatures differ."""
    return add_jitter(render_base(spec), np.random.Generator(np.random.PCG64(spec.seed)))


# captions --------------------------------------------------------------------


def brief_caption(spec):
    noun, common, _ = SUBJECTS[spec.subject]
    action = ACTIONS[spec.action][0]
    return f"{noun} the {common} is {action} ."


def detailed_caption(spec):
    noun, common, _ = SUBJECTS[spec.subject]
    garment, color, _ = ATTIRES[spec.attire]
    bg = BACKGROUNDS[spec.background][0]
    action = ACTIONS[spec.action][0]
    style = STYLES[spec.style]
    return (
        f"a detailed scene : {noun} the {common} wearing a {color} {garment} , "
        f"set against a {bg} backdrop , {ACTION_PHRASES[action]} , "
        f"rendered in a {style} style ."
    )


_SUBJECT_BY_NOUN = {noun: i for i, (noun, _, _) in enumerate(SUBJECTS)}
_ATTIRE_BY_WORD = {g: i for i, (g, _, _) in enumerate(ATTIRES)}
_BG_BY_WORD = {k: i for i, (k, _) in enumerate(BACKGROUNDS)}
_ACTION_BY_WORD = {k: i for i, (k, *_rest) in enumerate(ACTIONS)}
_STYLE_BY_WORD = {k: i for i, k in enumerate(STYLES)}


class CaptionParseError(ValueError):
    pass


def parse_detailed_caption(text):
    """Exact inverse of detailed_caption over the slot grammar.

    Returns a SceneSpec with seed 0 (seed never enters caption text).
    Raises CaptionParseError if any slot keyword is missing or repeated.
    """
    tokens = text.split()
    found = {}
    for name, table in (
        ("subject", _SUBJECT_BY_NOUN),
        ("attire", _ATTIRE_BY_WORD),
        ("background", _BG_BY_WORD),
        ("action", _ACTION_BY_WORD),
        ("style", _STYLE_BY_WORD),
    ):
        hits = [table[t] for t in tokens if t in table]
        if len(hits) != 1:
            raise CaptionParseError(f"{name}: expected one keyword, found {len(hits)}")
        found[name] = hits[0]
    return SceneSpec(**found, seed=0)


# corpus ----------------------------------------------------------------------

HOLDOUT_MOD = 10


def is_holdout_combo(spec):
    """Slot combos with combo_id % 10 == 7 are reserved for evaluation, so
    held-out scenes are genuinely unseen slot combinations."""
    return spec.combo_id % HOLDOUT_MOD == 7


def make_corpus(n, rng, holdout=False):
    """n scene specs whose slot combos are drawn from the train (or holdout)
    partition of the product space."""
    out = []
    while len(out) < n:
        spec = sample_scene(rng)
        if is_holdout_combo(spec) == holdout:
            out.append(spec)
    return out


def make_corpus_unique(n, rng, holdout=False):
    """Like make_corpus but with pairwise-distinct slot combos, so e.g.
    retrieval candidates never share a caption."""
    pool = [c for c in range(N_COMBOS) if (c % HOLDOUT_MOD == 7) == holdout]
    if n > len(pool):
        raise ValueError(f"only {len(pool)} distinct combos in this partition")
    picks = rng.choice(len(pool), size=n, replace=False)
    return [spec_from_combo(pool[int(i)], seed=int(rng.integers(2**31))) for i in picks]


INDEX_SCHEMA = "scene-index/v1"


def save_png(img, path):
    arr = np.clip(np.asarray(img, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path):
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def export_corpus(specs, out_dir):
    """PNG per scene plus a line-delimited index (versioned header line,
    then one JSON record per scene mapping file -> spec -> captions)."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.jsonl"
    with open(index_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": INDEX_SCHEMA, "count": len(specs)}) + "\n")
        for i, spec in enumerate(specs):
            fname = f"scene_{i:06d}.png"
            save_png(render(spec), img_dir / fname)
            rec = {
                "file": f"images/{fname}",
                "spec": spec.to_json(),
                "brief": brief_caption(spec),
                "detailed": detailed_caption(spec),
            }
            fh.write(json.dumps(rec) + "\n")
    return index_path


def load_corpus_index(index_path):
    with open(index_path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != INDEX_SCHEMA:
            raise ValueError(f"unexpected index schema {header.get('schema')!r}")
        return [json.loads(line) for line in fh if line.strip()]
