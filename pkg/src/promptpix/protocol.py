"""Assistant-to-generator control protocol.

The assistant LM interleaves plain text with generation prompts wrapped in
`<img_gen>` / `</img_gen>` control tokens. This module owns the shared token
vocabulary (grammar words, instruction words, control tokens), the response
parser that splits a decoded sequence into text response T_R and generation
prompt T_P, windowed encoding for prompts longer than the text encoder's
window, and a persistent prompt cache so repeated sampling never re-runs
the assistant for an example it already answered.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import scenes

# Control tokens. Ids sit above the base-word range.
PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
IMG_OPEN, IMG_CLOSE = "<img_gen>", "</img_gen>"
IMAGE = "<image>"
CONTROL_TOKENS = (PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, IMAGE)

# Instruction phrasings paired with each task family. One of these is
# appended to the user turn; generation instructions additionally tell the
# trainer to wrap the target description in img_gen control tokens.
DESCRIPTION_INSTRUCTIONS = (
    "what do you see happening in this image ?",
    "what do you think is going on in this snapshot ?",
    "can you elaborate on the elements of the picture provided ?",
    "describe the following image .",
    "what's happening in the scene ?",
    "analyze the image in a comprehensive and detailed manner .",
    "write a detailed description of the given image .",
    "what is this photo about ?",
    "explain the visual content of the image in great detail .",
    "what are the key elements in this picture ?",
    "can you describe the main features of this image for me ?",
)
DESCRIBE_SENTENCE_INSTRUCTION = "describe this sentence in detail ."
GENERATE_THIS_INSTRUCTION = "generate this image ."
GENERATE_SIMILAR_INSTRUCTION = "generate a similar image ."
INPAINT_INSTRUCTION = "inpaint this image ."
OUTPAINT_INSTRUCTION = "outpaint this image ."

VQA_TEMPLATES = {
    "subject": ("who is shown in the scene ?", "{noun} the {common} ."),
    "attire": ("what attire does the subject wear ?", "a {color} {garment} ."),
    "background": ("what backdrop surrounds the scene ?", "a {background} backdrop ."),
    "action": ("what is the subject doing ?", "the subject is {action} ."),
    "style": ("what style is the image rendered in ?", "a {style} style ."),
}


def _grammar_words():
    words = set()
    # one caption per slot value covers every grammar word
    for name, size in zip(scenes.SLOT_NAMES, scenes.SLOT_SIZES):
        for v in range(size):
            spec = scenes.SceneSpec(**{n: v if n == name else 0 for n in scenes.SLOT_NAMES})
            words.update(scenes.detailed_caption(spec).split())
            words.update(scenes.brief_caption(spec).split())
    for text in DESCRIPTION_INSTRUCTIONS + (
        DESCRIBE_SENTENCE_INSTRUCTION,
        GENERATE_THIS_INSTRUCTION,
        GENERATE_SIMILAR_INSTRUCTION,
        INPAINT_INSTRUCTION,
        OUTPAINT_INSTRUCTION,
    ):
        words.update(text.split())
    for q, a in VQA_TEMPLATES.values():
        words.update(q.split())
        words.update(w for w in a.split() if not (w.startswith("{") and w.endswith("}")))
    return sorted(words)


class Vocab:
    """Bijective word <-> id map, control tokens above the base range."""

    def __init__(self, base_words):
        base_words = list(base_words)
        if len(set(base_words)) != len(base_words):
            raise ValueError("duplicate base words")
        if set(base_words) & set(CONTROL_TOKENS):
            raise ValueError("control token collides with base word")
        self.words = base_words + list(CONTROL_TOKENS)
        self.base_size = len(base_words)
        self._ids = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self._ids[PAD]
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.img_open_id = self._ids[IMG_OPEN]
        self.img_close_id = self._ids[IMG_CLOSE]
        self.image_id = self._ids[IMAGE]
        self.control_ids = frozenset(range(self.base_size, len(self.words)))

    def __len__(self):
        return len(self.words)

    def is_control(self, tid):
        return tid in self.control_ids

    def encode(self, text):
        try:
            return [self._ids[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"word not in vocab: {e.args[0]!r}") from None

    def decode(self, ids):
        return " ".join(self.words[i] for i in ids)


_DEFAULT = None


def default_vocab():
    """Canonical vocabulary shared by every model in the pipeline."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Vocab(_grammar_words())
    return _DEFAULT


# response parsing -------------------------------------------------------------


class MalformedResponse(ValueError):
    """Raised when img_gen delimiters are unbalanced or the prompt is empty."""


@dataclass(frozen=True)
class ParsedResponse:
    """Text response plus optional generation prompt, both control-free."""

    t_r: tuple
    t_p: tuple | None

    @property
    def wants_image(self):
        return self.t_p is not None


def parse_response(tokens, vocab):
    """Split a decoded token sequence on img_gen delimiter blocks.

    Tokens outside any block form T_R; tokens inside blocks concatenate
    into T_P in order. Padding / BOS / EOS / image placeholders are dropped
    from both. Unbalanced delimiters or an empty overall prompt raise
    MalformedResponse so the caller can resample.
    """
    skip = {vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.image_id}
    t_r, t_p = [], []
    inside = False
    saw_block = False
    for tok in tokens:
        if tok == vocab.img_open_id:
            if inside:
                raise MalformedResponse("nested <img_gen>")
            inside = True
            saw_block = True
        elif tok == vocab.img_close_id:
            if not inside:
                raise MalformedResponse("</img_gen> before <img_gen>")
            inside = False
        elif tok in skip:
            continue
        else:
            (t_p if inside else t_r).append(int(tok))
    if inside:
        raise MalformedResponse("unclosed <img_gen>")
    if saw_block and not t_p:
        raise MalformedResponse("empty generation prompt")
    return ParsedResponse(tuple(t_r), tuple(t_p) if saw_block else None)


def serialize_response(t_r, t_p, vocab):
    """Inverse of parse_response for well-formed single-block responses."""
    out = list(t_r)
    if t_p is not None:
        if len(t_p) == 0:
            raise ValueError("t_p must be non-empty when present")
        out += [vocab.img_open_id, *t_p, vocab.img_close_id]
    return out


# chunked encoding -------------------------------------------------------------


def chunked_encode(tokens, encoder, window=None):
    """Encode an arbitrarily long token sequence with a fixed-window text
    encoder by hard-cutting into consecutive windows and concatenating the
    per-token outputs. A sequence that already fits runs through the encoder
    once, so the short case is bit-identical to a direct encode."""
    n = len(tokens)
    if n == 0:
        raise ValueError("empty token sequence")
    w = window if window is not None else encoder.window
    chunks = []
    for start in range(0, n, w):
        per_token, _ = encoder.encode_text(tokens[start : start + w])
        chunks.append(per_token)
    return chunks[0] if len(chunks) == 1 else np.concatenate(chunks, axis=0)


# prompt cache -----------------------------------------------------------------

CACHE_SCHEMA = "prompt-cache/v1"


def _key_hash(example_id):
    return hashlib.sha256(str(example_id).encode("utf-8")).hexdigest()[:16]


class PromptCache:
    """Append-only (example id, checkpoint id) -> T_P store.

    Entries live in memory; with a path they also persist as one JSON record
    per line under a versioned header, appended atomically per entry. Corrupt
    lines are skipped on load and counted in ``warnings``.
    """

    def __init__(self, path=None):
        self._entries = {}
        self.path = os.fspath(path) if path is not None else None
        self.warnings = 0
        if self.path is not None and os.path.exists(self.path):
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            header = fh.readline()
            try:
                if json.loads(header).get("schema") != CACHE_SCHEMA:
                    raise ValueError
            except ValueError:
                raise ValueError(f"not a prompt cache file: {self.path}") from None
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["key"], rec["ckpt"])
                    tokens = tuple(int(t) for t in rec["tokens"])
                except (ValueError, KeyError, TypeError):
                    self.warnings += 1
                    continue
                self._entries[key] = tokens

    def _append(self, rec):
        is_new = not os.path.exists(self.path)
        with open(self.path, "a", encoding="utf-8") as fh:
            if is_new:
                fh.write(json.dumps({"schema": CACHE_SCHEMA}) + "\n")
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

    def put(self, example_id, checkpoint_id, tokens):
        tokens = tuple(int(t) for t in tokens)
        key = (_key_hash(example_id), str(checkpoint_id))
        self._entries[key] = tokens
        if self.path is not None:
            self._append({"key": key[0], "ckpt": key[1], "tokens": list(tokens)})

    def get(self, example_id, checkpoint_id):
        return self._entries.get((_key_hash(example_id), str(checkpoint_id)))

    def __len__(self):
        return len(self._entries)
