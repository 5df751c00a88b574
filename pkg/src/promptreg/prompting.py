"""Independent vision-language deep prompts and the supervised objective."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import (
    TokenSequence, cosine_logits, encode_texts, image_forward, text_forward, word_id,
)
from .numcore import ShapeError, Tensor

CANONICAL_TEMPLATE = ("a", "photo", "of", "a")
INIT_STD = 0.02


@dataclass
class PromptSet:
    """Per-layer learnable prompts; ``vision[j]`` is V x width, ``text[j]`` T x width."""

    vision: list
    text: list

    def __post_init__(self):
        if len(self.vision) != len(self.text):
            raise ValueError("vision and text prompt depths differ")
        if self.J:
            if len({p.shape for p in self.vision}) != 1 or len({p.shape for p in self.text}) != 1:
                raise ShapeError("prompt tensors must share one shape per branch")

    @property
    def J(self):
        return len(self.vision)

    @property
    def V(self):
        return self.vision[0].shape[0] if self.J else 0

    @property
    def T(self):
        return self.text[0].shape[0] if self.J else 0

    def parameters(self):
        return list(self.vision) + list(self.text)

    def arrays(self):
        return [p.data.copy() for p in self.parameters()]

    def clone(self, requires_grad=True):
        return PromptSet([Tensor(p.data.copy(), requires_grad) for p in self.vision],
                         [Tensor(p.data.copy(), requires_grad) for p in self.text])

    @classmethod
    def from_arrays(cls, vision, text, requires_grad=True):
        return cls([Tensor(a, requires_grad) for a in vision], [Tensor(a, requires_grad) for a in text])

    def checksum(self):
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def template_embedding(pair, words=CANONICAL_TEMPLATE):
    """Frozen word embeddings of a template, one row per word."""
    return pair.token_embedding([word_id(w) for w in words])


def init_prompts(config, J, V, T, seed, template_embedding=None):
    """Normal(0, 0.02) prompts; first-layer text prompts copy ``template_embedding`` when given."""
    if J < 0 or J > min(config.layers_f, config.layers_g):
        raise ValueError(f"prompt depth {J} exceeds encoder depth")
    if J and (V <= 0 or T <= 0):
        raise ValueError("prompt counts must be positive")
    rng = np.random.default_rng(seed)
    w = config.width_
    vision = [rng.normal(0.0, INIT_STD, size=(V, w)) for _ in range(J)]
    text = [rng.normal(0.0, INIT_STD, size=(T, w)) for _ in range(J)]
    if template_embedding is not None and J:
        emb = np.asarray(template_embedding, dtype=np.float64)
        if emb.shape != (T, w):
            raise ShapeError(f"template embedding {list(emb.shape)} must be [{T}, {w}] (T equals template length)")
        text[0] = emb.copy()
    return PromptSet.from_arrays(vision, text)


def _layers(prompts, branch):
    if prompts is None or prompts.J == 0:
        return None
    return prompts.vision if branch == "vision" else prompts.text


def prompted_encode_image(pair, prompts, patches, propagate=False):
    """Prompted image feature; d-vector for one input or (B, d) for a batch."""
    t = patches if isinstance(patches, Tensor) else Tensor(patches)
    single = t.ndim == 2
    if single:
        t = nc.reshape(t, (1, *t.shape))
    out = image_forward(pair, t, _layers(prompts, "vision"), propagate)
    return nc.reshape(out, (pair.config.d,)) if single else out


def prompted_encode_text(pair, prompts, seq, propagate=False):
    """Prompted text feature for one TokenSequence or a list of them."""
    layers = _layers(prompts, "text")
    if isinstance(seq, TokenSequence):
        seq.validate(pair.config)
        out = text_forward(pair, np.array([seq.ids]), layers, propagate)
        return nc.reshape(out, (pair.config.d,))
    return encode_texts(pair, seq, layers, propagate)


def ce_loss(feats, class_feats, y, tau):
    """Mean of -log softmax(tau * cos)[y] over the batch."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    C = class_feats.shape[0]
    y = np.atleast_1d(np.asarray(y))
    if np.any((y < 0) | (y >= C)):
        raise ValueError(f"label outside [0, {C})")
    logits = cosine_logits(feats, class_feats, tau)
    if logits.shape[0] != y.size:
        raise ShapeError(f"{logits.shape[0]} features but {y.size} labels")
    onehot = np.zeros((y.size, C))
    onehot[np.arange(y.size), y] = 1.0
    logp = nc.log(nc.softmax_rows(logits))
    return nc.scalar_mul(nc.sum(logp * Tensor(onehot)), -1.0 / y.size)
