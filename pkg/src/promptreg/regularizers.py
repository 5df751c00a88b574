"""Self-consistency losses between prompted and frozen features, and
template-ensembled frozen text features."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import numcore as nc
from .encoders import EOS_ID, SOS_ID, TokenSequence, class_token, encode_texts, word_id
from .numcore import DegenerateInputError, ShapeError, Tensor

METRICS = ("L1", "MSE", "cosine")
KL_DIRECTIONS = ("prompted_to_frozen", "frozen_to_prompted")
FEATURE_STAGES = ("pre_normalization", "post_normalization")
REDUCTIONS = ("sum", "mean")
KL_FLOOR = 1e-12
SLOT = "{class}"


@dataclass(frozen=True)
class SclConfig:
    lambda1: float = 10.0
    lambda2: float = 25.0
    matching_metric: str = "L1"
    kl_direction: str = "prompted_to_frozen"
    feature_stage: str = "post_normalization"
    feature_reduction: str = "mean"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.matching_metric not in METRICS:
            raise ValueError(f"matching_metric must be one of {METRICS}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.feature_stage not in FEATURE_STAGES:
            raise ValueError(f"feature_stage must be one of {FEATURE_STAGES}")
        if self.feature_reduction not in REDUCTIONS:
            raise ValueError(f"feature_reduction must be one of {REDUCTIONS}")


class TemplatePool:
    """Text templates, each a word list with one class slot."""

    def __init__(self, templates, config=None):
        parsed = []
        for t in templates:
            words = tuple(t.split()) if isinstance(t, str) else tuple(t)
            if words.count(SLOT) != 1:
                raise ValueError(f"template {' '.join(words)!r} needs exactly one {SLOT} slot")
            for w in words:
                if w != SLOT:
                    word_id(w)
            if config is not None and len(words) + 2 > config.max_seq:
                raise ShapeError(f"template {' '.join(words)!r} overflows max_seq {config.max_seq}")
            parsed.append(words)
        if not parsed:
            raise ValueError("template pool is empty")
        self.templates = parsed

    def __len__(self):
        return len(self.templates)

    def __getitem__(self, i):
        return self.templates[i]

    def head(self, n):
        return TemplatePool(self.templates[:n])

    def instantiate(self, config, i, class_id):
        ids = [SOS_ID]
        for w in self.templates[i]:
            ids.append(class_token(config, class_id) if w == SLOT else word_id(w))
        ids.append(EOS_ID)
        seq = TokenSequence(tuple(ids))
        seq.validate(config)
        return seq

    @classmethod
    def from_file(cls, path, config=None):
        with open(path) as fh:
            lines = [ln.strip() for ln in fh]
        return cls([ln for ln in lines if ln and not ln.startswith("#")], config)

    @classmethod
    def default(cls, config=None):
        text = resources.files("promptreg").joinpath("data/templates.txt").read_text()
        return cls([ln.strip() for ln in text.splitlines() if ln.strip()], config)


def feature_stage_view(feats, stage):
    return nc.l2_normalize_rows(feats) if stage == "post_normalization" else feats


def _rows(t):
    return t if t.ndim == 2 else nc.reshape(t, (1, t.shape[0]))


def scl_feature_loss(prompted, frozen, metric="L1", reduction="sum"):
    """Per-row matching loss, averaged over rows.

    L1 and MSE are summed over feature dims, or averaged with
    ``reduction="mean"``; cosine is ``1 - cos`` per row either way.
    """
    if prompted.shape != frozen.shape:
        raise ShapeError(f"feature shapes differ: {list(prompted.shape)} vs {list(frozen.shape)}")
    a, b = _rows(prompted), _rows(frozen)
    n = a.shape[0]
    if metric == "L1":
        per = nc.sum(nc.abs(a - b))
    elif metric == "MSE":
        diff = a - b
        per = nc.sum(diff * diff)
    elif metric == "cosine":
        for t in (a, b):
            if np.any((t.data * t.data).sum(axis=-1) == 0.0):
                raise DegenerateInputError("cosine matching with a zero-norm feature")
        cos = nc.sum(nc.l2_normalize_rows(a) * nc.l2_normalize_rows(b))
        per = nc.scalar_mul(cos, -1.0) + float(n)
    else:
        raise ValueError(f"unknown matching metric {metric!r}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    scale = 1.0 / n
    if reduction == "mean" and metric != "cosine":
        scale /= a.shape[1]
    return nc.scalar_mul(per, scale)


def _check_simplex(p, name):
    d = p.data
    if np.any(d < -1e-9) or np.any(np.abs(d.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{name} is not a probability vector")


def scl_logits_loss(prompted_probs, frozen_probs, direction="prompted_to_frozen"):
    """KL(a || b) averaged over rows; a is the prompted side unless reversed."""
    if prompted_probs.shape != frozen_probs.shape:
        raise ShapeError("probability shapes differ")
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"kl direction must be one of {KL_DIRECTIONS}")
    _check_simplex(prompted_probs, "prompted probabilities")
    _check_simplex(frozen_probs, "frozen probabilities")
    a, b = _rows(prompted_probs), _rows(frozen_probs)
    if direction == "frozen_to_prompted":
        a, b = b, a
    if np.any((b.data < KL_FLOOR) & (a.data > 0)):
        warnings.warn("KL target has zero mass where source does not; clamped", RuntimeWarning,
                      stacklevel=2)
    kl = nc.sum(a * (nc.log(nc.clamp_min(a, KL_FLOOR)) - nc.log(nc.clamp_min(b, KL_FLOOR))))
    return nc.scalar_mul(kl, 1.0 / a.shape[0])


def ensembled_class_features(pair, pool, class_ids, normalize=True):
    """(len(class_ids), d) array of per-class template ensembles.

    With ``normalize`` each template feature is unit-normalised, averaged and
    renormalised; otherwise the raw features are just averaged.
    """
    cfg = pair.config
    class_ids = list(class_ids)
    seqs = [pool.instantiate(cfg, i, k) for k in class_ids for i in range(len(pool))]
    with nc.no_grad():
        feats = encode_texts(pair, seqs).data.reshape(len(class_ids), len(pool), cfg.d)
    if not normalize:
        return feats.mean(axis=1)
    norms = np.sqrt((feats * feats).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm frozen text feature")
    mean = (feats / norms).mean(axis=1)
    return mean / np.sqrt((mean * mean).sum(axis=-1, keepdims=True))


def ensembled_frozen_text_feature(pair, pool, class_id):
    return Tensor(ensembled_class_features(pair, pool, [class_id])[0])


def scl_combined(scl_image, scl_text, scl_logits, config):
    parts = [scl_image, scl_text, scl_logits]
    for p in parts:
        v = p.data if isinstance(p, Tensor) else np.asarray(p)
        if not np.all(np.isfinite(v)):
            raise nc.NonFiniteError("non-finite SCL component")
    img, txt, lg = (p if isinstance(p, Tensor) else Tensor(p) for p in parts)
    return nc.scalar_mul(img, config.lambda1) + nc.scalar_mul(txt, config.lambda2) + lg


def final_loss(ce, scl):
    ce = ce if isinstance(ce, Tensor) else Tensor(ce)
    scl = scl if isinstance(scl, Tensor) else Tensor(scl)
    return ce + scl
