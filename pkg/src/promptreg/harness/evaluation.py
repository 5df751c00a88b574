"""Base-to-novel accuracy, harmonic mean and the run report record."""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..encoders import make_sequence
from ..prompting import CANONICAL_TEMPLATE, prompted_encode_image, prompted_encode_text


def harmonic_mean(base_acc, novel_acc):
    for v in (base_acc, novel_acc):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"accuracy {v} outside [0, 100]")
    if base_acc == 0 and novel_acc == 0:
        warnings.warn("harmonic mean of two zero accuracies defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


@dataclass
class EvalReport:
    base_acc: float
    novel_acc: float
    hm: float
    per_epoch_losses: list = field(default_factory=list)
    per_shot: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    label: str = ""
    frozen_checksum: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for v in (self.base_acc, self.novel_acc):
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {v} outside [0, 100]")

    def to_dict(self, include_timing=False):
        d = dataclasses.asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        d["per_shot"] = {str(k): v for k, v in self.per_shot.items()}
        return d

    def to_json(self, include_timing=False):
        return json.dumps(self.to_dict(include_timing), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        d["per_shot"] = {int(k): v for k, v in d.get("per_shot", {}).items()}
        d["curves"] = [list(c) for c in d.get("curves", [])]
        return cls(**d)


def class_text_features(pair, prompts, classes, propagate=False):
    seqs = [make_sequence(pair.config, CANONICAL_TEMPLATE, k) for k in classes]
    return prompted_encode_text(pair, prompts, seqs, propagate)


def accuracy(pair, prompts, split, classes, propagate=False, batch=256):
    """Percent of ``split`` samples (restricted to ``classes``) classified correctly among ``classes``."""
    classes = list(classes)
    sub = split.select(classes)
    if len(sub) == 0:
        raise ValueError("empty evaluation split")
    with nc.no_grad():
        g = class_text_features(pair, prompts, classes, propagate).data
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        preds = []
        for s in range(0, len(sub), batch):
            f = prompted_encode_image(pair, prompts, sub.x[s:s + batch], propagate).data
            f = f.reshape(-1, g.shape[1])
            preds.append((f @ g.T).argmax(axis=1))
    pred = np.asarray(classes)[np.concatenate(preds)]
    return 100.0 * float(np.mean(pred == sub.y))


def evaluate_base_to_novel(pair, prompts, data, propagate=False, **meta):
    base = accuracy(pair, prompts, data.test, data.base_classes, propagate)
    novel = accuracy(pair, prompts, data.test, data.novel_classes, propagate)
    return EvalReport(base, novel, harmonic_mean(base, novel), **meta)
