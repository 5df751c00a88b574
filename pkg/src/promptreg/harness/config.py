"""Run configuration and its canonical hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ..encoders import EncoderConfig
from ..regularizers import SclConfig
from .data import SyntheticDatasetSpec


@dataclass(frozen=True)
class PromptConfig:
    J: int = 3
    V: int = 4
    T: int = 4
    propagate: bool = False
    template_init: bool = True


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    scl: SclConfig = field(default_factory=SclConfig)
    epochs: int = 20
    learning_rate: float = 0.0025
    batch_size: int = 8
    gpa_mu: float = 15.0
    gpa_sigma2: float = 1.0
    ensembling_mode: str = "gpa"
    ema_beta: float = 0.999
    use_scl: bool = True
    use_gpa: bool = True
    use_textual_diversity: bool = True
    n_templates: int | None = None
    shots: int | None = 4
    pretrain_epochs: int = 15
    pretrain_distractors: int = 4
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_every_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self):
        return _jsonable(dataclasses.asdict(self))

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {"encoder": EncoderConfig, "data": SyntheticDatasetSpec,
               "prompt": PromptConfig, "scl": SclConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def component_rows(base):
    """The cumulative component configurations: CE only, +SCL, +GPA, +textual diversity."""
    off = base.replace(use_scl=False, use_gpa=False, use_textual_diversity=False)
    return {
        "ivlp": off,
        "+scl": off.replace(use_scl=True),
        "+scl+gpa": off.replace(use_scl=True, use_gpa=True),
        "full": off.replace(use_scl=True, use_gpa=True, use_textual_diversity=True),
    }
