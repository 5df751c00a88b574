"""Synthetic class-prototype image data with a base/novel class split."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    C: int = 10
    base_count: int = 5
    samples_per_class_train: int = 32
    samples_per_class_test: int = 64
    noise_std: float = 1.5
    seed: int = 0
    samples_per_class_pretrain: int = 64
    M: int = 16
    patch_dim: int = 12
    domain_shift: float = 0.8

    def __post_init__(self):
        if not 1 <= self.base_count < self.C:
            raise ValueError(f"base_count must lie in [1, C), got {self.base_count} with C={self.C}")
        if self.samples_per_class_test < 1 or self.samples_per_class_train < 1:
            raise ValueError("need at least one train and one test sample per class")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def select(self, classes):
        mask = np.isin(self.y, list(classes))
        return Split(self.x[mask], self.y[mask])


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    prototypes: np.ndarray
    pretrain: Split
    train: Split
    test: Split

    @property
    def base_classes(self):
        return list(range(self.spec.base_count))

    @property
    def novel_classes(self):
        return list(range(self.spec.base_count, self.spec.C))


def _draw(rng, prototypes, per_class, noise_std):
    C = len(prototypes)
    y = np.repeat(np.arange(C), per_class)
    x = prototypes[y] + noise_std * rng.standard_normal((len(y),) + prototypes.shape[1:])
    return Split(x, y)


def generate_dataset(spec):
    """Prototype + Gaussian noise samples for every class; splits are independent draws."""
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.standard_normal((spec.C, spec.M, spec.patch_dim))
    pretrain = _draw(rng, prototypes, spec.samples_per_class_pretrain, spec.noise_std)
    # downstream classes look somewhat different from what pretraining saw
    downstream = prototypes + spec.domain_shift * rng.standard_normal(prototypes.shape)
    train = _draw(rng, downstream, spec.samples_per_class_train, spec.noise_std)
    test = _draw(rng, downstream, spec.samples_per_class_test, spec.noise_std)
    return SyntheticDataset(spec, prototypes, pretrain, train, test)
