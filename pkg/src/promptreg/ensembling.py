"""Aggregation of per-epoch prompt snapshots: Gaussian-weighted, equal, EMA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prompting import PromptSet

MODES = ("gpa", "equal", "ema")


def gaussian_weights(E, mu, sigma2):
    """Gaussian density at epochs 1..E, normalised to sum to one."""
    if E < 1:
        raise ValueError("need at least one epoch")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    i = np.arange(1, E + 1, dtype=np.float64)
    # log-domain so tiny variances do not underflow every entry to zero
    logw = -((i - mu) ** 2) / (2.0 * sigma2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


@dataclass
class GaussianSchedule:
    E: int
    mu: float
    sigma2: float
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = gaussian_weights(self.E, self.mu, self.sigma2)


@dataclass
class AggregationState:
    mode: str
    E: int
    mu: float = 15.0
    sigma2: float = 1.0
    beta: float = 0.999
    consumed_epochs: int = 0
    arrays: list | None = None
    shapes: tuple = ()
    J: int = 0
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.E < 1:
            raise ValueError("need at least one epoch")
        if self.mode == "gpa":
            self.weights = gaussian_weights(self.E, self.mu, self.sigma2)
        if self.mode == "ema" and not 0.0 <= self.beta < 1.0:
            raise ValueError("ema beta must lie in [0, 1)")

    def provenance(self):
        out = {"mode": self.mode, "E": self.E}
        if self.mode == "gpa":
            out.update(mu=self.mu, sigma2=self.sigma2)
        if self.mode == "ema":
            out["beta"] = self.beta
        return out


def update(state, epoch_prompts, epoch_index):
    """Fold one epoch's prompts into the running aggregate (in place; returns state)."""
    if epoch_index != state.consumed_epochs + 1:
        raise ValueError(f"expected epoch {state.consumed_epochs + 1}, got {epoch_index}")
    if epoch_index > state.E:
        raise ValueError(f"epoch {epoch_index} beyond schedule length {state.E}")
    snap = [p.data.copy() for p in epoch_prompts.parameters()]
    shapes = tuple(a.shape for a in snap)
    if state.arrays is not None and shapes != state.shapes:
        raise ValueError("prompt shapes changed during aggregation")

    if state.mode == "gpa":
        w = state.weights[epoch_index - 1]
        if state.arrays is None:
            state.arrays = [w * a for a in snap]
        else:
            state.arrays = [acc + w * a for acc, a in zip(state.arrays, snap)]
    elif state.mode == "equal":
        if state.arrays is None:
            state.arrays = snap
        else:
            n = epoch_index
            state.arrays = [acc + (a - acc) / n for acc, a in zip(state.arrays, snap)]
    else:
        if state.arrays is None:
            state.arrays = snap
        else:
            b = state.beta
            state.arrays = [b * acc + (1.0 - b) * a for acc, a in zip(state.arrays, snap)]
    state.shapes = shapes
    state.consumed_epochs = epoch_index
    state.J = epoch_prompts.J
    return state


def finalize(state):
    """Aggregated prompts as a frozen PromptSet."""
    if state.arrays is None:
        raise ValueError("no epochs aggregated")
    if state.mode == "gpa" and state.consumed_epochs != state.E:
        raise ValueError(f"gpa needs all {state.E} epochs, got {state.consumed_epochs}")
    J = state.J
    return PromptSet.from_arrays(state.arrays[:J], state.arrays[J:], requires_grad=False)
