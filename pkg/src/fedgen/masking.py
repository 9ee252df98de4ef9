"""Feature masks driven by the stability of first-layer weights.

Each client keeps one real-valued logit per input feature.  Inputs are
gated by ``sigmoid(logit)``.  After every local epoch the client folds its
current first-layer weights into exponential moving estimates of their mean
and variance; past the warm-up, features whose weights move more than
average have their logits pushed down and stable ones pushed up.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ShapeError, sigmoid

REDUCTIONS = ("mean", "max", "norm")


@dataclass
class MaskState:
    m: np.ndarray
    u: np.ndarray
    v: np.ndarray
    h: int
    alpha: float = 10.0
    beta: float = 0.1
    delta: float = 0.9
    e_init: int = 5
    epochs_seen: int = 0
    skipped_updates: int = 0
    reduction: str = "mean"

    def __post_init__(self):
        j = self.m.shape[0]
        if self.u.shape != (j * self.h,) or self.v.shape != (j * self.h,):
            raise ValueError(f"u and v must hold j*h = {j * self.h} entries")
        if not 0 < self.beta <= 1 or not 0 < self.delta <= 1:
            raise ValueError("beta and delta must lie in (0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if (self.v < 0).any():
            raise ValueError("variance estimates must be non-negative")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")

    @property
    def j(self) -> int:
        return self.m.shape[0]

    def copy(self) -> "MaskState":
        return replace(self, m=self.m.copy(), u=self.u.copy(), v=self.v.copy())

    @property
    def gates(self) -> np.ndarray:
        return sigmoid(self.m)


def init_mask(j, h, alpha=10.0, beta=0.1, delta=0.9, e_init=5, reduction="mean") -> MaskState:
    if j < 1 or h < 1:
        raise ValueError(f"mask dimensions must be positive, got j={j}, h={h}")
    return MaskState(
        m=np.ones(j), u=np.zeros(j * h), v=np.zeros(j * h), h=int(h),
        alpha=float(alpha), beta=float(beta), delta=float(delta), e_init=int(e_init),
        reduction=reduction,
    )


def ema_update(state: MaskState, w_view) -> MaskState:
    """Fold one epoch's feature-grouped first-layer weights into u and v."""
    w = np.asarray(w_view, dtype=np.float64)
    if w.shape != state.u.shape:
        raise ShapeError(f"weight view has {w.size} entries, expected {state.u.size}")
    u_old = state.u
    u = state.beta * w + (1.0 - state.beta) * u_old
    v = state.delta * state.v + (1.0 - state.delta) * (w - u_old) ** 2
    return replace(state, u=u, v=v, epochs_seen=state.epochs_seen + 1)


def feature_variance(state: MaskState) -> np.ndarray:
    grouped = state.v.reshape(state.j, state.h)
    if state.reduction == "max":
        return grouped.max(axis=1)
    if state.reduction == "norm":
        return np.sqrt((grouped ** 2).sum(axis=1))
    return grouped.mean(axis=1)


def mask_increment(variances, alpha) -> np.ndarray:
    """``mean(v) - alpha * v_i`` for every feature."""
    variances = np.asarray(variances, dtype=np.float64)
    return variances.mean() - alpha * variances


def mask_update(state: MaskState) -> MaskState:
    """Apply one variance-driven logit step.

    During warm-up (``epochs_seen <= e_init``) the state comes back with
    unchanged logits and ``skipped_updates`` incremented.
    """
    if state.epochs_seen <= state.e_init:
        return replace(state, skipped_updates=state.skipped_updates + 1)
    step = mask_increment(feature_variance(state), state.alpha)
    return replace(state, m=state.m + step)


def gate(state_or_logits, x) -> np.ndarray:
    logits = state_or_logits.m if isinstance(state_or_logits, MaskState) else np.asarray(state_or_logits)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != logits.shape[0]:
        raise ShapeError(f"input has {x.shape[-1]} features, mask has {logits.shape[0]}")
    return sigmoid(logits) * x


def aggregate_masks(entries, N=None) -> np.ndarray:
    """Sample-weighted average of client mask logits, in list order."""
    entries = list(entries)
    if not entries:
        raise ValueError("aggregate_masks needs at least one client")
    total = sum(n for _, n in entries) if N is None else N
    if total <= 0:
        raise ValueError("total sample count must be positive")
    out = np.zeros_like(_logits(entries[0][0]))
    for state, n in entries:
        out = out + (n / total) * _logits(state)
    return out


def _logits(state):
    return state.m if isinstance(state, MaskState) else np.asarray(state, dtype=np.float64)
