"""Runtime estimators for the convergence analysis of federated training.

Estimators return ``None`` where the quantity is undefined (a vanishing
global gradient) instead of a number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE = 1e-12


def weighted_mean(vectors, weights) -> np.ndarray:
    total = float(sum(weights))
    out = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    for v, w in zip(vectors, weights):
        out = out + (w / total) * np.asarray(v, dtype=np.float64)
    return out


def dissimilarity(grads, weights) -> float | None:
    """sqrt(E||g_k||^2 / ||E g_k||^2) with expectation weights ``n_k / N``."""
    full = weighted_mean(grads, weights)
    denom = float(full @ full)
    if denom <= DEGENERATE:
        return None
    total = float(sum(weights))
    spread = sum((w / total) * float(np.dot(g, g)) for g, w in zip(grads, weights))
    return float(np.sqrt(spread / denom))


def alignment(grads, weights, full_grad=None) -> float | None:
    """grad_F . E[g_k] / ||grad_F||^2; ``grad_F`` defaults to the weighted mean."""
    mean = weighted_mean(grads, weights)
    full = mean if full_grad is None else np.asarray(full_grad, dtype=np.float64)
    denom = float(full @ full)
    if denom <= DEGENERATE:
        return None
    return float(full @ mean) / denom


def client_gradients(shards, params, mask_logits=None, lam=0.0, l1_weight=0.0):
    """Full-batch flat gradient of every client objective at ``params``."""
    from .model import loss_and_grad

    grads = []
    for s in shards:
        _, g = loss_and_grad(params, (s.x, s.y), mask_logits=mask_logits, lam=lam,
                             l1_weight=l1_weight)
        grads.append(g.flat())
    return grads, [s.n for s in shards]


def estimate_B(shards, params, mask_logits=None, **loss_kw) -> float | None:
    return dissimilarity(*client_gradients(shards, params, mask_logits, **loss_kw))


def estimate_eps(shards, params, mask_logits=None, **loss_kw) -> float | None:
    return alignment(*client_gradients(shards, params, mask_logits, **loss_kw))


@dataclass
class TheoryRecord:
    """Global objective, gradient and iterate logged at the start of a round."""

    objective: float
    grad: np.ndarray
    params: np.ndarray
    B: float | None = None
    eps: float | None = None

    @property
    def grad_norm_sq(self) -> float:
        return float(self.grad @ self.grad)


@dataclass
class TheoryReport:
    round: int
    grad_norm_sq: float
    B_est: float | None
    eps_est: float | None
    rho: float | None
    decrease_observed: float
    decrease_bound: float
    bound_satisfied: bool
    Delta: float
    vacuous: bool = False
    contraction_satisfied: bool | None = None


@dataclass
class DescentSummary:
    rounds: list[TheoryReport]
    smoothness: float | None
    aggregate_lhs: float
    Delta: float
    aggregate_satisfied: bool
    violations: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def estimate_smoothness(params_hist, grad_hist) -> float | None:
    """Largest secant ratio ||g_a - g_b|| / ||w_a - w_b|| over consecutive iterates."""
    best = None
    for wa, wb, ga, gb in zip(params_hist, params_hist[1:], grad_hist, grad_hist[1:]):
        step = float(np.linalg.norm(np.asarray(wa) - np.asarray(wb)))
        if step <= DEGENERATE:
            continue
        ratio = float(np.linalg.norm(np.asarray(ga) - np.asarray(gb))) / step
        best = ratio if best is None else max(best, ratio)
    return best


def step_factor(eta, eps, L, B) -> float:
    """eta * (eps - L*eta*B^2/2): guaranteed decrease per unit squared gradient norm."""
    return eta * (eps - L * eta * B * B / 2.0)


def descent_check(history, eta: float, L: float | None = None, tol: float = 1e-9,
                  strong_convexity: float | None = None, f_star: float | None = None) -> DescentSummary:
    """Compare the observed per-round decrease with the smoothness bound.

    ``history`` holds one :class:`TheoryRecord` per iterate, ``T + 1`` in
    total.  Round ``t`` passes when ``F_t - F_{t+1} >= rho_t ||grad F_t||^2``
    up to a relative tolerance.  The aggregate check is
    ``mean_t rho_t ||grad F_t||^2 <= F_0 - min_t F_t``.  If
    ``strong_convexity`` and ``f_star`` are given, the linear contraction
    ``F_{t+1} - f* <= (1 - 2 mu rho)(F_t - f*)`` is checked too.
    """
    if len(history) < 2:
        raise ValueError("descent_check needs at least two logged iterates")
    notes = []
    if L is None:
        L = estimate_smoothness([h.params for h in history], [h.grad for h in history])
        if L is None:
            notes.append("smoothness undefined: iterates never moved")
    elif L <= 0:
        raise ValueError("L must be positive")

    f0 = history[0].objective
    f_best = min(h.objective for h in history)
    delta_total = f0 - f_best
    reports, violations, acc = [], [], 0.0
    for t, (cur, nxt) in enumerate(zip(history, history[1:]), start=1):
        gn = cur.grad_norm_sq
        observed = cur.objective - nxt.objective
        slack = tol * max(1.0, abs(cur.objective))
        rho = None
        if L is not None and cur.B is not None and cur.eps is not None:
            rho = step_factor(eta, cur.eps, L, cur.B)
        bound = 0.0 if rho is None else rho * gn
        vacuous = rho is not None and rho <= 0
        ok = observed >= bound - slack
        contraction = None
        if strong_convexity is not None and f_star is not None and rho is not None:
            factor = 1.0 - 2.0 * strong_convexity * rho
            contraction = nxt.objective - f_star <= factor * (cur.objective - f_star) + slack
        if not ok:
            violations.append(t)
        acc += bound
        reports.append(TheoryReport(t, gn, cur.B, cur.eps, rho, observed, bound, ok,
                                    f0 - cur.objective, vacuous, contraction))
    if any(r.vacuous for r in reports):
        notes.append("step size too large for guarantee")
    T = len(reports)
    lhs = acc / T
    return DescentSummary(
        rounds=reports, smoothness=L, aggregate_lhs=lhs, Delta=delta_total,
        aggregate_satisfied=lhs <= delta_total + tol * max(1.0, abs(f0)),
        violations=violations, notes=notes,
    )
