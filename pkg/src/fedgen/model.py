"""MLP classifier built on :mod:`fedgen.autodiff`, plus its training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ShapeError, Tensor

DEFAULT_HIDDEN = (50, 50)


@dataclass
class ModelParams:
    """Layer weights (``out x in``) and biases of a ReLU MLP."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and one bias vector per layer required")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[k + 1], self.layer_dims[k])
            if w.shape != shape or b.shape != shape[:1]:
                raise ValueError(
                    f"layer {k}: expected weight {shape} and bias {shape[:1]}, "
                    f"got {w.shape} and {b.shape}"
                )

    @property
    def n_features(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        """Weights then biases, the canonical parameter order."""
        return [*self.weights, *self.biases]

    def copy(self) -> "ModelParams":
        return ModelParams(self.layer_dims, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        n = len(self.weights)
        return ModelParams(self.layer_dims, out[:n], out[n:])


@dataclass
class LossBreakdown:
    loc: float
    l1: float
    pen: float

    @property
    def total(self) -> float:
        return self.loc + self.l1 + self.pen


def init_params(seed, layer_dims) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"layer_dims must have at least two positive sizes, got {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(dims, weights, biases)


def _as_batch(x, n_features):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != n_features:
        raise ShapeError(f"input has shape {x.shape}, model expects {n_features} features")
    return x


class _Builder:
    """Records the forward pass of one model into a graph."""

    def __init__(self, params: ModelParams, graph: Graph | None = None):
        self.graph = graph if graph is not None else Graph()
        self.params = params
        self.w_ids = [self.graph.param(w) for w in params.weights]
        self.b_ids = [self.graph.param(b) for b in params.biases]

    def param_ids(self):
        return [*self.w_ids, *self.b_ids]

    def gated_input(self, x, mask_logits=None) -> int:
        g = self.graph
        xi = g.const(x)
        if mask_logits is None:
            return xi
        gate = g.apply("sigmoid", g.const(mask_logits))
        return g.apply("mul", xi, gate)

    def logits(self, z: int) -> int:
        g = self.graph
        h = z
        last = len(self.w_ids) - 1
        for k, (w, b) in enumerate(zip(self.w_ids, self.b_ids)):
            h = g.apply("add", g.apply("matvec", w, h), b)
            if k < last:
                h = g.apply("relu", h)
        return h


def forward(params: ModelParams, z) -> np.ndarray:
    """Logits for one gated input vector or a batch of them (rows)."""
    z = _as_batch(z, params.n_features)
    b = _Builder(params)
    return b.graph.value(b.logits(b.graph.const(z))).copy()


def predict_proba(params: ModelParams, x, mask_logits=None) -> np.ndarray:
    x = _as_batch(x, params.n_features)
    b = _Builder(params)
    out = b.logits(b.gated_input(x, mask_logits))
    logits = np.atleast_2d(b.graph.value(out))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def accuracy(params: ModelParams, x, y, mask_logits=None) -> float:
    proba = predict_proba(params, x, mask_logits)
    return float(np.mean(proba.argmax(axis=1) == np.asarray(y)))


@dataclass
class LossGraph:
    graph: Graph
    total: int
    param_ids: list[int]
    breakdown: LossBreakdown

    def gradients(self) -> list[np.ndarray]:
        grads = self.graph.backward(self.total)
        return [grads[i] for i in self.param_ids]


def fedgen_loss(params: ModelParams, batch, mask_logits=None, lam: float = 0.0,
                l1_weight: float = 0.0, prox_center: ModelParams | None = None,
                mu: float = 0.0) -> LossGraph:
    """Record the client objective for one batch.

    loc is the mean cross-entropy on inputs gated by ``sigmoid(mask_logits)``
    (``mask_logits=None`` bypasses gating).  l1 is ``l1_weight * sum|W|`` over
    the weight matrices.  pen is ``lam * mean_n(r_n)**2`` where
    ``r_n = (softmax(z_n) - onehot(y_n)) . z_n`` is the derivative of the
    sample's cross-entropy with respect to a scalar multiplier on its
    logits, taken at 1.  A FedProx term ``mu/2 ||w - prox_center||^2`` is
    folded into ``loc`` when ``mu > 0``.

    Terms whose weight is exactly zero are not recorded at all, so the
    zero-weight objective is bit-identical to plain ERM.
    """
    x, y = batch
    x = _as_batch(x, params.n_features)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("fedgen_loss needs a non-empty 2-d batch")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"labels have shape {y.shape}, expected ({x.shape[0]},)")
    if lam < 0 or l1_weight < 0 or mu < 0:
        raise ValueError("lam, l1_weight and mu must be non-negative")

    b = _Builder(params)
    g = b.graph
    n = x.shape[0]
    logits = b.logits(b.gated_input(x, mask_logits))
    ce = g.apply("softmax_ce", logits, target=y)
    loc = g.apply("scale", g.apply("sum", ce), factor=1.0 / n)
    total = loc
    loc_val = float(g.value(loc))

    if mu > 0:
        if prox_center is None:
            raise ValueError("mu > 0 requires prox_center")
        sq = None
        for pid, center in zip(b.param_ids(), prox_center.arrays()):
            term = g.apply("sum", g.apply("square", g.apply("sub", pid, g.const(center))))
            sq = term if sq is None else g.apply("add", sq, term)
        total = g.apply("add", total, g.apply("scale", sq, factor=mu / 2.0))
        loc_val = float(g.value(total))

    l1_val = 0.0
    if l1_weight > 0:
        norm = None
        for wid in b.w_ids:
            term = g.apply("l1", wid)
            norm = term if norm is None else g.apply("add", norm, term)
        l1 = g.apply("scale", norm, factor=l1_weight)
        l1_val = float(g.value(l1))
        total = g.apply("add", total, l1)

    pen_val = 0.0
    if lam > 0:
        onehot = np.zeros((n, params.n_classes))
        onehot[np.arange(n), y] = 1.0
        resid = g.apply("sub", g.apply("softmax", logits), g.const(onehot))
        per_sample = g.apply("dot", resid, logits)
        mean_r = g.apply("scale", g.apply("sum", per_sample), factor=1.0 / n)
        pen = g.apply("scale", g.apply("square", mean_r), factor=lam)
        pen_val = float(g.value(pen))
        total = g.apply("add", total, pen)

    return LossGraph(g, total, b.param_ids(), LossBreakdown(loc_val, l1_val, pen_val))


def loss_and_grad(params, batch, **kw) -> tuple[LossBreakdown, ModelParams]:
    """Loss breakdown and its gradient packed as a :class:`ModelParams`."""
    lg = fedgen_loss(params, batch, **kw)
    grads = lg.gradients()
    n = len(params.weights)
    return lg.breakdown, ModelParams(params.layer_dims, grads[:n], grads[n:])


def sgd_step(params: ModelParams, gradients: ModelParams, eta: float) -> ModelParams:
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    if gradients.layer_dims != params.layer_dims:
        raise ShapeError(
            f"gradient layout {gradients.layer_dims} does not match params {params.layer_dims}"
        )
    return ModelParams(
        params.layer_dims,
        [w - eta * gw for w, gw in zip(params.weights, gradients.weights)],
        [b - eta * gb for b, gb in zip(params.biases, gradients.biases)],
    )


def feature_weight_view(params: ModelParams, i: int) -> np.ndarray:
    """First-layer weights attached to input feature ``i`` (read-only)."""
    if not 0 <= i < params.n_features:
        raise IndexError(f"feature index {i} out of range for {params.n_features} features")
    view = params.weights[0][:, i]
    view.flags.writeable = False
    return view


def first_layer_by_feature(params: ModelParams) -> np.ndarray:
    """All first-layer weights, grouped feature-major (``j*h`` entries)."""
    return params.weights[0].T.ravel().copy()
