"""Federated round engine: FedAvg, FedProx, FedGen, pooled ERM, Inv-FedAvg."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import theorychecks
from .datasets import Environment, concat, partition_clients, strip_spurious
from .masking import MaskState, aggregate_masks, ema_update, init_mask, mask_update
from .model import (
    DEFAULT_HIDDEN,
    ModelParams,
    accuracy,
    fedgen_loss,
    first_layer_by_feature,
    init_params,
    loss_and_grad,
    sgd_step,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedgen", "erm", "inv-fedavg")


class TrainingAborted(RuntimeError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, round_, client, reason):
        super().__init__(f"round {round_}, client {client}: {reason}")
        self.round = round_
        self.client = client


@dataclass
class RunConfig:
    algorithm: str = "fedgen"
    n_clients: int = 10
    client_fraction: float = 1.0
    rounds: int = 30
    local_epochs: int = 40
    eta: float = 0.001
    lam: float = 1.0
    l1_weight: float = 1e-6
    mu: float = 1e-3
    alpha: float = 10.0
    beta: float = 0.1
    delta: float = 0.9
    e_init: int = 5
    batch_size: int = 64
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = 0
    partition: str = "stratified"
    variance_reduction: str = "mean"
    disable_scaling: bool = False
    disable_mask: bool = False
    disable_penalty: bool = False
    theory_checks: bool = False
    smoothness: float | None = None
    patience: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm must be one of {', '.join(ALGORITHMS)}")
        if not 0 < self.client_fraction <= 1:
            problems.append("client_fraction must lie in (0, 1]")
        for name in ("n_clients", "rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        if self.eta <= 0:
            problems.append("eta must be positive")
        for name in ("lam", "mu", "l1_weight"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.e_init < 0 or self.patience < 0:
            problems.append("e_init and patience must be non-negative")
        if any(h < 1 for h in self.hidden):
            problems.append("hidden sizes must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ClientState:
    id: int
    shard: Environment
    params: ModelParams | None = None
    mask: MaskState | None = None

    @property
    def n_k(self) -> int:
        return self.shard.n


@dataclass
class ServerState:
    params: ModelParams
    mask_logits: np.ndarray | None
    rng: np.random.Generator
    round: int = 0


@dataclass
class RoundReport:
    round: int
    algorithm: str
    train_accuracy: float
    test_accuracy: float | None
    loss_loc: float
    loss_l1: float
    loss_pen: float
    objective: float
    test_loss: float | None = None
    grad_norm_sq: float | None = None
    B_est: float | None = None
    eps_est: float | None = None
    bound_satisfied: bool | None = None
    mask_gates: np.ndarray | None = None
    skipped_mask_updates: int = 0
    wallclock_ms: float = 0.0


@dataclass
class RunResult:
    config: RunConfig
    reports: list[RoundReport]
    params: ModelParams
    mask_logits: np.ndarray | None
    clients: list[ClientState] = field(default_factory=list)
    theory: theorychecks.DescentSummary | None = None
    stopped_early: bool = False

    def __iter__(self):
        return iter(self.reports)

    def __len__(self):
        return len(self.reports)


def sample_clients(rng: np.random.Generator, K: int, fraction: float) -> list[int]:
    """``ceil(fraction * K)`` distinct client ids, sorted."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    m = min(K, math.ceil(fraction * K - 1e-12))
    if m == K:
        return list(range(K))
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def _batches(n, batch_size, seed, client, rnd, epoch):
    order = np.random.default_rng([seed, client, rnd, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(params, rnd, client):
    for a in params.arrays():
        if not np.isfinite(a).all():
            raise TrainingAborted(rnd, client, "parameters became non-finite")


def _local_sgd(params, shard, epochs, eta, batch_size, key, *, mask=None, bypass_mask=False,
               lam=0.0, l1_weight=0.0, mu=0.0, center=None):
    """Mini-batch SGD on one shard; FedGen mask statistics tracked when ``mask`` is given."""
    seed, client, rnd = key
    x, y = shard.x, shard.y
    for epoch in range(epochs):
        logits = None if (mask is None or bypass_mask) else mask.m
        for idx in _batches(shard.n, batch_size, seed, client, rnd, epoch):
            try:
                _, grad = loss_and_grad(params, (x[idx], y[idx]), mask_logits=logits, lam=lam,
                                        l1_weight=l1_weight, mu=mu, prox_center=center)
                params = sgd_step(params, grad, eta)
            except ValueError as exc:
                raise TrainingAborted(rnd + 1, client, str(exc)) from exc
        if mask is not None:
            mask = mask_update(ema_update(mask, first_layer_by_feature(params)))
    return params, mask


def client_update_fedavg(client: ClientState, w_t: ModelParams, E: int, eta: float,
                         batch_size: int, seed: int = 0, rnd: int = 0) -> ModelParams:
    params, _ = _local_sgd(w_t.copy(), client.shard, E, eta, batch_size, (seed, client.id, rnd))
    return params


def client_update_fedprox(client: ClientState, w_t: ModelParams, E: int, eta: float, mu: float,
                          batch_size: int, seed: int = 0, rnd: int = 0) -> ModelParams:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    params, _ = _local_sgd(w_t.copy(), client.shard, E, eta, batch_size, (seed, client.id, rnd),
                           mu=mu, center=w_t)
    return params


def client_update_fedgen(client: ClientState, w_t: ModelParams, M_t, E: int, eta: float,
                         lam: float, l1_weight: float, batch_size: int, *, alpha: float = 10.0,
                         beta: float = 0.1, delta: float = 0.9, e_init: int = 5,
                         disable_scaling=False, disable_mask=False, disable_penalty=False,
                         reduction="mean", seed: int = 0, rnd: int = 0):
    """Local FedGen round: E epochs of gated SGD with per-epoch mask updates.

    The client's moving weight statistics persist across rounds; its mask
    logits are overwritten by the broadcast ``M_t`` and the warm-up counter
    restarts.
    """
    j = w_t.n_features
    if np.shape(M_t) != (j,):
        raise ValueError(f"mask has shape {np.shape(M_t)}, model expects {j} features")
    h = w_t.layer_dims[1]
    mask = client.mask
    if mask is None:
        mask = init_mask(j, h, alpha, beta, delta, e_init, reduction)
    mask = replace(mask, m=np.array(M_t, dtype=np.float64), epochs_seen=0, e_init=e_init,
                   alpha=1.0 if disable_scaling else alpha, beta=beta, delta=delta)
    return _local_sgd(
        w_t.copy(), client.shard, E, eta, batch_size, (seed, client.id, rnd), mask=mask,
        bypass_mask=disable_mask, lam=0.0 if disable_penalty else lam, l1_weight=l1_weight,
    )


def aggregate_weights(entries, N=None) -> ModelParams:
    """Sample-weighted parameter average, summed in list order."""
    entries = list(entries)
    if not entries:
        raise ValueError("aggregate_weights needs at least one client")
    dims = entries[0][0].layer_dims
    for p, _ in entries:
        if p.layer_dims != dims:
            raise ValueError(f"parameter layout mismatch: {p.layer_dims} vs {dims}")
    total = sum(n for _, n in entries) if N is None else N
    if total <= 0:
        raise ValueError("total sample count must be positive")
    acc = [np.zeros_like(a) for a in entries[0][0].arrays()]
    for params, n in entries:
        w = n / total
        acc = [s + w * a for s, a in zip(acc, params.arrays())]
    k = len(dims) - 1
    return ModelParams(dims, acc[:k], acc[k:])


def _objective_weights(config: RunConfig):
    """Loss-term weights defining the per-client objective f_k of an algorithm."""
    if config.algorithm == "fedgen":
        return dict(lam=0.0 if config.disable_penalty else config.lam, l1_weight=config.l1_weight)
    return dict(lam=0.0, l1_weight=0.0)


def _gating(config, mask_logits):
    if config.algorithm != "fedgen" or config.disable_mask:
        return None
    return mask_logits


def evaluate_objective(shards, params, mask_logits, lam=0.0, l1_weight=0.0, with_grad=False):
    """Sample-weighted client loss breakdown at ``params``, plus flat client gradients."""
    N = sum(s.n for s in shards)
    loc = l1 = pen = 0.0
    grads = []
    for s in shards:
        w = s.n / N
        if with_grad:
            br, g = loss_and_grad(params, (s.x, s.y), mask_logits=mask_logits, lam=lam,
                                  l1_weight=l1_weight)
            grads.append(g.flat())
        else:
            br = fedgen_loss(params, (s.x, s.y), mask_logits=mask_logits, lam=lam,
                             l1_weight=l1_weight).breakdown
        loc += w * br.loc
        l1 += w * br.l1
        pen += w * br.pen
    return (loc, l1, pen), grads


def run_training(config: RunConfig, train_envs, test_env: Environment | None = None,
                 on_round=None) -> RunResult:
    """Run ``config.rounds`` communication rounds and report after each.

    ``erm`` trains one model on the pooled data for ``rounds * local_epochs``
    epochs (one report per ``local_epochs``); ``inv-fedavg`` is FedAvg on
    data whose spurious columns are zeroed.  ``on_round(report, server)`` is
    called after every round with the new :class:`RoundReport` and the
    current :class:`ServerState`.
    """
    config.validate()
    train_envs = list(train_envs)
    algo = config.algorithm
    if algo == "inv-fedavg":
        train_envs = [strip_spurious(e) for e in train_envs]
        test_env = strip_spurious(test_env) if test_env is not None else None

    if algo == "erm":
        shards = [concat(train_envs, "pooled")]
    else:
        shards = partition_clients(train_envs, config.n_clients, config.partition)
    clients = [ClientState(k, s) for k, s in enumerate(shards)]
    pooled = concat(train_envs, "pooled")
    j, C = pooled.n_features, pooled.n_classes
    if test_env is not None and test_env.n_features != j:
        raise ValueError(f"test data has {test_env.n_features} features, training data {j}")
    n_classes = max(C, test_env.n_classes if test_env is not None else 0)

    server = ServerState(
        params=init_params(config.seed, (j, *config.hidden, n_classes)),
        mask_logits=np.ones(j) if algo == "fedgen" else None,
        rng=np.random.default_rng([config.seed, 0x5E4E]),
    )
    obj_kw = _objective_weights(config)
    history: list[theorychecks.TheoryRecord] = []
    reports: list[RoundReport] = []
    prev_test, worse_streak, stopped = None, 0, False

    def theory_record():
        gating = _gating(config, server.mask_logits)
        (loc, l1, pen), grads = evaluate_objective(shards, server.params, gating,
                                                   with_grad=True, **obj_kw)
        weights = [s.n for s in shards]
        return theorychecks.TheoryRecord(
            objective=loc + l1 + pen,
            grad=theorychecks.weighted_mean(grads, weights),
            params=server.params.flat(),
            B=theorychecks.dissimilarity(grads, weights),
            eps=theorychecks.alignment(grads, weights),
        )

    if config.theory_checks:
        history.append(theory_record())

    for t in range(config.rounds):
        started = time.perf_counter()
        skipped = 0
        if algo == "erm":
            server.params, _ = _local_sgd(server.params.copy(), shards[0], config.local_epochs,
                                          config.eta, config.batch_size, (config.seed, 0, t))
        else:
            selected = sample_clients(server.rng, len(clients), config.client_fraction)
            updates = []
            for k in selected:
                c = clients[k]
                if algo == "fedgen":
                    c.params, c.mask = client_update_fedgen(
                        c, server.params, server.mask_logits, config.local_epochs, config.eta,
                        config.lam, config.l1_weight, config.batch_size, alpha=config.alpha,
                        beta=config.beta, delta=config.delta, e_init=config.e_init,
                        disable_scaling=config.disable_scaling, disable_mask=config.disable_mask,
                        disable_penalty=config.disable_penalty,
                        reduction=config.variance_reduction, seed=config.seed, rnd=t,
                    )
                    skipped += c.mask.skipped_updates
                    c.mask = replace(c.mask, skipped_updates=0)
                elif algo == "fedprox":
                    c.params = client_update_fedprox(c, server.params, config.local_epochs,
                                                     config.eta, config.mu, config.batch_size,
                                                     config.seed, t)
                else:
                    c.params = client_update_fedavg(c, server.params, config.local_epochs,
                                                    config.eta, config.batch_size, config.seed, t)
                _check_finite(c.params, t + 1, k)
                updates.append((c.params, c.n_k))
            N = sum(n for _, n in updates)
            server.params = aggregate_weights(updates, N)
            if algo == "fedgen":
                # clients keep their last local logits for inspection; the
                # broadcast overwrites them at the start of their next update
                server.mask_logits = aggregate_masks(
                    [(clients[k].mask, clients[k].n_k) for k in selected], N)
        server.round = t + 1

        gating = _gating(config, server.mask_logits)
        (loc, l1, pen), _ = evaluate_objective(shards, server.params, gating, **obj_kw)
        if not all(map(math.isfinite, (loc, l1, pen))):
            raise TrainingAborted(t + 1, "server", "objective is not finite")
        report = RoundReport(
            round=t + 1, algorithm=algo,
            train_accuracy=accuracy(server.params, pooled.x, pooled.y, gating),
            test_accuracy=None, loss_loc=loc, loss_l1=l1, loss_pen=pen, objective=loc + l1 + pen,
            mask_gates=None if server.mask_logits is None else 1 / (1 + np.exp(-server.mask_logits)),
            skipped_mask_updates=skipped,
        )
        if test_env is not None:
            report.test_accuracy = accuracy(server.params, test_env.x, test_env.y, gating)
            report.test_loss = fedgen_loss(server.params, (test_env.x, test_env.y),
                                           mask_logits=gating).breakdown.loc
        if config.theory_checks:
            rec = history[-1]
            report.grad_norm_sq, report.B_est, report.eps_est = rec.grad_norm_sq, rec.B, rec.eps
            history.append(theory_record())
        report.wallclock_ms = (time.perf_counter() - started) * 1000.0
        reports.append(report)
        log.debug("%s round %d: train %.3f test %s", algo, t + 1, report.train_accuracy,
                  report.test_accuracy)
        if on_round is not None:
            on_round(report, server)

        if config.patience and report.test_loss is not None:
            rising = prev_test is not None and report.test_loss > prev_test
            worse_streak = worse_streak + 1 if rising else 0
            prev_test = report.test_loss
            if worse_streak >= config.patience:
                stopped = True
                break

    summary = None
    if config.theory_checks and len(history) >= 2:
        summary = theorychecks.descent_check(history, config.eta, config.smoothness)
        for rep, tr in zip(reports, summary.rounds):
            rep.bound_satisfied = tr.bound_satisfied
    return RunResult(config, reports, server.params, server.mask_logits, clients, summary, stopped)
