"""Spurious-correlation environments, client partitioning and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Environment:
    """One labelled data distribution.

    ``alpha`` is the probability that a spurious column carries the code of
    the observed label.  Spurious columns are listed in ``spurious_idx``.
    """

    x: np.ndarray
    y: np.ndarray
    alpha: float
    spurious_idx: tuple[int, ...] = ()
    env_id: str = "env"
    n_classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y)
        if x.ndim != 2:
            raise ValueError(f"x must be 2-d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"y must have {x.shape[0]} labels, got shape {y.shape}")
        if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integral")
        y = y.astype(np.int64)
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = int(y.max()) + 1 if y.size else 0
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"labels must lie in 0..{n_classes - 1}")
        spur = tuple(sorted(int(i) for i in self.spurious_idx))
        if any(not 0 <= i < x.shape[1] for i in spur):
            raise ValueError(f"spurious indices {spur} out of range for {x.shape[1]} features")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "spurious_idx", spur)
        object.__setattr__(self, "n_classes", n_classes)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def invariant_idx(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_features) if i not in self.spurious_idx)


@dataclass
class DatasetSpec:
    n_invariant: int = 10
    n_spurious: int = 1
    n_classes: int = 2
    train_alphas: list[float] = field(default_factory=lambda: [0.8, 0.9])
    test_alpha: float = 0.1
    samples: int = 1000
    test_samples: int | None = None
    label_noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_invariant < 1 or self.n_spurious < 0:
            raise ValueError("need n_invariant >= 1 and n_spurious >= 0")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.n_classes > 2 and self.n_invariant < self.n_classes:
            raise ValueError("multiclass data needs at least one invariant feature per class")
        if not self.train_alphas:
            raise ValueError("at least one training distribution required")
        for a in [*self.train_alphas, self.test_alpha]:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha {a} outside [0, 1]")
        if self.samples < 1 or (self.test_samples is not None and self.test_samples < 1):
            raise ValueError("sample counts must be at least 1")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")


def _class_means(n_inv, n_classes):
    # unit class axes scaled so every pair of class means is 2.0 apart
    if n_classes == 2:
        axis = np.ones(n_inv) / math.sqrt(n_inv)
        return np.stack([-axis, axis])
    means = np.zeros((n_classes, n_inv))
    for c in range(n_classes):
        members = np.arange(c, n_inv, n_classes)
        means[c, members] = 1.0 / math.sqrt(members.size)
    return means * math.sqrt(2.0)


def spurious_codes(n_classes) -> np.ndarray:
    """Column value encoding each class's spurious marker, spread over [-1, 1]."""
    return np.linspace(-1.0, 1.0, n_classes)


def _other_class(rng, y, n_classes):
    shift = rng.integers(1, n_classes, size=y.shape)
    return (y + shift) % n_classes


def _make_env(rng, spec: DatasetSpec, alpha, n, env_id):
    c = spec.n_classes
    clean = rng.integers(0, c, size=n)
    inv = rng.standard_normal((n, spec.n_invariant)) + _class_means(spec.n_invariant, c)[clean]
    y = clean.copy()
    flip = rng.random(n) < spec.label_noise
    y[flip] = _other_class(rng, clean[flip], c)
    codes = spurious_codes(c)
    spur = np.empty((n, spec.n_spurious))
    for s in range(spec.n_spurious):
        agree = rng.random(n) < alpha
        marker = np.where(agree, y, _other_class(rng, y, c))
        spur[:, s] = codes[marker]
    x = np.hstack([inv, spur])
    spurious_idx = tuple(range(spec.n_invariant, spec.n_invariant + spec.n_spurious))
    return Environment(x, y, float(alpha), spurious_idx, env_id, c)


def gen_synthetic(spec: DatasetSpec) -> list[Environment]:
    """Training environments (one per ``train_alphas`` entry) then the test one.

    Invariant columns come first and carry the same class-conditional
    Gaussian signal in every environment; spurious columns follow.
    """
    spec.validate()
    seq = np.random.SeedSequence(spec.seed)
    rngs = [np.random.default_rng(s) for s in seq.spawn(len(spec.train_alphas) + 1)]
    envs = [
        _make_env(rng, spec, a, spec.samples, f"train{k}")
        for k, (rng, a) in enumerate(zip(rngs, spec.train_alphas))
    ]
    n_test = spec.samples if spec.test_samples is None else spec.test_samples
    envs.append(_make_env(rngs[-1], spec, spec.test_alpha, n_test, "test"))
    return envs


def spurious_agreement(env: Environment, column: int | None = None) -> float:
    """Fraction of rows whose spurious column carries its label's code."""
    if not env.spurious_idx:
        raise ValueError("environment has no spurious features")
    col = env.spurious_idx[0] if column is None else column
    codes = spurious_codes(env.n_classes)
    return float(np.mean(np.isclose(env.x[:, col], codes[env.y])))


def concat(envs, env_id="pooled") -> Environment:
    envs = list(envs)
    n = sum(e.n for e in envs)
    alpha = sum(e.alpha * e.n for e in envs) / n
    return Environment(
        np.vstack([e.x for e in envs]), np.concatenate([e.y for e in envs]), alpha,
        envs[0].spurious_idx, env_id, max(e.n_classes for e in envs),
    )


def _subset(env, idx, env_id):
    return Environment(env.x[idx], env.y[idx], env.alpha, env.spurious_idx, env_id, env.n_classes)


def partition_clients(envs, K: int, scheme: str = "stratified") -> list[Environment]:
    """Split training environments into ``K`` disjoint client shards.

    ``stratified``: with at least as many clients as environments, clients
    are assigned to environments in contiguous blocks and each environment's
    rows are dealt round-robin over its block.  With fewer clients, whole
    environments are grouped onto clients instead.
    ``mixed``: every environment's rows are dealt round-robin over all
    clients, so each client sees every environment.
    """
    envs = list(envs)
    total = sum(e.n for e in envs)
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > total:
        raise ValueError(f"K={K} exceeds the {total} available samples")

    buckets: list[list[tuple[Environment, np.ndarray]]] = [[] for _ in range(K)]
    if scheme == "stratified":
        n_env = len(envs)
        if K >= n_env:
            for e, env in enumerate(envs):
                block = [c for c in range(K) if c * n_env // K == e]
                for r, c in enumerate(block):
                    buckets[c].append((env, np.arange(r, env.n, len(block))))
        else:
            for e, env in enumerate(envs):
                buckets[e * K // n_env].append((env, np.arange(env.n)))
    elif scheme == "mixed":
        offset = 0
        for env in envs:
            for c in range(K):
                start = (c - offset) % K
                buckets[c].append((env, np.arange(start, env.n, K)))
            offset = (offset + env.n) % K
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")

    shards = []
    for c, parts in enumerate(buckets):
        pieces = [_subset(env, idx, f"client{c}") for env, idx in parts if idx.size]
        if not pieces:
            raise ValueError(f"client {c} received no samples; use fewer clients")
        shards.append(pieces[0] if len(pieces) == 1 else concat(pieces, f"client{c}"))
    return shards


def strip_spurious(env: Environment) -> Environment:
    if not env.spurious_idx:
        return env
    x = env.x.copy()
    x[:, list(env.spurious_idx)] = 0.0
    return Environment(x, env.y, env.alpha, (), env.env_id, env.n_classes)


class CSVFormatError(ValueError):
    pass


def save_csv(env: Environment, path, label_column: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(env.n_features)] + [label_column])
        for row, label in zip(env.x, env.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, label_column: str = "label", spurious_idx=(), alpha: float = float("nan"),
             n_classes: int | None = None, env_id: str | None = None) -> Environment:
    """Read a header-first CSV whose non-label columns are numeric features."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise CSVFormatError(f"{path}: label column {label_column!r} not in header")
    label_pos = header.index(label_column)
    # keep file line numbers for error messages; blank lines are skipped
    data = [(i, r) for i, r in enumerate(rows[1:], start=2) if any(cell.strip() for cell in r)]
    if not data:
        raise CSVFormatError(f"{path}: no data rows")

    feats, labels = [], []
    for lineno, row in data:
        if len(row) != len(header):
            raise CSVFormatError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
        values = []
        for col, cell in enumerate(row):
            try:
                val = float(cell)
            except ValueError:
                raise CSVFormatError(
                    f"{path}: row {lineno}, column {header[col]!r}: non-numeric value {cell!r}"
                ) from None
            if not math.isfinite(val):
                raise CSVFormatError(f"{path}: row {lineno}, column {header[col]!r}: non-finite value")
            values.append(val)
        label = values.pop(label_pos)
        if label != int(label) or label < 0 or (n_classes is not None and label >= n_classes):
            raise CSVFormatError(
                f"{path}: row {lineno}, column {label_column!r}: label {cell_repr(label)} out of range"
            )
        feats.append(values)
        labels.append(int(label))
    return Environment(np.array(feats), np.array(labels), float(alpha), tuple(spurious_idx),
                       env_id or path.stem, n_classes)


def cell_repr(v: float) -> str:
    return str(int(v)) if v == int(v) else repr(v)
