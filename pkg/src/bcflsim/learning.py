"""Tiny MLP, local SGD training, evaluation, non-IID partitioning, DP noise, FedAvg.

FedAvg is computed from an exact representation of the weighted sum
sum_i n_i * w_i (error-free products, correctly rounded summation), so the
result depends only on the multiset of contributions. Pre-aggregated records
carry their exact partial terms, which makes nested averaging bit-identical
to flat averaging.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class TrainingDivergence(Exception):
    pass


class EvaluationError(Exception):
    pass


class AggregationError(Exception):
    pass


class PartitionError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Ordered (weight, bias) pairs; weight has shape (fan_in, fan_out)."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def shapes(self) -> tuple[tuple[tuple[int, int], tuple[int]], ...]:
        return tuple((w.shape, b.shape) for w, b in self.layers)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    @classmethod
    def from_flat(cls, vec: np.ndarray, shapes) -> ModelParams:
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for wshape, bshape in shapes:
            wn, bn = int(np.prod(wshape)), int(np.prod(bshape))
            w = vec[pos:pos + wn].reshape(wshape).copy()
            pos += wn
            b = vec[pos:pos + bn].reshape(bshape).copy()
            pos += bn
            out.append((w, b))
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} values, shapes need {pos}")
        return cls(tuple(out))

    def copy(self) -> ModelParams:
        return ModelParams(tuple((w.copy(), b.copy()) for w, b in self.layers))

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)

    def same_as(self, other: ModelParams) -> bool:
        """Bit-exact equality."""
        if self.shapes != other.shapes:
            return False
        return all(np.array_equal(a, c) and np.array_equal(b, d)
                   for (a, b), (c, d) in zip(self.layers, other.layers))


def init_params(sizes: Sequence[int], seed: int) -> ModelParams:
    """He-initialised weights, zero biases. sizes = (inputs, hidden..., classes)."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(tuple(layers))


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def dims(self) -> int:
        return int(self.features.shape[1])


@dataclass
class DatasetPartition:
    features: np.ndarray
    labels: np.ndarray
    assigned_classes: list[int]
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if len(self.indices) == 0 and len(self.labels) > 0:
            self.indices = np.arange(len(self.labels))
        bad = set(np.unique(self.labels).tolist()) - set(self.assigned_classes)
        if bad:
            raise PartitionError(f"labels {sorted(bad)} outside assigned classes")

    @property
    def sample_count(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, rows: np.ndarray) -> DatasetPartition:
        return DatasetPartition(self.features[rows], self.labels[rows], list(self.assigned_classes),
                                self.indices[rows])

    def sample(self, size: int, rng: np.random.Generator) -> DatasetPartition:
        """Seeded slice of at most `size` rows, without replacement."""
        if size >= self.sample_count:
            return self
        rows = np.sort(rng.choice(self.sample_count, size=size, replace=False))
        return self.subset(rows)

    def split(self, test_fraction: float, rng: np.random.Generator) -> tuple[DatasetPartition, DatasetPartition]:
        perm = rng.permutation(self.sample_count)
        n_test = int(round(self.sample_count * test_fraction))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))


def as_partition(ds: Dataset, rows: np.ndarray | None = None) -> DatasetPartition:
    rows = np.arange(len(ds)) if rows is None else rows
    labels = ds.labels[rows]
    return DatasetPartition(ds.features[rows], labels, sorted(set(labels.tolist())), rows)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate must be >= 0, epochs and batch_size >= 1")


@dataclass
class UpdateRecord:
    node: int
    params: ModelParams
    sample_count: int
    train_loss: float = 0.0
    claimed_accuracy: float = 0.0
    signature: bytes = b""
    round: int = 0
    # claimed cross-entropy on the shared validation slice (the verifiable mining loss)
    val_loss: float = 0.0
    # exact weighted-sum terms for pre-aggregated records; see fedavg
    partials: np.ndarray | None = None
    members: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not 0.0 <= self.claimed_accuracy <= 1.0:
            raise ValueError("claimed_accuracy must lie in [0, 1]")


# --- forward / backward -----------------------------------------------------

def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    logp = _log_softmax(forward(params, x))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, ModelParams]:
    """Mean softmax cross-entropy and its analytic gradient."""
    acts = [x]
    pre = []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    logp = _log_softmax(acts[-1])
    n = x.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(params.layers)
    for i in range(last, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (pre[i - 1] > 0)
    return loss, ModelParams(tuple(grads))


def local_train(params: ModelParams, part: DatasetPartition, cfg: TrainConfig) -> tuple[ModelParams, float]:
    """Seeded mini-batch SGD. Returns new params and the mean loss over the final epoch."""
    if part.sample_count == 0:
        raise ValueError("cannot train on an empty partition")
    if part.features.shape[1] != params.sizes[0]:
        raise ValueError("feature width does not match the model input")
    rng = np.random.default_rng(cfg.seed)
    layers = [(w.copy(), b.copy()) for w, b in params.layers]
    n = part.sample_count
    epoch_loss = 0.0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, g = loss_and_grad(ModelParams(tuple(layers)), part.features[rows], part.labels[rows])
            if not (math.isfinite(loss) and g.is_finite()):
                raise TrainingDivergence("non-finite loss or gradient during local training")
            total += loss * len(rows)
            for (w, b), (gw, gb) in zip(layers, g.layers):
                w -= cfg.learning_rate * gw
                b -= cfg.learning_rate * gb
        epoch_loss = total / n
    out = ModelParams(tuple(layers))
    if not out.is_finite():
        raise TrainingDivergence("parameters became non-finite")
    return out, epoch_loss


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(params, x), axis=1)


def evaluate(params: ModelParams, data: DatasetPartition) -> float:
    if data.sample_count == 0:
        raise EvaluationError("empty evaluation set")
    if data.features.ndim != 2 or data.features.shape[1] != params.sizes[0]:
        raise EvaluationError(f"features of width {data.features.shape[-1]} do not fit "
                              f"a model with {params.sizes[0]} inputs")
    correct = int((predict(params, data.features) == data.labels).sum())
    return correct / data.sample_count


def add_dp_noise(params: ModelParams, sigma: float, seed: int) -> ModelParams:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return params.copy()
    rng = np.random.default_rng(seed)
    return ModelParams(tuple((w + rng.normal(0.0, sigma, w.shape), b + rng.normal(0.0, sigma, b.shape))
                             for w, b in params.layers))


# --- partitioning -----------------------------------------------------------

def assign_classes(classes: Sequence[int], n_nodes: int, classes_per_node: int) -> list[list[int]]:
    classes = sorted(classes)
    if classes_per_node > len(classes):
        raise PartitionError(f"classes_per_node={classes_per_node} exceeds the {len(classes)} available classes")
    c = len(classes)
    return [[classes[(k * classes_per_node + j) % c] for j in range(classes_per_node)] for k in range(n_nodes)]


def partition_non_iid(dataset: Dataset, n_nodes: int, classes_per_node: int, seed: int) -> list[DatasetPartition]:
    """Round-robin class sets over sorted labels; a class shared by several
    nodes is split evenly between them."""
    if len(dataset) == 0:
        raise PartitionError("empty dataset")
    if n_nodes < 1 or classes_per_node < 1:
        raise PartitionError("n_nodes and classes_per_node must be positive")
    assignment = assign_classes(dataset.classes, n_nodes, classes_per_node)
    rng = np.random.default_rng(seed)
    rows: list[list[np.ndarray]] = [[] for _ in range(n_nodes)]
    for cls in dataset.classes:
        holders = [k for k in range(n_nodes) if cls in assignment[k]]
        if not holders:
            continue
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for k, chunk in zip(holders, np.array_split(idx, len(holders))):
            rows[k].append(chunk)
    parts = []
    for k in range(n_nodes):
        r = np.sort(np.concatenate(rows[k])) if rows[k] else np.zeros(0, dtype=np.int64)
        parts.append(DatasetPartition(dataset.features[r], dataset.labels[r], assignment[k], r))
    return parts


# --- aggregation ------------------------------------------------------------

_SPLITTER = 134217729.0  # 2**27 + 1
_MAX_COUNT = 1 << 26


def _split(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Veltkamp split: a == hi + lo exactly, each half with <= 26 significant bits."""
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def weighted_terms(update: UpdateRecord) -> np.ndarray:
    """Rows of floats whose exact column sums equal sample_count * params."""
    if update.partials is not None:
        return update.partials
    if update.sample_count >= _MAX_COUNT:
        raise AggregationError("sample_count too large for exact aggregation")
    flat = update.params.flatten()
    if not np.isfinite(flat).all():
        raise AggregationError(f"update from node {update.node} has non-finite parameters")
    hi, lo = _split(flat)
    n = float(update.sample_count)
    return np.stack([n * hi, n * lo])


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def expansion(terms: np.ndarray) -> np.ndarray:
    """Few rows whose exact column sums equal those of terms (error-free TwoSum
    cascade; zeros are compacted away as rows accumulate)."""
    parts = np.zeros((0, terms.shape[1]))
    for row in terms:
        x = row
        out = []
        for p in parts:
            x, err = _two_sum(x, p)
            out.append(err)
        out.append(x)
        parts = np.array(out)
        if len(parts) > 4:
            parts = _compact(parts)
    return _compact(parts)


def _compact(parts: np.ndarray) -> np.ndarray:
    """Move the nonzero entries of each column to the top, keeping their order."""
    mask = parts != 0
    rank = np.cumsum(mask, axis=0) - 1
    depth = max(1, int(mask.sum(axis=0).max()))
    out = np.zeros((depth, parts.shape[1]))
    rows, cols = np.nonzero(mask)
    out[rank[rows, cols], cols] = parts[rows, cols]
    return out


def _exact_column_sums(terms: np.ndarray) -> np.ndarray:
    compact = expansion(terms)
    return np.array([math.fsum(col) for col in compact.T.tolist()], dtype=np.float64)


def exact_mean(terms: np.ndarray, total: int) -> np.ndarray:
    """Correctly rounded column means of an exactly represented sum."""
    s = _exact_column_sums(terms)
    q0 = s / total
    qhi, qlo = _split(q0)
    n = float(total)
    residual = _exact_column_sums(np.vstack([terms, -n * qhi[None, :], -n * qlo[None, :]]))
    return q0 + residual / n


def fedavg(updates: Sequence[UpdateRecord]) -> ModelParams:
    """Sample-count weighted average of the updates' parameters."""
    if not updates:
        raise AggregationError("fedavg needs at least one update")
    shapes = updates[0].params.shapes
    for u in updates[1:]:
        if u.params.shapes != shapes:
            raise AggregationError(f"shape mismatch in update from node {u.node}")
    total = sum(u.sample_count for u in updates)
    if total >= _MAX_COUNT:
        raise AggregationError("total sample count too large for exact aggregation")
    terms = np.vstack([weighted_terms(u) for u in updates])
    return ModelParams.from_flat(exact_mean(terms, total), shapes)


def pre_aggregate(updates: Sequence[UpdateRecord], node: int, round_: int = 0) -> UpdateRecord:
    """Aggregate a group into one record that carries its exact partial sums."""
    params = fedavg(updates)
    return UpdateRecord(
        node=node,
        params=params,
        sample_count=sum(u.sample_count for u in updates),
        train_loss=float(np.mean([u.train_loss for u in updates])),
        claimed_accuracy=max(u.claimed_accuracy for u in updates),
        round=round_,
        partials=expansion(np.vstack([weighted_terms(u) for u in updates])),
        members=tuple(sorted(m for u in updates for m in (u.members or (u.node,)))),
    )


def with_params(update: UpdateRecord, params: ModelParams) -> UpdateRecord:
    return replace(update, params=params, partials=None)
