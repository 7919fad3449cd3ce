"""
# Partition

Synthetic Gaussian-blob datasets and their split across clients.

Three regimes are supported:

- `iid`: a uniform random permutation cut into `m` near-equal shards.
- `dirichlet`: for every class, its train samples are dealt to the clients in
  proportions drawn from `Dir(alpha * 1_m)` (per-class label-ratio draws).
- `pathological`: each class is cut into single-class pieces, `m * s` pieces in
  total, and every client receives `s` of them at random. A client therefore
  sees at most `s` labels.

A split that leaves a client without data is redrawn with the next attempt
key, up to `RESAMPLE_ATTEMPTS` times.
"""

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Generator

import numpy as np

from app import error, logging, objective, rng
from app.models import DatasetSpec, ModelSpec, PartitionKind, PartitionSpec

RESAMPLE_ATTEMPTS: int = 100

logger = logging.get_logger()


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    train: np.ndarray
    test: np.ndarray

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def batch(self, indices: np.ndarray, center: np.ndarray | None = None) -> objective.Batch:
        return objective.Batch(
            features=self.features[indices], labels=self.labels[indices], center=center
        )

    def train_batch(self) -> objective.Batch:
        return self.batch(self.train, center=self.features[self.train].mean(axis=0))

    def test_batch(self) -> objective.Batch:
        return self.batch(self.test, center=self.features[self.test].mean(axis=0))


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    indices: np.ndarray
    rng_stream: int

    @property
    def size(self) -> int:
        return self.indices.shape[0]


# =========================================================================== #
#                                   DATASETS                                  #
# =========================================================================== #


def _class_centers(d: int, classes: int, sep: float) -> np.ndarray:
    centers = np.zeros((classes, d))
    if classes <= 2 * d:
        # +e_0, -e_0, +e_1, -e_1, ...
        for c in range(classes):
            centers[c, c // 2] = 1.0 if c % 2 == 0 else -1.0
    else:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers[:, 0] = np.cos(angles)
        centers[:, 1] = np.sin(angles)
    return sep * centers


def make_synthetic(n: int, d: int, classes: int, sep: float, seed: int) -> Dataset:
    """Gaussian class blobs with unit covariance, class `c` centered at
    `sep * u_c`, split 80/20 into train and test within every class
    """
    if n < 10 * classes or d < 2 or sep <= 0 or classes < 1:
        raise error.ErrorConfig(
            f"synthetic data needs n >= 10 * classes, d >= 2 and sep > 0, got n = {n}, "
            f"d = {d}, classes = {classes}, sep = {sep}"
        )

    labels = np.arange(n) % classes
    draw = rng.stream(seed, rng.Stream.DATA)
    features = _class_centers(d, classes, sep)[labels] + draw.standard_normal((n, d))

    split = rng.stream(seed, rng.Stream.SPLIT)
    train, test = [], []
    for c in range(classes):
        members = split.permutation(np.flatnonzero(labels == c))
        cut = members.shape[0] * 4 // 5
        train.append(members[:cut])
        test.append(members[cut:])

    return Dataset(
        features=features,
        labels=labels,
        classes=classes,
        train=np.sort(np.concatenate(train)),
        test=np.sort(np.concatenate(test)),
    )


def dataset_from_spec(spec: DatasetSpec) -> Dataset:
    return make_synthetic(spec.n, spec.d, spec.classes, spec.sep, spec.seed)


# =========================================================================== #
#                                  PARTITIONS                                 #
# =========================================================================== #


def _split_iid(ds: Dataset, spec: PartitionSpec, draw: np.random.Generator) -> list[np.ndarray]:
    return np.array_split(draw.permutation(ds.train), spec.m)


def _split_dirichlet(
    ds: Dataset, spec: PartitionSpec, draw: np.random.Generator
) -> list[np.ndarray]:
    pieces: list[list[np.ndarray]] = [[] for _ in range(spec.m)]
    for c in range(ds.classes):
        members = draw.permutation(ds.train[ds.labels[ds.train] == c])
        proportions = draw.dirichlet(np.full(spec.m, spec.alpha))
        cuts = (np.cumsum(proportions) * members.shape[0]).astype(int)[:-1]
        for client, piece in enumerate(np.split(members, cuts)):
            pieces[client].append(piece)
    return [np.concatenate(client) for client in pieces]


def _apportion(sizes: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of `total` pieces over classes, at least one
    and at most `sizes[c]` pieces per class
    """
    quotas = sizes / sizes.sum() * total
    counts = np.minimum(np.maximum(np.floor(quotas).astype(int), 1), sizes)
    while counts.sum() < total:
        remainder = np.where(counts < sizes, quotas - counts, -np.inf)
        counts[np.argmax(remainder)] += 1
    while counts.sum() > total:
        counts[np.argmax(np.where(counts > 1, counts, -1))] -= 1
    return counts


def _split_pathological(
    ds: Dataset, spec: PartitionSpec, draw: np.random.Generator
) -> list[np.ndarray]:
    per_client = spec.classes_per_client
    members = [ds.train[ds.labels[ds.train] == c] for c in range(ds.classes)]
    counts = _apportion(np.array([len(group) for group in members]), spec.m * per_client)

    pieces: list[np.ndarray] = []
    for group, count in zip(members, counts):
        pieces.extend(np.array_split(draw.permutation(group), count))

    order = draw.permutation(len(pieces))
    return [
        np.concatenate([pieces[j] for j in order[i * per_client : (i + 1) * per_client]])
        for i in range(spec.m)
    ]


def _check_spec(ds: Dataset, spec: PartitionSpec):
    if spec.m > ds.train.shape[0]:
        raise error.ErrorPartitionSpec(
            f"{spec.m} clients exceed the {ds.train.shape[0]} train samples"
        )
    if spec.kind != PartitionKind.PATHOLOGICAL:
        return
    if spec.classes_per_client > ds.classes:
        raise error.ErrorPartitionSpec(
            f"classes_per_client = {spec.classes_per_client} exceeds the {ds.classes} classes"
        )
    pieces = spec.m * spec.classes_per_client
    if pieces < ds.classes:
        raise error.ErrorPartitionSpec(
            f"m * classes_per_client = {pieces} pieces cannot cover {ds.classes} classes"
        )
    if pieces > ds.train.shape[0]:
        raise error.ErrorPartitionSpec(
            f"m * classes_per_client = {pieces} pieces exceed the {ds.train.shape[0]} train samples"
        )


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    _check_spec(ds, spec)

    match spec.kind:
        case PartitionKind.IID:
            split = _split_iid
        case PartitionKind.DIRICHLET:
            split = _split_dirichlet
        case PartitionKind.PATHOLOGICAL:
            split = _split_pathological

    for attempt in range(RESAMPLE_ATTEMPTS):
        draw = rng.stream(spec.seed, rng.Stream.PARTITION, attempt)
        pieces = split(ds, spec, draw)
        empty = sum(piece.shape[0] == 0 for piece in pieces)
        if empty == 0:
            return [
                ClientShard(
                    client_id=i,
                    indices=np.sort(piece),
                    rng_stream=rng.derive_seed(spec.seed, rng.Stream.CLIENT, i),
                )
                for i, piece in enumerate(pieces)
            ]
        logger.warning(
            f"Partition - {spec.kind.value} - attempt {attempt} left {empty} clients empty, "
            "resampling"
        )

    raise error.ErrorPartitionExhausted(spec.kind.value, RESAMPLE_ATTEMPTS)


def shard_batch(ds: Dataset, shard: ClientShard) -> objective.Batch:
    """The whole shard as one batch, carrying the shard center"""
    if shard.size == 0:
        raise error.ErrorEmptySlice(f"shard of client {shard.client_id}")
    return ds.batch(shard.indices, center=ds.features[shard.indices].mean(axis=0))


def gen_batches(
    ds: Dataset, shard: ClientShard, batch_size: int, round: int
) -> Generator[objective.Batch, None, None]:
    """Minibatches of client `shard` for one round. The k-th batch is drawn
    without replacement from the stream keyed (client stream, round, k), so it
    does not depend on which thread runs the client.
    """
    center = ds.features[shard.indices].mean(axis=0)
    size = min(batch_size, shard.size)
    for k in itertools.count():
        draw = rng.stream(shard.rng_stream, rng.Stream.CLIENT, round, k)
        picked = np.sort(draw.choice(shard.indices, size=size, replace=False))
        yield ds.batch(picked, center=center)


def estimate_beta(
    ds: Dataset, shards: list[ClientShard], spec: ModelSpec, probes: list[np.ndarray]
) -> float:
    """Probe estimate of the homogeneity parameter: the largest
    `||grad f_i(x) - grad f(x)||` over clients and probe points, with full-shard
    gradients and `f` the mean of the client objectives. This is a lower bound
    on the supremum over all of parameter space.
    """
    if not probes:
        raise error.ErrorInput("estimate_beta needs at least one probe point")

    batches = [shard_batch(ds, shard) for shard in shards]
    beta = 0.0
    for probe in probes:
        grads = np.stack([objective.gradient(spec, probe, batch) for batch in batches])
        deviation = np.linalg.norm(grads - grads.mean(axis=0), axis=1)
        beta = max(beta, float(deviation.max()))
    return beta


def dump_partition(shards: list[ClientShard], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    assignment = {str(shard.client_id): shard.indices.tolist() for shard in shards}
    path.write_text(json.dumps(assignment))
