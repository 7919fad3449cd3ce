from typing import Any

import numpy as np
import pytest

from app import harness, objective, partition, rng
from app.models import (
    DatasetSpec,
    FedConfig,
    ModelKind,
    ModelSpec,
    PartitionSpec,
    TopologySpec,
)


def quadratic_config(**fields: Any) -> FedConfig:
    """Two 1-D quadratic clients centered at 0 and 2 on the full graph, one
    round of one local step"""
    defaults: dict[str, Any] = {
        "algorithm": "dfedsam",
        "m": 2,
        "T": 1,
        "K": 1,
        "Q": 1,
        "eta0": 0.1,
        "eta_decay": 1.0,
        "rho": 0.1,
        "batch_size": 1,
        "data": DatasetSpec(n=10, d=1, classes=1),
        "topology": TopologySpec(kind="full", m=2),
        "partition": PartitionSpec(kind="iid", m=2),
        "model": ModelSpec(kind="quadratic", d=1, classes=1, l2=0.0),
    }
    return FedConfig(**{**defaults, **fields})


def quadratic_shards(centers: list[float]) -> tuple[partition.Dataset, list[partition.ClientShard]]:
    """One sample per client, the sample is the client's quadratic center"""
    m = len(centers)
    ds = partition.Dataset(
        features=np.array(centers, dtype=np.float64).reshape(m, 1),
        labels=np.zeros(m, dtype=np.int64),
        classes=1,
        train=np.arange(m),
        test=np.array([], dtype=np.int64),
    )
    shards = [
        partition.ClientShard(
            client_id=i,
            indices=np.array([i]),
            rng_stream=rng.derive_seed(0, rng.Stream.CLIENT, i),
        )
        for i in range(m)
    ]
    return ds, shards


def quadratic_batch(center: list[float]) -> objective.Batch:
    d = len(center)
    return objective.Batch(
        features=np.zeros((1, d)),
        labels=np.zeros(1, dtype=np.int64),
        center=np.array(center, dtype=np.float64),
    )


def small_fed(**fields: Any) -> dict[str, Any]:
    """Raw config of a run that finishes in well under a second"""
    fed: dict[str, Any] = {
        "algorithm": "dfedsam",
        "m": 4,
        "T": 5,
        "K": 2,
        "batch_size": 16,
        "data": {"n": 200, "d": 2, "classes": 2},
        "topology": {"kind": "ring"},
        "partition": {"kind": "iid"},
        "model": {"kind": "logistic"},
    }
    fed.update(fields)
    return fed


@pytest.fixture
def two_clients() -> tuple[partition.Dataset, list[partition.ClientShard]]:
    return quadratic_shards([0.0, 2.0])


@pytest.fixture
def blobs() -> partition.Dataset:
    return partition.make_synthetic(n=120, d=3, classes=3, sep=2.0, seed=7)


@pytest.fixture(params=[ModelKind.QUADRATIC, ModelKind.LOGISTIC, ModelKind.MLP])
def model_spec(request) -> ModelSpec:
    if request.param == ModelKind.QUADRATIC:
        return ModelSpec(kind=request.param, d=3, classes=3, l2=1e-3, curvature=[2.0, 1.0, 0.5])
    return ModelSpec(kind=request.param, d=3, hidden=5, classes=3, l2=1e-3)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(root))
    return root
