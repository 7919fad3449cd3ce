"""Qualitative trends over several seeds. Each test takes minutes, run them
with `pytest -m slow`."""

import numpy as np
import pytest

from app import fedalgo
from app.models import FedConfig

SEEDS = range(5)
ROUNDS = 200

pytestmark = pytest.mark.slow


def heterogeneous(seed: int, **fields) -> FedConfig:
    raw = {
        "algorithm": "dfedsam",
        "m": 16,
        "T": ROUNDS,
        "seed": seed,
        "data": {"n": 2000, "classes": 2},
        "partition": {"kind": "dirichlet", "alpha": 0.3},
        "model": {"kind": "logistic"},
    }
    raw.update(fields)
    return FedConfig.model_validate(raw)


def final(config: FedConfig, metric_every: int = ROUNDS):
    return fedalgo.run(config, metric_every=metric_every).records[-1]


def test_sparser_graphs_keep_clients_apart():
    kinds = ["ring", "grid", "exponential", "full"]
    consensus = {kind: [] for kind in kinds}
    accuracy = {kind: [] for kind in kinds}
    for seed in SEEDS:
        for kind in kinds:
            record = final(heterogeneous(seed, topology={"kind": kind}))
            consensus[kind].append(record.consensus_dist)
            accuracy[kind].append(record.test_acc)

    per_seed = np.array([consensus[kind] for kind in kinds]).T
    monotone = sum(list(row) == sorted(row, reverse=True) for row in per_seed)
    assert monotone >= 4

    means = [np.mean(consensus[kind]) for kind in kinds]
    assert means == sorted(means, reverse=True)
    assert np.mean(accuracy["full"]) >= np.mean(accuracy["ring"]) - 0.005


def test_multiple_gossip_steps_tighten_ring():
    single, multiple = [], []
    for seed in SEEDS:
        ring = {"topology": {"kind": "ring"}}
        single.append(final(heterogeneous(seed, **ring)).consensus_dist)
        mgs = heterogeneous(seed, algorithm="dfedsam_mgs", Q=4, **ring)
        multiple.append(final(mgs).consensus_dist)

    assert np.mean(multiple) <= 0.5 * np.mean(single)


def test_sam_finds_flatter_minima():
    flatter = 0
    for seed in SEEDS:
        fields = {
            "topology": {"kind": "exponential"},
            "model": {"kind": "mlp", "hidden": 16},
            "rho": 0.05,
        }
        sam = final(heterogeneous(seed, algorithm="dfedsam", **fields))
        avg = final(heterogeneous(seed, algorithm="dfedavg", **fields))
        flatter += sam.hessian_eig <= avg.hessian_eig

    assert flatter >= 4
