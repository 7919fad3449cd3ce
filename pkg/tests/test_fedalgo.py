import math

import numpy as np
import pytest

from app import error, fedalgo, metrics, optimizer, partition, topology
from app.models import FedConfig, ModelSpec, OptimizerKind, TopologySpec

from .conftest import quadratic_config, quadratic_shards, small_fed

X0 = np.array([1.0])


def client(shard: partition.ClientShard, kind: str, **fields) -> fedalgo.ClientState:
    opt = optimizer.OptState(kind=OptimizerKind(kind), eta=0.1, **fields)
    return fedalgo.ClientState(x=X0.copy(), opt=opt, shard=shard)


def fed(**fields) -> FedConfig:
    return FedConfig.model_validate(small_fed(**fields))


def assert_same_history(a: metrics.RunHistory, b: metrics.RunHistory):
    assert a.to_frame().equals(b.to_frame())
    np.testing.assert_array_equal(a.models, b.models)


# =========================================================================== #
#                                 LOCAL UPDATE                                #
# =========================================================================== #


def test_local_sam_update_by_hand(two_clients):
    ds, shards = two_clients
    z = [
        fedalgo.local_update(
            quadratic_config().model,
            client(shard, "sam", rho=0.1),
            1,
            partition.gen_batches(ds, shard, 1, 0),
        )[0]
        for shard in shards
    ]
    assert z == pytest.approx([0.89, 1.11], abs=1e-15)


def test_local_sgd_update_by_hand(two_clients):
    ds, shards = two_clients
    spec = quadratic_config().model
    state = client(shards[1], "sgd")

    one = fedalgo.local_update(spec, state, 1, partition.gen_batches(ds, shards[1], 1, 0))
    two = fedalgo.local_update(spec, state, 2, partition.gen_batches(ds, shards[1], 1, 0))
    assert one[0] == pytest.approx(1.1, abs=1e-15)
    assert two[0] == pytest.approx(1.19, abs=1e-15)
    np.testing.assert_array_equal(state.x, X0)


def test_local_update_needs_a_step(two_clients):
    ds, shards = two_clients
    with pytest.raises(error.ErrorInput):
        fedalgo.local_update(
            quadratic_config().model,
            client(shards[0], "sgd"),
            0,
            partition.gen_batches(ds, shards[0], 1, 0),
        )


# =========================================================================== #
#                                    GOSSIP                                   #
# =========================================================================== #


def test_gossip_spreads_a_point_mass():
    w = topology.mixing_matrix(topology.build_graph(TopologySpec(kind="ring", m=4)))
    X = np.eye(4)[:, :1]
    np.testing.assert_allclose(fedalgo.gossip_round(X, w, 1)[:, 0], [1 / 3, 1 / 3, 0, 1 / 3])


@pytest.mark.parametrize("kind", ["ring", "grid", "exponential", "full"])
def test_gossip_preserves_mean(kind):
    w = topology.mixing_matrix(topology.build_graph(TopologySpec(kind=kind, m=16)))
    X = np.random.default_rng(0).standard_normal((16, 6))
    np.testing.assert_allclose(
        fedalgo.gossip_round(X, w, 3).mean(axis=0), X.mean(axis=0), atol=1e-12
    )


def test_full_graph_gossip_is_averaging():
    w = topology.mixing_matrix(topology.build_graph(TopologySpec(kind="full", m=5)))
    X = np.random.default_rng(1).standard_normal((5, 3))
    mixed = fedalgo.gossip_round(X, w, 1)
    np.testing.assert_allclose(mixed, np.tile(X.mean(axis=0), (5, 1)), atol=1e-14)


def test_gossip_rejects_bad_inputs():
    w = topology.mixing_matrix(topology.build_graph(TopologySpec(kind="ring", m=4)))
    with pytest.raises(error.ErrorInput):
        fedalgo.gossip_round(np.zeros((4, 2)), w, 0)
    with pytest.raises(error.ErrorDimensionMismatch):
        fedalgo.gossip_round(np.zeros((3, 2)), w, 1)


# =========================================================================== #
#                                     RUNS                                    #
# =========================================================================== #


def test_dfedsam_round_by_hand(two_clients):
    ds, shards = two_clients
    history = fedalgo.run(quadratic_config(), dataset=ds, shards=shards, x0=X0)

    np.testing.assert_allclose(history.models, [[1.0], [1.0]], atol=1e-12)
    record = history.records[0]
    assert record.t == 1
    assert record.consensus_dist == pytest.approx(0.0, abs=1e-24)
    assert record.grad_norm_sq == pytest.approx(0.0, abs=1e-24)
    assert math.isnan(record.train_acc) and math.isnan(record.test_loss)


def test_dfedavg_round_by_hand(two_clients):
    ds, shards = two_clients
    history = fedalgo.run(
        quadratic_config(algorithm="dfedavg"), dataset=ds, shards=shards, x0=X0
    )
    np.testing.assert_allclose(history.models, [[1.0], [1.0]], atol=1e-12)
    assert history.records[0].comm_exchanges == 2


def test_quadratic_converges_to_shared_minimum(two_clients):
    ds, shards = two_clients
    config = quadratic_config(T=200)
    history = fedalgo.run(config, dataset=ds, shards=shards, x0=np.array([1.5]))

    np.testing.assert_allclose(history.models, [[1.0], [1.0]], atol=1e-6)
    assert history.records[-1].grad_norm_sq < 1e-6
    assert len(history.records) == 200


def test_sam_without_radius_is_dfedavg():
    sam = fedalgo.run(fed(algorithm="dfedsam", rho=0.0))
    avg = fedalgo.run(fed(algorithm="dfedavg", rho=0.0))
    assert_same_history(sam, avg)


def test_single_gossip_mgs_is_dfedsam():
    mgs = fedalgo.run(fed(algorithm="dfedsam_mgs", Q=1))
    sam = fedalgo.run(fed(algorithm="dfedsam", Q=1))
    assert_same_history(mgs, sam)


def test_more_gossip_steps_tighten_consensus():
    loose = fedalgo.run(fed(algorithm="dfedsam_mgs", Q=1, T=10, init="per-client"))
    tight = fedalgo.run(fed(algorithm="dfedsam_mgs", Q=4, T=10, init="per-client"))
    assert tight.records[0].consensus_dist < loose.records[0].consensus_dist
    assert tight.records[-1].comm_exchanges == 4 * loose.records[-1].comm_exchanges


def test_dpsgd_takes_one_step_and_one_gossip():
    dpsgd = fedalgo.run(fed(algorithm="dpsgd", K=3, Q=2))
    dfedavg = fedalgo.run(fed(algorithm="dfedavg", K=1, Q=1))
    assert_same_history(dpsgd, dfedavg)


def test_fedavg_matches_dfedavg_on_full_graph():
    config = {"T": 50, "topology": {"kind": "full"}, "sample_frac": 1.0}
    server = fedalgo.run(fed(algorithm="fedavg", **config))
    gossip = fedalgo.run(fed(algorithm="dfedavg", **config))

    for column in ("train_loss", "grad_norm_sq"):
        np.testing.assert_allclose(server.column(column), gossip.column(column), rtol=1e-10)
    np.testing.assert_allclose(server.models, gossip.models, rtol=1e-10, atol=1e-12)


def test_fedavg_tracks_dfedavg_every_round():
    config = {"topology": {"kind": "full"}, "sample_frac": 1.0}
    for T in range(1, 11):
        server = fedalgo.run(fed(algorithm="fedavg", T=T, **config))
        gossip = fedalgo.run(fed(algorithm="dfedavg", T=T, **config))
        np.testing.assert_allclose(
            server.models.mean(axis=0), gossip.models.mean(axis=0), rtol=1e-10, atol=1e-12
        )


def test_server_runs_broadcast_and_count_uploads():
    history = fedalgo.run(fed(algorithm="fedsam", sample_frac=0.5, T=3))

    assert [record.comm_exchanges for record in history.records] == [4, 8, 12]
    assert all(record.consensus_dist < 1e-25 for record in history.records)
    np.testing.assert_array_equal(history.models, np.tile(history.models[0], (4, 1)))


def test_thread_count_does_not_change_results():
    config = fed(algorithm="dfedsam_mgs", Q=2, T=4, partition={"kind": "dirichlet"})
    assert_same_history(fedalgo.run(config, workers=1), fedalgo.run(config, workers=8))


def test_rounds_stream_to_callback():
    seen = []
    history = fedalgo.run(fed(T=3), on_round=seen.append)
    assert [record.t for record in seen] == [1, 2, 3]
    assert seen == history.records


def test_hessian_eig_cadence():
    history = fedalgo.run(fed(T=4), metric_every=2)
    probes = [record.hessian_eig for record in history.records]
    assert probes[0] is None and probes[2] is None
    assert probes[1] > 0 and probes[3] > 0


def test_step_size_decays_per_round():
    history = fedalgo.run(fed(algorithm="dfedsam_mgs", Q=3, T=3, eta0=0.1, eta_decay=0.5))
    np.testing.assert_allclose(history.column("eta_t"), [0.1, 0.05, 0.025])


def test_pure_gossip_only_mixes():
    config = fed(algorithm="dfedavg", T=6, init="per-client", pure_gossip=True)
    w = topology.mixing_matrix(topology.build_graph(config.topology))

    history = fedalgo.run(config)
    expected = fedalgo.gossip_round(fedalgo.initial_models(config), w, 6)
    np.testing.assert_allclose(history.models, expected, atol=1e-12)


def test_fresh_graph_per_gossip_step():
    base = {
        "algorithm": "dfedsam_mgs",
        "Q": 2,
        "T": 2,
        "m": 8,
        "topology": {"kind": "time_varying_k", "k": 2},
    }
    reused = fedalgo.run(fed(**base))
    fresh = fedalgo.run(fed(**base, mgs_fresh_graph=True))
    assert not np.array_equal(reused.models, fresh.models)


def test_divergence_reports_where(two_clients):
    ds, shards = two_clients
    steep = ModelSpec(kind="quadratic", d=1, classes=1, l2=0.0, curvature=[1e300])
    config = quadratic_config(eta0=1.0, K=5, model=steep)

    with pytest.raises(error.ErrorDivergence) as caught:
        fedalgo.run(config, dataset=ds, shards=shards, x0=X0)

    diverged = caught.value
    assert diverged.client in (0, 1)
    assert diverged.round == 1
    assert diverged.snapshot.t == 0
    np.testing.assert_array_equal(diverged.snapshot.X, [[1.0], [1.0]])
    assert diverged.history.records == []


def test_shard_count_must_match(two_clients):
    ds, shards = two_clients
    with pytest.raises(error.ErrorDimensionMismatch):
        fedalgo.run(quadratic_config(), dataset=ds, shards=shards[:1], x0=X0)


# =========================================================================== #
#                                INITIALIZATION                               #
# =========================================================================== #


def test_initial_models_modes():
    shared = fedalgo.initial_models(fed(init="shared"))
    assert shared.shape == (4, 6)
    np.testing.assert_array_equal(shared, np.tile(shared[0], (4, 1)))

    spread = fedalgo.initial_models(fed(init="per-client"))
    assert metrics.consensus_distance(spread) > 0.0

    assert not fedalgo.initial_models(fed(init="zero")).any()


def test_initial_models_from_caller():
    config = fed()
    tiled = fedalgo.initial_models(config, np.arange(6.0))
    np.testing.assert_array_equal(tiled[3], np.arange(6.0))

    with pytest.raises(error.ErrorDimensionMismatch):
        fedalgo.initial_models(config, np.zeros(5))
