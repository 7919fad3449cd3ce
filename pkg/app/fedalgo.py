"""
# Federated algorithms

## Structure

A run is a sequence of communication rounds. Each round:

    - every participating client copies its model and takes K local optimizer
      steps, each on a fresh minibatch of its own shard
    - gossip algorithms mix the resulting models with their graph neighbors Q
      times (`X <- W X`), server algorithms average the sampled clients and
      broadcast the result
    - the round's metrics are measured at the averaged model

Which local optimizer and which aggregation an algorithm uses is looked up in
`MAPPINGS_ALGORITHM`.

## Contracts

Client k-th batches of round t come from a stream keyed by (client, round, k),
and results are reassembled by client index, so a run is bit-identical whether
clients execute serially or on a thread pool. Nothing inside a round is
shared between clients: each one owns its optimizer state.

Step size decays once per communication round, `eta_t = eta0 * decay^t`, also
when a round performs several gossip steps.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from app import error, logging, metrics, objective, optimizer, partition, rng, topology
from app.models import (
    Algorithm,
    FedConfig,
    InitMode,
    MetricRecord,
    ModelSpec,
    OptimizerKind,
    TopologyKind,
)

PROBE_BATCH_SIZE: int = 256

logger = logging.get_logger()


@dataclass(frozen=True)
class AlgorithmTools:
    optimizer: OptimizerKind
    decentralized: bool
    # one local SGD step and one gossip step per round, whatever K and Q say
    single_step: bool = False


# Mapping from algorithm to its local optimizer and aggregation
MAPPINGS_ALGORITHM: dict[Algorithm, AlgorithmTools] = {
    Algorithm.DFEDSAM: AlgorithmTools(OptimizerKind.SAM, decentralized=True),
    Algorithm.DFEDSAM_MGS: AlgorithmTools(OptimizerKind.SAM, decentralized=True),
    Algorithm.DPSGD: AlgorithmTools(OptimizerKind.SGD, decentralized=True, single_step=True),
    Algorithm.DFEDAVG: AlgorithmTools(OptimizerKind.SGD, decentralized=True),
    Algorithm.DFEDAVGM: AlgorithmTools(OptimizerKind.MOMENTUM, decentralized=True),
    Algorithm.FEDAVG: AlgorithmTools(OptimizerKind.SGD, decentralized=False),
    Algorithm.FEDSAM: AlgorithmTools(OptimizerKind.SAM, decentralized=False),
}


@dataclass
class ClientState:
    x: np.ndarray
    opt: optimizer.OptState
    shard: partition.ClientShard


@dataclass(frozen=True, eq=False)
class RoundSnapshot:
    t: int
    X: np.ndarray
    record: MetricRecord | None


# =========================================================================== #
#                                  PRIMITIVES                                 #
# =========================================================================== #


def local_update(
    spec: ModelSpec,
    state: ClientState,
    K: int,
    batches: Iterator[objective.Batch],
    round: int | None = None,
) -> np.ndarray:
    """Runs K optimizer steps from `state.x` and returns `z = y^K`. `state.x`
    is left untouched, `state.opt` keeps the updated optimizer state.
    """
    if K < 1:
        raise error.ErrorInput(f"local update needs K >= 1, got {K}")

    y = state.x.copy()
    opt = state.opt
    try:
        for k in range(K):
            y, opt = optimizer.step(spec, y, next(batches), opt)
            error.ensure_finite(y, "client parameters", step=k)
    except error.ErrorDivergence as e:
        raise e.with_context(client=state.shard.client_id, round=round) from e

    state.opt = opt
    return y


def gossip_round(
    X: np.ndarray, w: topology.MixingMatrix | np.ndarray, Q: int
) -> np.ndarray:
    """`W^Q X` as Q successive neighbor averages, one message exchange each"""
    if Q < 1:
        raise error.ErrorInput(f"gossip needs Q >= 1, got {Q}")

    matrix = w.w if isinstance(w, topology.MixingMatrix) else np.asarray(w)
    if X.ndim != 2 or matrix.shape != (X.shape[0], X.shape[0]):
        raise error.ErrorDimensionMismatch("gossip input", (matrix.shape[0], "p"), X.shape)

    for _ in range(Q):
        X = matrix @ X
    return X


# =========================================================================== #
#                                     RUN                                     #
# =========================================================================== #


def initial_models(config: FedConfig, x0: np.ndarray | None = None) -> np.ndarray:
    m, p = config.m, config.model.p
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape == (p,):
            return np.tile(x0, (m, 1))
        if x0.shape == (m, p):
            return x0.copy()
        raise error.ErrorDimensionMismatch("initial models", (m, p), x0.shape)

    match config.init:
        case InitMode.SHARED:
            shared = objective.init_params(config.model, rng.stream(config.seed, rng.Stream.INIT))
            return np.tile(shared, (m, 1))
        case InitMode.PER_CLIENT:
            return np.stack(
                [
                    objective.init_params(
                        config.model, rng.stream(config.seed, rng.Stream.INIT, i)
                    )
                    for i in range(m)
                ]
            )
        case InitMode.ZERO:
            return np.zeros((m, p))


def _probe_batch(ds: partition.Dataset, seed: int) -> objective.Batch:
    size = min(PROBE_BATCH_SIZE, ds.train.shape[0])
    picked = np.sort(rng.stream(seed, rng.Stream.PROBE).choice(ds.train, size, replace=False))
    return ds.batch(picked, center=ds.features[ds.train].mean(axis=0))


class _Gossip:
    """Gossip matrices of one run. Static kinds build theirs once, time-varying
    graphs are rebuilt from (seed, graph index).
    """

    def __init__(self, config: FedConfig):
        self.spec = config.topology
        self.fresh_per_step = config.mgs_fresh_graph
        self.static = None
        if self.spec.kind != TopologyKind.TIME_VARYING_K:
            self.static = topology.mixing_matrix(topology.build_graph(self.spec))

    def matrix(self, index: int) -> topology.MixingMatrix:
        if self.static is not None:
            return self.static
        return topology.mixing_matrix(topology.build_graph(self.spec, index))

    def mix(self, Z: np.ndarray, round: int, Q: int) -> tuple[np.ndarray, int]:
        """Mixed models and the number of model transmissions spent"""
        if self.static is None and self.fresh_per_step:
            exchanges = 0
            for q in range(Q):
                w = self.matrix(round * Q + q)
                Z = gossip_round(Z, w, 1)
                exchanges += 2 * len(w.graph.edges)
            return Z, exchanges

        w = self.matrix(round)
        return gossip_round(Z, w, Q), 2 * len(w.graph.edges) * Q


def run(
    config: FedConfig,
    *,
    dataset: partition.Dataset | None = None,
    shards: list[partition.ClientShard] | None = None,
    x0: np.ndarray | None = None,
    workers: int = 1,
    metric_every: int = 10,
    on_round: Callable[[MetricRecord], None] | None = None,
) -> metrics.RunHistory:
    """Executes `config.T` rounds of `config.algorithm`.

    `dataset`, `shards` and `x0` replace the generated data, partition and
    initial models (hand-built fixtures use them). `on_round` receives each
    record as soon as it is measured.
    """
    tools = MAPPINGS_ALGORITHM[config.algorithm]
    spec = config.model

    ds = dataset if dataset is not None else partition.dataset_from_spec(config.data)
    if shards is None:
        shards = partition.partition(ds, config.partition)
    if len(shards) != config.m:
        raise error.ErrorDimensionMismatch("client shards", config.m, len(shards))

    K, Q = (1, 1) if tools.single_step else (config.K, config.Q)
    if tools.single_step and (config.K, config.Q) != (1, 1):
        logger.info(f"Run - {config.algorithm.value} takes one SGD step and one gossip per round")

    X = initial_models(config, x0)
    clients = [
        ClientState(
            x=X[i].copy(),
            opt=optimizer.OptState(
                kind=tools.optimizer, eta=config.eta0, rho=config.rho, mu=config.mu
            ),
            shard=shard,
        )
        for i, shard in enumerate(shards)
    ]

    shard_batches = [partition.shard_batch(ds, shard) for shard in shards]
    train_batch = ds.train_batch()
    test_batch = ds.test_batch() if ds.test.shape[0] > 0 else None
    probe = _probe_batch(ds, config.seed)

    gossip = _Gossip(config) if tools.decentralized else None
    global_x = X.mean(axis=0)
    sampled = max(1, math.ceil(config.sample_frac * config.m))

    history = metrics.RunHistory(algorithm=config.algorithm, seed=config.seed)
    snapshot = RoundSnapshot(t=0, X=X.copy(), record=None)
    comm = 0

    def update(i: int, round: int) -> np.ndarray:
        client = clients[i]
        if config.pure_gossip:
            return client.x.copy()
        batches = partition.gen_batches(ds, client.shard, config.batch_size, round)
        return local_update(spec, client, K, batches, round=round + 1)

    logger.info(
        f"Run - {config.algorithm.value} - START - m={config.m} T={config.T} K={K} Q={Q} "
        f"topology={config.topology.kind.value} seed={config.seed}"
    )

    with ThreadPoolExecutor(max_workers=workers) as executor:
        for r in range(config.T):
            t = r + 1
            eta = config.eta(r)
            for client in clients:
                client.opt = client.opt.with_eta(eta)

            try:
                if tools.decentralized:
                    Z = np.stack(list(executor.map(lambda i: update(i, r), range(config.m))))
                    X, exchanges = gossip.mix(Z, r, Q)
                    x_eval = X.mean(axis=0)
                else:
                    draw = rng.stream(config.seed, rng.Stream.SAMPLING, r)
                    chosen = np.sort(draw.choice(config.m, size=sampled, replace=False))
                    for i in chosen:
                        clients[i].x = global_x.copy()

                    Z = np.stack(list(executor.map(lambda i: update(int(i), r), chosen)))
                    average = Z.mean(axis=0)
                    if config.server_lr == 1.0:
                        global_x = average
                    else:
                        global_x = global_x + config.server_lr * (average - global_x)
                    X = np.tile(global_x, (config.m, 1))
                    x_eval = global_x
                    exchanges = 2 * len(chosen)

                error.ensure_finite(X, "aggregated parameters")
            except error.ErrorDivergence as e:
                diverged = e if e.round is not None else e.with_context(round=t)
                diverged.snapshot = snapshot
                diverged.history = history
                logger.warning(f"Run - {config.algorithm.value} - DIVERGED - {diverged.detail}")
                raise diverged

            for i, client in enumerate(clients):
                client.x = X[i].copy()
            comm += exchanges

            hessian = None
            if t % metric_every == 0:
                hessian = objective.largest_hessian_eig(spec, x_eval, probe).value

            record = metrics.measure(
                spec,
                X,
                x_eval,
                shard_batches,
                train_batch,
                test_batch,
                t=t,
                eta_t=eta,
                hessian_eig=hessian,
                comm_exchanges=comm,
            )
            history.records.append(record)
            snapshot = RoundSnapshot(t=t, X=X.copy(), record=record)
            if on_round is not None:
                on_round(record)

            if t % metric_every == 0:
                logger.info(
                    f"Run - {config.algorithm.value} - ROUND {t} - train_loss="
                    f"{record.train_loss:.6g} test_acc={record.test_acc:.4f} "
                    f"consensus={record.consensus_dist:.3e}"
                )

    history.models = X
    logger.info(f"Run - {config.algorithm.value} - DONE - {config.T} rounds")
    return history
