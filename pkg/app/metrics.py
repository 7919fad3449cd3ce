"""
# Metrics

Quantities measured on a run and the theory-side calculators.

Measured every round:

- consensus distance `(1/m) sum_i ||x_i - x_bar||^2`
- squared norm of the global gradient at the averaged model
- losses and accuracies at the averaged (or broadcast) model

Calculators:

- `phi(lambda, m, Q)`, the topology factor of the convergence bound
- `bound_terms` / `convergence_bound`, the bound on `min_t E||grad f(x_bar^t)||^2`.
  It only holds under the smoothness and bounded-variance assumptions, and the
  assumption constants fed to it are user-supplied or probe estimates, so it
  is a diagnostic, never a guarantee for a given run.
- probe estimators for the assumption constants `L`, `sigma_l` and `sigma_g`
"""

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas

from app import error, logging, objective, partition, rng
from app.models import Algorithm, BoundInputs, BoundTerms, MetricRecord, ModelKind, ModelSpec

CSV_COLUMNS: list[str] = list(MetricRecord.model_fields)
CSV_FLOAT_FORMAT: str = "%.17g"
RATE_FIT_MIN_POINTS: int = 20

logger = logging.get_logger()


@dataclass
class RunHistory:
    algorithm: Algorithm
    seed: int
    records: list[MetricRecord] = field(default_factory=list)
    models: np.ndarray | None = None

    def to_frame(self) -> pandas.DataFrame:
        return records_frame(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(record, name) for record in self.records], dtype=np.float64)


def records_frame(records: Sequence[MetricRecord]) -> pandas.DataFrame:
    frame = pandas.DataFrame([record.model_dump() for record in records], columns=CSV_COLUMNS)
    return frame.astype({"t": "int64", "comm_exchanges": "int64"})


# =========================================================================== #
#                                   MEASURED                                  #
# =========================================================================== #


def consensus_distance(X: np.ndarray) -> float:
    if X.ndim != 2 or X.shape[0] == 0:
        raise error.ErrorDimensionMismatch("client parameter matrix", "(m >= 1, p)", X.shape)
    deviation = X - X.mean(axis=0)
    return float(np.sum(deviation * deviation) / X.shape[0])


def avg_model_grad_norm_sq(
    spec: ModelSpec, X: np.ndarray, batches: Sequence[objective.Batch]
) -> float:
    """`||(1/m) sum_i grad f_i(x_bar)||^2` with full-shard batches"""
    x_bar = X.mean(axis=0)
    grad = np.mean([objective.gradient(spec, x_bar, batch) for batch in batches], axis=0)
    return float(grad @ grad)


def generalization_gap(train_acc: float, test_acc: float) -> float:
    for name, value in (("train_acc", train_acc), ("test_acc", test_acc)):
        if not 0.0 <= value <= 1.0:
            raise error.ErrorInput(f"{name} must lie in [0, 1], got {value}")
    return train_acc - test_acc


def measure(
    spec: ModelSpec,
    X: np.ndarray,
    x_eval: np.ndarray,
    shard_batches: Sequence[objective.Batch],
    train_batch: objective.Batch,
    test_batch: objective.Batch | None,
    t: int,
    eta_t: float,
    hessian_eig: float | None = None,
    comm_exchanges: int = 0,
) -> MetricRecord:
    """One round's record. Losses and accuracies are taken at `x_eval`, the
    averaged model for gossip runs and the broadcast model for server runs.
    """
    train_loss = float(np.mean([objective.loss(spec, x_eval, batch) for batch in shard_batches]))
    test_loss = math.nan if test_batch is None else objective.loss(spec, x_eval, test_batch)

    train_acc = test_acc = math.nan
    if spec.kind != ModelKind.QUADRATIC:
        train_acc = objective.accuracy(spec, x_eval, train_batch)
        if test_batch is not None:
            test_acc = objective.accuracy(spec, x_eval, test_batch)

    return MetricRecord(
        t=t,
        train_loss=train_loss,
        test_loss=test_loss,
        train_acc=train_acc,
        test_acc=test_acc,
        consensus_dist=consensus_distance(X),
        grad_norm_sq=avg_model_grad_norm_sq(spec, X, shard_batches),
        eta_t=eta_t,
        hessian_eig=hessian_eig,
        comm_exchanges=comm_exchanges,
    )


# =========================================================================== #
#                                    THEORY                                   #
# =========================================================================== #


def phi(lam: float, m: int, Q: int) -> float:
    if not 0.0 <= lam < 1.0:
        raise error.ErrorInput(f"phi needs lambda in [0, 1), got {lam}")
    if m < 2 or Q < 1:
        raise error.ErrorInput(f"phi needs m >= 2 and Q >= 1, got m = {m}, Q = {Q}")

    lam_q = lam**Q
    topology = (lam_q + 1.0) / ((1.0 - lam) ** 2 * float(m) ** (2 * (Q - 1)))
    return topology + (lam_q + 1.0) / (1.0 - lam_q) ** 2


def bound_terms(b: BoundInputs) -> BoundTerms:
    eta, K, L, rho, T = b.eta, b.K, b.L, b.rho, b.T
    sigma_l2 = b.sigma_l**2
    sigma_g2 = b.sigma_g_effective**2

    denominator = eta * K - 32.0 * eta**3 * K**2 * L**2 - 6.0 * eta**2 * K * L
    if denominator <= 0.0:
        raise error.ErrorStepSize(denominator, eta, b.eta_max)

    flagged = eta > b.eta_max
    if flagged:
        logger.warning(
            f"Bound - eta = {eta:.6g} exceeds 1/(10KL) = {b.eta_max:.6g}, the bound's "
            "step-size condition does not hold"
        )

    spread = 2 * K - 1
    noise = L**2 * rho**2 + sigma_g2 + sigma_l2

    first_term = 2.0 * b.f_gap / (T * denominator)

    drift_alpha = (
        4.0 * K**3 * L**2 * eta**2 * rho**4 / spread + 8.0 * K * eta**2 * noise + rho**2 / spread
    )
    alpha = (eta * K * L / (2.0 * denominator)) * (
        2.0 * K * L * drift_alpha + eta * (L**2 * rho**2 + sigma_l2)
    )

    drift_beta = 4.0 * K**3 * L**2 * rho**4 / spread + 8.0 * K * noise
    beta = (eta**4 * K * L**3 * (16.0 * eta * K * L + 3.0) / denominator) * (
        2.0 * K * drift_beta + 2.0 * K * rho**2 / (eta**2 * spread)
    )
    factor = phi(b.lam, b.m, b.Q)

    return BoundTerms(
        first_term=first_term,
        alpha=alpha,
        beta=beta,
        phi=factor,
        total=first_term + alpha + factor * beta,
        eta_max=b.eta_max,
        eta_flagged=flagged,
    )


def convergence_bound(b: BoundInputs) -> float:
    return bound_terms(b).total


def rate_fit(history: RunHistory | Sequence[MetricRecord], burn_in: int = 0) -> float:
    """Least-squares slope of log(running-min grad_norm_sq) against log t over
    the rounds after `burn_in`. Reported as a diagnostic, never asserted.
    """
    records = history.records if isinstance(history, RunHistory) else history
    kept = [record for record in records if record.t > burn_in]
    if len(kept) < RATE_FIT_MIN_POINTS:
        raise error.ErrorInput(
            f"rate fit needs {RATE_FIT_MIN_POINTS} rounds after burn-in, got {len(kept)}"
        )

    t = np.array([record.t for record in kept], dtype=np.float64)
    running_min = np.minimum.accumulate([record.grad_norm_sq for record in kept])
    running_min = np.maximum(running_min, np.finfo(np.float64).tiny)
    slope, _ = np.polyfit(np.log(t), np.log(running_min), 1)
    return float(slope)


# =========================================================================== #
#                                  ESTIMATORS                                 #
# =========================================================================== #


def _client_gradients(
    spec: ModelSpec, batches: Sequence[objective.Batch], probe: np.ndarray
) -> np.ndarray:
    return np.stack([objective.gradient(spec, probe, batch) for batch in batches])


def estimate_smoothness(
    spec: ModelSpec,
    ds: partition.Dataset,
    shards: Sequence[partition.ClientShard],
    probes: Sequence[np.ndarray],
    max_iters: int = objective.MAX_ITERS_POWER,
) -> float:
    """Probe lower bound on `L`: the largest Hessian spectral norm over clients
    and probe points"""
    if not probes:
        raise error.ErrorInput("estimate_smoothness needs at least one probe point")

    batches = [partition.shard_batch(ds, shard) for shard in shards]
    return max(
        objective.hessian_spectral_norm(spec, probe, batch, max_iters=max_iters)
        for probe in probes
        for batch in batches
    )


def estimate_sigma_l(
    spec: ModelSpec,
    ds: partition.Dataset,
    shards: Sequence[partition.ClientShard],
    probes: Sequence[np.ndarray],
    batch_size: int,
    draws: int = 16,
    seed: int = 0,
) -> float:
    """Local gradient noise: the square root of the largest (over clients and
    probes) mean squared deviation of minibatch gradients from the full-shard
    gradient
    """
    if not probes or draws < 1:
        raise error.ErrorInput("estimate_sigma_l needs probe points and draws >= 1")

    worst = 0.0
    for p, probe in enumerate(probes):
        for shard in shards:
            full = objective.gradient(spec, probe, partition.shard_batch(ds, shard))
            center = ds.features[shard.indices].mean(axis=0)
            size = min(batch_size, shard.size)

            spread = 0.0
            for draw_index in range(draws):
                draw = rng.stream(seed, rng.Stream.VARIANCE, shard.client_id, p, draw_index)
                picked = draw.choice(shard.indices, size=size, replace=False)
                diff = objective.gradient(spec, probe, ds.batch(picked, center=center)) - full
                spread += float(diff @ diff)
            worst = max(worst, spread / draws)
    return math.sqrt(worst)


def estimate_sigma_g(
    spec: ModelSpec,
    ds: partition.Dataset,
    shards: Sequence[partition.ClientShard],
    probes: Sequence[np.ndarray],
) -> float:
    """Global dissimilarity `sqrt((1/m) sum_i ||grad f_i - grad f||^2)`, maximised
    over probes. Never exceeds the `estimate_beta` value on the same probes.
    """
    if not probes:
        raise error.ErrorInput("estimate_sigma_g needs at least one probe point")

    batches = [partition.shard_batch(ds, shard) for shard in shards]
    sigma = 0.0
    for probe in probes:
        grads = _client_gradients(spec, batches, probe)
        deviation = grads - grads.mean(axis=0)
        sigma = max(sigma, math.sqrt(float(np.sum(deviation * deviation)) / len(batches)))
    return sigma
