"""
# Optimizer

Local update rules run by every client between two communication rounds.

- `sgd_step`: one gradient evaluation, `theta - eta * g`.
- `sam_step`: ascend to `theta + delta` with `delta = rho * g / ||g||`, then
  descend with the gradient found there. Both evaluations share one batch.
- `momentum_step`: heavy-ball, `v' = mu * v + g`, `theta' = theta - eta * v'`.

Weight decay lives in the objective, so SAM perturbs the regularized loss.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from app import error, objective
from app.models import ModelSpec, OptimizerKind

# below this norm the ascent direction is undefined and SAM falls back to SGD
ZERO_GRADIENT: float = 1e-12


@dataclass(frozen=True, eq=False)
class OptState:
    kind: OptimizerKind
    eta: float
    rho: float = 0.0
    mu: float = 0.0
    velocity: np.ndarray | None = field(default=None)

    def with_eta(self, eta: float) -> "OptState":
        return replace(self, eta=eta)


def perturbation(g: np.ndarray, rho: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if rho == 0.0 or norm < ZERO_GRADIENT:
        return np.zeros_like(g)
    return (rho / norm) * g


def sgd_step(
    spec: ModelSpec, theta: np.ndarray, batch: objective.Batch, st: OptState
) -> np.ndarray:
    g = objective.gradient(spec, theta, batch)
    error.ensure_finite(g, "gradient")
    return theta - st.eta * g


def sam_step(
    spec: ModelSpec, theta: np.ndarray, batch: objective.Batch, st: OptState
) -> np.ndarray:
    if st.kind != OptimizerKind.SAM:
        raise error.ErrorInput(f"sam_step needs a sam optimizer state, got {st.kind.value}")

    g = objective.gradient(spec, theta, batch)
    error.ensure_finite(g, "gradient")
    delta = perturbation(g, st.rho)

    g_sharp = objective.gradient(spec, theta + delta, batch)
    error.ensure_finite(g_sharp, "perturbed gradient")
    return theta - st.eta * g_sharp


def momentum_step(
    spec: ModelSpec, theta: np.ndarray, batch: objective.Batch, st: OptState
) -> tuple[np.ndarray, OptState]:
    if st.kind != OptimizerKind.MOMENTUM:
        raise error.ErrorInput(
            f"momentum_step needs a momentum optimizer state, got {st.kind.value}"
        )

    g = objective.gradient(spec, theta, batch)
    error.ensure_finite(g, "gradient")
    velocity = g if st.velocity is None else st.mu * st.velocity + g
    return theta - st.eta * velocity, replace(st, velocity=velocity)


def step(
    spec: ModelSpec, theta: np.ndarray, batch: objective.Batch, st: OptState
) -> tuple[np.ndarray, OptState]:
    """Dispatch on `st.kind`, always returning the (possibly unchanged) state"""
    match st.kind:
        case OptimizerKind.SGD:
            return sgd_step(spec, theta, batch, st), st
        case OptimizerKind.SAM:
            return sam_step(spec, theta, batch, st), st
        case OptimizerKind.MOMENTUM:
            return momentum_step(spec, theta, batch, st)
