"""
# Objective

Desk-scale model families with hand-derived gradients and Hessian-vector
products. Parameters always travel as one flat `float64` vector of length
`spec.p`; each family unpacks it into views.

Layouts:

- `quadratic`: theta (d). The loss is `1/2 sum_j h_j (theta_j - c_j)^2` around the
  shard center `c`, batch features are ignored.
- `logistic`: W (d x C, row-major), b (C).
- `mlp`: W1 (d x h), b1 (h), W2 (h x C), b2 (C), one tanh hidden layer.

Every family adds `(l2 / 2) ||theta||^2` to the mean batch loss.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.special

from app import error, rng
from app.models import ModelKind, ModelSpec

TOLERANCE_POWER: float = 1e-10
MAX_ITERS_POWER: int = 200


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    center: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class EigenEstimate:
    value: float
    iterations: int
    converged: bool
    trace: list[float] = field(default_factory=list)


def _check(spec: ModelSpec, theta: np.ndarray, batch: Batch):
    error.ensure_length(theta, spec.p, "parameters")
    if batch.size == 0:
        raise error.ErrorEmptySlice("batch")
    if spec.kind == ModelKind.QUADRATIC:
        if batch.center is None:
            raise error.ErrorInput("quadratic objective needs the shard center on the batch")
        error.ensure_length(batch.center, spec.d, "shard center")
    elif batch.features.ndim != 2 or batch.features.shape[1] != spec.d:
        raise error.ErrorDimensionMismatch(
            "batch features", (batch.size, spec.d), batch.features.shape
        )


def _unpack(spec: ModelSpec, theta: np.ndarray) -> tuple[np.ndarray, ...]:
    d, h, c = spec.d, spec.hidden, spec.classes
    match spec.kind:
        case ModelKind.QUADRATIC:
            return (theta,)
        case ModelKind.LOGISTIC:
            return theta[: d * c].reshape(d, c), theta[d * c :]
        case ModelKind.MLP:
            i1 = d * h
            i2 = i1 + h
            i3 = i2 + h * c
            return (
                theta[:i1].reshape(d, h),
                theta[i1:i2],
                theta[i2:i3].reshape(h, c),
                theta[i3:],
            )


def _pack(*parts: np.ndarray) -> np.ndarray:
    return np.concatenate([part.ravel() for part in parts])


def _curvature(spec: ModelSpec) -> np.ndarray:
    if spec.curvature is None:
        return np.ones(spec.d)
    return np.asarray(spec.curvature, dtype=np.float64)


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes)[labels]


def logits(spec: ModelSpec, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
    match spec.kind:
        case ModelKind.LOGISTIC:
            w, b = _unpack(spec, theta)
            return features @ w + b
        case ModelKind.MLP:
            w1, b1, w2, b2 = _unpack(spec, theta)
            return np.tanh(features @ w1 + b1) @ w2 + b2
        case _:
            raise error.ErrorNotClassifier(spec.kind.value)


# =========================================================================== #
#                                LOSS AND DERIVATIVES                         #
# =========================================================================== #


def loss(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> float:
    _check(spec, theta, batch)
    penalty = 0.5 * spec.l2 * float(theta @ theta)

    if spec.kind == ModelKind.QUADRATIC:
        diff = theta - batch.center
        return 0.5 * float(diff @ (_curvature(spec) * diff)) + penalty

    z = logits(spec, theta, batch.features)
    picked = z[np.arange(batch.size), batch.labels]
    return float(np.mean(scipy.special.logsumexp(z, axis=1) - picked)) + penalty


def gradient(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> np.ndarray:
    _check(spec, theta, batch)
    penalty = spec.l2 * theta

    match spec.kind:
        case ModelKind.QUADRATIC:
            return _curvature(spec) * (theta - batch.center) + penalty

        case ModelKind.LOGISTIC:
            w, b = _unpack(spec, theta)
            x = batch.features
            residual = scipy.special.softmax(x @ w + b, axis=1)
            residual -= _one_hot(batch.labels, spec.classes)
            residual /= batch.size
            return _pack(x.T @ residual, residual.sum(axis=0)) + penalty

        case ModelKind.MLP:
            w1, b1, w2, b2 = _unpack(spec, theta)
            x = batch.features
            hidden = np.tanh(x @ w1 + b1)
            residual = scipy.special.softmax(hidden @ w2 + b2, axis=1)
            residual -= _one_hot(batch.labels, spec.classes)
            residual /= batch.size

            d_hidden = (residual @ w2.T) * (1.0 - hidden**2)
            grads = (x.T @ d_hidden, d_hidden.sum(axis=0), hidden.T @ residual, residual.sum(0))
            return _pack(*grads) + penalty


def _softmax_jvp(probs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    return probs * (direction - np.sum(probs * direction, axis=1, keepdims=True))


def hvp(spec: ModelSpec, theta: np.ndarray, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product. The mlp product is the directional
    derivative of the backward pass along `v` (R-operator).
    """
    _check(spec, theta, batch)
    error.ensure_length(v, spec.p, "direction")
    if not np.any(v):
        raise error.ErrorZeroDirection()
    penalty = spec.l2 * v

    match spec.kind:
        case ModelKind.QUADRATIC:
            return _curvature(spec) * v + penalty

        case ModelKind.LOGISTIC:
            w, b = _unpack(spec, theta)
            vw, vb = _unpack(spec, v)
            x = batch.features
            probs = scipy.special.softmax(x @ w + b, axis=1)
            r_residual = _softmax_jvp(probs, x @ vw + vb) / batch.size
            return _pack(x.T @ r_residual, r_residual.sum(axis=0)) + penalty

        case ModelKind.MLP:
            w1, b1, w2, b2 = _unpack(spec, theta)
            v1, c1, v2, c2 = _unpack(spec, v)
            x = batch.features

            hidden = np.tanh(x @ w1 + b1)
            slope = 1.0 - hidden**2
            probs = scipy.special.softmax(hidden @ w2 + b2, axis=1)
            residual = (probs - _one_hot(batch.labels, spec.classes)) / batch.size

            r_hidden = slope * (x @ v1 + c1)
            r_logits = r_hidden @ w2 + hidden @ v2 + c2
            r_residual = _softmax_jvp(probs, r_logits) / batch.size

            d_hidden = residual @ w2.T
            r_d_hidden = r_residual @ w2.T + residual @ v2.T
            r_d_pre = r_d_hidden * slope - 2.0 * d_hidden * hidden * r_hidden

            return (
                _pack(
                    x.T @ r_d_pre,
                    r_d_pre.sum(axis=0),
                    r_hidden.T @ residual + hidden.T @ r_residual,
                    r_residual.sum(axis=0),
                )
                + penalty
            )


def _power_iteration(
    apply: Callable[[np.ndarray], np.ndarray], p: int, max_iters: int, tol: float, seed: int
) -> EigenEstimate:
    v = rng.stream(seed, rng.Stream.POWER_ITERATION).standard_normal(p)
    v /= np.linalg.norm(v)

    trace: list[float] = []
    for iteration in range(1, max_iters + 1):
        hv = apply(v)
        quotient = float(v @ hv)
        trace.append(quotient)

        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return EigenEstimate(0.0, iteration, True, trace)
        v = hv / norm

        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(quotient)):
            return EigenEstimate(quotient, iteration, True, trace)

    return EigenEstimate(trace[-1], max_iters, False, trace)


def largest_hessian_eig(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    max_iters: int = MAX_ITERS_POWER,
    tol: float = TOLERANCE_POWER,
    seed: int = 0,
) -> EigenEstimate:
    """Power iteration on `hvp` from a fixed-seed start vector, stopping once
    successive Rayleigh quotients differ by at most `tol` (relative to
    max(1, |value|)).

    Plain power iteration finds the eigenvalue of largest magnitude. When that
    one is negative (an mlp saddle), a second pass runs on `H - mu I`, whose
    spectrum is shifted to be non-negative, and the top eigenvalue is read back
    as `mu` plus its result. `iterations` and `trace` then cover both passes.
    """
    if max_iters < 1:
        raise error.ErrorInput(f"power iteration needs max_iters >= 1, got {max_iters}")

    first = _power_iteration(lambda v: hvp(spec, theta, batch, v), spec.p, max_iters, tol, seed)
    if first.value >= 0.0:
        return first

    shift = first.value
    second = _power_iteration(
        lambda v: hvp(spec, theta, batch, v) - shift * v, spec.p, max_iters, tol, seed
    )
    return EigenEstimate(
        value=second.value + shift,
        iterations=first.iterations + second.iterations,
        converged=first.converged and second.converged,
        trace=first.trace + [quotient + shift for quotient in second.trace],
    )


def hessian_spectral_norm(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    max_iters: int = MAX_ITERS_POWER,
    tol: float = TOLERANCE_POWER,
    seed: int = 0,
) -> float:
    """Largest |eigenvalue| of the Hessian, the local smoothness constant"""
    if max_iters < 1:
        raise error.ErrorInput(f"power iteration needs max_iters >= 1, got {max_iters}")
    estimate = _power_iteration(lambda v: hvp(spec, theta, batch, v), spec.p, max_iters, tol, seed)
    return abs(estimate.value)


def accuracy(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> float:
    if spec.kind == ModelKind.QUADRATIC:
        raise error.ErrorNotClassifier(spec.kind.value)
    _check(spec, theta, batch)

    # argmax returns the first maximum, ties go to the lowest class index
    predictions = np.argmax(logits(spec, theta, batch.features), axis=1)
    return float(np.mean(predictions == batch.labels))


def init_params(spec: ModelSpec, draw: np.random.Generator) -> np.ndarray:
    """Random parameters with fan-in scaled weights and zero biases"""
    d, h, c = spec.d, spec.hidden, spec.classes
    match spec.kind:
        case ModelKind.QUADRATIC:
            return draw.standard_normal(d)
        case ModelKind.LOGISTIC:
            return _pack(draw.standard_normal((d, c)) / np.sqrt(d), np.zeros(c))
        case ModelKind.MLP:
            return _pack(
                draw.standard_normal((d, h)) / np.sqrt(d),
                np.zeros(h),
                draw.standard_normal((h, c)) / np.sqrt(h),
                np.zeros(c),
            )
