from typing import Any

import fastapi
import numpy as np
import pydantic


class ErrorMessage(pydantic.BaseModel):
    detail: str


class ErrorSimulation(Exception):
    """Base class for every failure the simulator reports on purpose. Each error
    knows the process exit code the CLI should return and the HTTP status the
    inspection API should answer with.
    """

    exit_code: int = 1
    status_code: int = fastapi.status.HTTP_500_INTERNAL_SERVER_ERROR

    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


# =========================================================================== #
#                                CONFIGURATION                                #
# =========================================================================== #


class ErrorConfig(ErrorSimulation):
    exit_code = 2
    status_code = fastapi.status.HTTP_422_UNPROCESSABLE_ENTITY


class ErrorConfigSchema(ErrorConfig):
    def __init__(self, violations: list[tuple[str, str]]) -> None:
        self.violations = violations
        lines = [f"  {path or '<root>'}: {msg}" for path, msg in violations]
        super().__init__("invalid configuration:\n" + "\n".join(lines))


class ErrorTopologySpec(ErrorConfig):
    def __init__(self, constraint: str) -> None:
        super().__init__(f"invalid topology, {constraint}")


class ErrorDisconnectedGraph(ErrorConfig):
    def __init__(self, m: int, components: int) -> None:
        super().__init__(
            f"graph over {m} clients has {components} connected components, gossip "
            "requires a connected graph (eigenvalue 1 of W would not be simple)"
        )


class ErrorPartitionSpec(ErrorConfig):
    def __init__(self, constraint: str) -> None:
        super().__init__(f"invalid partition, {constraint}")


class ErrorPartitionExhausted(ErrorConfig):
    def __init__(self, kind: str, attempts: int) -> None:
        super().__init__(
            f"{kind} partition left a client without data after {attempts} attempts, "
            "use a larger dataset (n) or a larger alpha"
        )


class ErrorStepSize(ErrorConfig):
    status_code = fastapi.status.HTTP_412_PRECONDITION_FAILED

    def __init__(self, denominator: float, eta: float, eta_max: float) -> None:
        super().__init__(
            f"step size too large for the convergence bound: eta*K - 32 eta^3 K^2 L^2 "
            f"- 6 eta^2 K L = {denominator:.6g} <= 0 (eta = {eta:.6g}, the bound assumes "
            f"eta <= 1/(10KL) = {eta_max:.6g})"
        )


class ErrorOutputExists(ErrorConfig):
    status_code = fastapi.status.HTTP_409_CONFLICT

    def __init__(self, path: str) -> None:
        super().__init__(f"output directory {path} already holds a run, pass --force to overwrite")


# =========================================================================== #
#                                    INPUTS                                   #
# =========================================================================== #


class ErrorInput(ErrorSimulation):
    exit_code = 2
    status_code = fastapi.status.HTTP_400_BAD_REQUEST


class ErrorDimensionMismatch(ErrorInput):
    def __init__(self, what: str, expected: int | tuple, got: int | tuple) -> None:
        super().__init__(f"dimension mismatch for {what}: expected {expected}, got {got}")


class ErrorZeroDirection(ErrorInput):
    def __init__(self) -> None:
        super().__init__("Hessian-vector product requires a non-zero direction")


class ErrorEmptySlice(ErrorInput):
    def __init__(self, what: str) -> None:
        super().__init__(f"cannot evaluate on an empty {what}")


class ErrorNotClassifier(ErrorInput):
    def __init__(self, kind: str) -> None:
        super().__init__(f"accuracy is undefined for the {kind} model family")


class ErrorRunNotFound(ErrorInput):
    status_code = fastapi.status.HTTP_404_NOT_FOUND

    def __init__(self, run: str) -> None:
        super().__init__(f"no run named '{run}' under the output root")


# =========================================================================== #
#                                   RUNTIME                                   #
# =========================================================================== #


class ErrorDivergence(ErrorSimulation):
    """Non-finite values during training. `fedalgo.run` attaches the last
    finite round snapshot and the history recorded so far before re-raising.
    """

    exit_code = 3
    snapshot: Any = None
    history: Any = None

    def __init__(
        self,
        what: str,
        client: int | None = None,
        round: int | None = None,
        step: int | None = None,
    ) -> None:
        self.what = what
        self.client = client
        self.round = round
        self.step = step

        where = [
            f"{name} {value}"
            for name, value in (("client", client), ("round", round), ("step", step))
            if value is not None
        ]
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"non-finite values in {what}{suffix}")

    def with_context(
        self, client: int | None = None, round: int | None = None
    ) -> "ErrorDivergence":
        return ErrorDivergence(
            self.what,
            client=self.client if client is None else client,
            round=self.round if round is None else round,
            step=self.step,
        )


class ErrorSweep(ErrorSimulation):
    exit_code = 4

    def __init__(self, failed: int, total: int) -> None:
        super().__init__(f"{failed} of {total} sweep runs failed")


def ensure_finite(x: np.ndarray, what: str, step: int | None = None):
    if not np.all(np.isfinite(x)):
        raise ErrorDivergence(what, step=step)


def ensure_length(x: np.ndarray, p: int, what: str):
    if x.ndim != 1 or x.shape[0] != p:
        raise ErrorDimensionMismatch(what, p, x.shape)
