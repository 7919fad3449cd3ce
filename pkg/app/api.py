import math
from enum import Enum
from typing import Any

import fastapi
import pandas
from fastapi.responses import JSONResponse

from app import error, harness, logging, metrics, models, topology

ERROR_CODES: dict[int, dict[str, Any]] = {
    fastapi.status.HTTP_400_BAD_REQUEST: {
        "description": "Invalid numerical input",
        "model": error.ErrorMessage,
    },
    fastapi.status.HTTP_404_NOT_FOUND: {
        "description": "The run could not be found under the output root",
        "model": error.ErrorMessage,
    },
    fastapi.status.HTTP_412_PRECONDITION_FAILED: {
        "description": "Step size violates the convergence bound's precondition",
        "model": error.ErrorMessage,
    },
    fastapi.status.HTTP_422_UNPROCESSABLE_ENTITY: {
        "description": "Invalid topology or bound configuration",
        "model": error.ErrorMessage,
    },
}


class Tags(str, Enum):
    TOPOLOGY = "topology"
    THEORY = "theory"
    RUNS = "runs"


logger = logging.get_logger()


def _json_safe(value: Any) -> Any:
    """Strict JSON has no NaN, missing metrics become null"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(inner) for key, inner in value.items()}
    if isinstance(value, list):
        return [_json_safe(inner) for inner in value]
    return value


def _run_dir(run: str):
    out = harness.default_output_root() / run
    if not out.is_dir():
        raise error.ErrorRunNotFound(run)
    return out


# =========================================================================== #
#                                ERROR HANDLERS                               #
# =========================================================================== #

app = fastapi.FastAPI(title="dfedsim")


@app.exception_handler(error.ErrorSimulation)
async def exception_handler_simulation(request: fastapi.Request, err: error.ErrorSimulation):
    logger.warning(f"Api - {request.url.path} - {err.status_code} - {err.detail}")
    return JSONResponse(status_code=err.status_code, content={"detail": err.detail})


# =========================================================================== #
#                                   TOPOLOGY                                  #
# =========================================================================== #


@app.get(
    "/topology",
    responses={**ERROR_CODES},
    tags=[Tags.TOPOLOGY],
)
async def topology_info(
    kind: models.query.Kind,
    m: models.query.Clients,
    k: models.query.Neighbors = None,
    seed: models.query.TopologySeed = 0,
    round: models.query.Round = 0,
) -> models.TopologyInfo:
    """## Inspect a gossip matrix

    Builds the Metropolis-Hastings mixing matrix of the requested graph and
    returns its edges, second largest eigenvalue magnitude (`lambda`), spectral
    gap and the result of every gossip-matrix clause.

    `round` only matters for `time_varying_k`, where each round draws a new
    graph from `seed`.
    """
    spec = harness.validate(
        models.TopologySpec, {"kind": kind, "m": m, "k": k, "seed": seed}
    )
    return topology.topology_info(spec, round)


# =========================================================================== #
#                                    THEORY                                   #
# =========================================================================== #


@app.post("/bound", responses={**ERROR_CODES}, tags=[Tags.THEORY])
async def bound(inputs: models.BoundInputs) -> models.BoundTerms:
    """## Evaluate the convergence bound

    Returns each term of the bound on `min_t E||grad f(x_bar^t)||^2`. A step size
    above `1/(10KL)` is answered normally with `eta_flagged` set, a step size
    that makes the bound's denominator non-positive is rejected.
    """
    return metrics.bound_terms(inputs)


# =========================================================================== #
#                                     RUNS                                    #
# =========================================================================== #


@app.get("/runs", tags=[Tags.RUNS])
async def runs() -> list[str]:
    """## List finished runs under the output root"""
    root = harness.default_output_root()
    if not root.is_dir():
        return []
    return sorted(
        path.name for path in root.iterdir() if (path / harness.FILE_SUMMARY).is_file()
    )


@app.get("/runs/{run}/metrics", responses={**ERROR_CODES}, tags=[Tags.RUNS])
async def run_metrics(run: models.query.RunName) -> list[dict[str, float | int | None]]:
    """## Retrieve a run's per-round metrics

    Rows of `metrics.csv` in round order. Metrics that were not measured (the
    accuracies of the quadratic family, the Hessian eigenvalue between probe
    rounds) are `null`.
    """
    path = _run_dir(run) / harness.FILE_METRICS
    if not path.is_file():
        raise error.ErrorRunNotFound(run)

    frame = pandas.read_csv(path)
    return _json_safe(frame.to_dict(orient="records"))


@app.get("/runs/{run}/summary", responses={**ERROR_CODES}, tags=[Tags.RUNS])
async def run_summary(run: models.query.RunName) -> dict[str, Any]:
    path = _run_dir(run) / harness.FILE_SUMMARY
    if not path.is_file():
        raise error.ErrorRunNotFound(run)

    summary = models.RunSummary.model_validate_json(path.read_text())
    return _json_safe(summary.model_dump(mode="python"))
