"""
# Harness

Configuration loading, single experiments and sweeps.

## Run directory

    config.json    resolved ExperimentConfig, re-parses to an equal config
    metrics.csv    one row per round, streamed as rounds complete
    summary.json   final and best metrics, generalization gap, wall time, seed
    run.log        the simulator log for this run
    snapshot.json  diverged runs only: the last finite round `t` and its client models

plus the optional `--dump-topology`, `--dump-partition` and `--save-models`
artifacts. A directory that already holds a run is only overwritten with
`force`.

## Sweeps

A sweep is the cartesian product of its axes applied to one base config. Each
child gets its own run directory under the sweep root and runs in isolation,
on a process pool when parallelism > 1. The aggregate table keeps cartesian
order whatever the schedule, and a failed child is recorded, not fatal.
"""

import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np
import pandas
import pydantic

from app import error, fedalgo, logging, metrics, objective, partition, rng, topology
from app.models import (
    AssumptionEstimates,
    ExperimentConfig,
    FedConfig,
    MetricRecord,
    RunStatus,
    RunSummary,
    SweepSpec,
)

OUTPUT_ROOT_ENV: str = "DFEDSIM_OUTPUT_ROOT"
OUTPUT_ROOT_DEFAULT: str = "runs"

FILE_CONFIG: str = "config.json"
FILE_METRICS: str = "metrics.csv"
FILE_SUMMARY: str = "summary.json"
FILE_LOG: str = "run.log"
FILE_SNAPSHOT: str = "snapshot.json"
FILE_SWEEP: str = "sweep.csv"

EXIT_OK: int = 0
ESTIMATE_PROBES: int = 3

# Flag name to the config keys it sets. Some flags fan out so nested sections
# stay consistent with the top level.
OVERRIDE_PATHS: dict[str, tuple[str, ...]] = {
    "algorithm": ("fed.algorithm",),
    "topology": ("fed.topology.kind",),
    "m": ("fed.m", "fed.topology.m", "fed.partition.m"),
    "rounds": ("fed.T",),
    "k": ("fed.K",),
    "q": ("fed.Q",),
    "neighbors": ("fed.topology.k",),
    "eta0": ("fed.eta0",),
    "eta_decay": ("fed.eta_decay",),
    "rho": ("fed.rho",),
    "mu": ("fed.mu",),
    "batch_size": ("fed.batch_size",),
    "sample_frac": ("fed.sample_frac",),
    "server_lr": ("fed.server_lr",),
    "partition": ("fed.partition.kind",),
    "alpha": ("fed.partition.alpha",),
    "classes_per_client": ("fed.partition.classes_per_client",),
    "model": ("fed.model.kind",),
    "hidden": ("fed.model.hidden",),
    "l2": ("fed.model.l2",),
    "n": ("fed.data.n",),
    "d": ("fed.data.d", "fed.model.d"),
    "classes": ("fed.data.classes", "fed.model.classes"),
    "sep": ("fed.data.sep",),
    "seed": ("fed.seed", "fed.data.seed", "fed.topology.seed", "fed.partition.seed"),
    "init": ("fed.init",),
    "mgs_fresh_graph": ("fed.mgs_fresh_graph",),
    "pure_gossip": ("fed.pure_gossip",),
    "out": ("output_dir",),
    "metric_every": ("metric_every",),
    "workers": ("workers",),
    "dump_topology": ("dump_topology",),
    "dump_partition": ("dump_partition",),
    "save_models": ("save_models",),
    "force": ("force",),
}

# Sweep axis name to the flag it stands for
AXIS_FLAGS: dict[str, str] = {
    "algorithm": "algorithm",
    "topology": "topology",
    "Q": "q",
    "K": "k",
    "rho": "rho",
    "alpha": "alpha",
    "m": "m",
    "seed": "seed",
}

logger = logging.get_logger()


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, OUTPUT_ROOT_DEFAULT))


def run_name(fed: FedConfig) -> str:
    return f"{fed.algorithm.value}_{fed.topology.kind.value}_seed-{fed.seed}"


# =========================================================================== #
#                                CONFIGURATION                                #
# =========================================================================== #


def _set_path(raw: dict[str, Any], path: str, value: Any):
    *parents, leaf = path.split(".")
    node = raw
    for key in parents:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[leaf] = value


def apply_overrides(raw: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    for name, value in overrides.items():
        if value is None:
            continue
        if name not in OVERRIDE_PATHS:
            raise error.ErrorConfigSchema([(name, "unknown option")])
        if isinstance(value, Path):
            value = str(value)
        for path in OVERRIDE_PATHS[name]:
            _set_path(raw, path, value)
    return raw


def validate[T: pydantic.BaseModel](model: type[T], raw: Any) -> T:
    """Validates `raw`, turning every schema violation into one config error"""
    try:
        return model.model_validate(raw)
    except pydantic.ValidationError as e:
        violations = [
            (".".join(str(part) for part in violation["loc"]), violation["msg"])
            for violation in e.errors()
        ]
        raise error.ErrorConfigSchema(violations) from e


def read_json(path: Path) -> dict[str, Any]:
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise error.ErrorConfig(f"config file {path} does not exist")
    except json.JSONDecodeError as e:
        raise error.ErrorConfig(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise error.ErrorConfig(f"config file {path} must hold a JSON object")
    return raw


def parse_config(
    path: Path | None = None, overrides: dict[str, Any] | None = None
) -> ExperimentConfig:
    """Config file (if any) with flag overrides on top. The output directory
    defaults to `<output root>/<algorithm>_<topology>_seed-<seed>`.
    """
    raw = read_json(path) if path is not None else {}
    cfg = validate(ExperimentConfig, apply_overrides(raw, overrides or {}))
    if cfg.output_dir is None:
        cfg = cfg.model_copy(update={"output_dir": default_output_root() / run_name(cfg.fed)})
    return cfg


def parse_sweep(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
    axes: dict[str, list[str]] | None = None,
    cap: int | None = None,
    output_root: Path | None = None,
) -> SweepSpec:
    """Sweep file (if any). `overrides` apply to the base config, `axes`
    replace the named axes, `cap` and `output_root` replace the file's."""
    raw = read_json(path) if path is not None else {}
    if cap is not None:
        raw["cap"] = cap
    if output_root is not None:
        raw["output_root"] = str(output_root)
    base = raw.get("base", {})
    raw["base"] = apply_overrides(base if isinstance(base, dict) else {}, overrides or {})

    if axes:
        raw_axes = raw.get("axes", {})
        raw_axes = dict(raw_axes) if isinstance(raw_axes, dict) else {}
        for name, values in axes.items():
            canonical = {"q": "Q", "k": "K"}.get(name, name)
            if canonical not in AXIS_FLAGS:
                raise error.ErrorConfigSchema([(f"axes.{name}", "unknown sweep axis")])
            raw_axes[canonical] = values
        raw["axes"] = raw_axes

    return validate(SweepSpec, raw)


# =========================================================================== #
#                                  EXPERIMENT                                 #
# =========================================================================== #


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir or default_output_root() / run_name(cfg.fed)
    artifacts = [
        out / name
        for name in (FILE_CONFIG, FILE_METRICS, FILE_SUMMARY, FILE_LOG, FILE_SNAPSHOT)
    ]
    if any(artifact.exists() for artifact in artifacts):
        if not cfg.force:
            raise error.ErrorOutputExists(str(out))
        for artifact in artifacts:
            artifact.unlink(missing_ok=True)

    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / FILE_CONFIG).write_text(cfg.model_dump_json(indent=2))
    except OSError as e:
        raise error.ErrorConfig(f"output directory {out} is not writable: {e}")
    return out


def _write_rows(handle, records: list[MetricRecord], header: bool):
    metrics.records_frame(records).to_csv(
        handle,
        header=header,
        index=False,
        float_format=metrics.CSV_FLOAT_FORMAT,
        na_rep="",
        lineterminator="\n",
    )
    handle.flush()


def _write_snapshot(path: Path, snapshot: fedalgo.RoundSnapshot):
    path.write_text(json.dumps({"t": snapshot.t, "X": snapshot.X.tolist()}))
    logger.info(f"Experiment - SNAPSHOT - round {snapshot.t} written to {path}")


def _summarize(
    cfg: ExperimentConfig, history: metrics.RunHistory, status: RunStatus, wall: float
) -> RunSummary:
    records = history.records
    final = records[-1] if records else None

    test_acc = history.column("test_acc")
    best = float(np.nanmax(test_acc)) if np.any(np.isfinite(test_acc)) else None

    gap = None
    if final is not None and np.isfinite(final.train_acc) and np.isfinite(final.test_acc):
        gap = metrics.generalization_gap(final.train_acc, final.test_acc)

    slope = None
    if len(records) >= metrics.RATE_FIT_MIN_POINTS:
        slope = metrics.rate_fit(records)

    return RunSummary(
        algorithm=cfg.fed.algorithm,
        seed=cfg.fed.seed,
        status=status,
        rounds_completed=len(records),
        final=final,
        best_test_acc=best,
        min_grad_norm_sq=min((record.grad_norm_sq for record in records), default=None),
        rate_slope=slope,
        generalization_gap=gap,
        wall_time_s=wall,
    )


def run_experiment(cfg: ExperimentConfig) -> int:
    """Runs one experiment into its output directory and returns the process
    exit status: 0 on success, 3 when training diverged (the CSV keeps every
    finished round). Configuration problems raise.
    """
    out = _prepare_output(cfg)
    handler = logging.attach_run_log(out / FILE_LOG)
    started = time.perf_counter()

    try:
        logger.info(f"Experiment - START - {out}")
        ds = partition.dataset_from_spec(cfg.fed.data)
        shards = partition.partition(ds, cfg.fed.partition)

        if cfg.dump_topology is not None:
            w = topology.mixing_matrix(topology.build_graph(cfg.fed.topology, 0))
            topology.dump_topology(w, cfg.dump_topology)
        if cfg.dump_partition is not None:
            partition.dump_partition(shards, cfg.dump_partition)

        status, exit_code = RunStatus.OK, EXIT_OK
        with open(out / FILE_METRICS, "w", newline="") as handle:
            _write_rows(handle, [], header=True)
            try:
                history = fedalgo.run(
                    cfg.fed,
                    dataset=ds,
                    shards=shards,
                    workers=cfg.workers,
                    metric_every=cfg.metric_every,
                    on_round=lambda record: _write_rows(handle, [record], header=False),
                )
                models = history.models
            except error.ErrorDivergence as e:
                logger.warning(f"Experiment - DIVERGED - {e.detail}")
                history = e.history or metrics.RunHistory(cfg.fed.algorithm, cfg.fed.seed)
                models = e.snapshot.X if e.snapshot is not None else None
                status, exit_code = RunStatus.DIVERGED, e.exit_code
                if e.snapshot is not None:
                    _write_snapshot(out / FILE_SNAPSHOT, e.snapshot)

        summary = _summarize(cfg, history, status, time.perf_counter() - started)
        (out / FILE_SUMMARY).write_text(summary.model_dump_json(indent=2))

        if cfg.save_models is not None and models is not None:
            cfg.save_models.parent.mkdir(parents=True, exist_ok=True)
            cfg.save_models.write_text(json.dumps(models.tolist()))

        logger.info(f"Experiment - DONE - {status.value} - {summary.wall_time_s:.2f}s")
        return exit_code
    finally:
        logging.detach_run_log(handler)


def estimate_constants(fed: FedConfig, probes: int = ESTIMATE_PROBES) -> AssumptionEstimates:
    """Probe estimates of L, sigma_l, sigma_g and beta on the data and
    partition `fed` would train on, at `probes` initialisation draws
    """
    if probes < 1:
        raise error.ErrorInput(f"estimates need at least one probe point, got {probes}")

    ds = partition.dataset_from_spec(fed.data)
    shards = partition.partition(ds, fed.partition)
    points = [
        objective.init_params(fed.model, rng.stream(fed.seed, rng.Stream.PROBE, i))
        for i in range(probes)
    ]

    estimates = AssumptionEstimates(
        L=metrics.estimate_smoothness(fed.model, ds, shards, points),
        sigma_l=metrics.estimate_sigma_l(
            fed.model, ds, shards, points, batch_size=fed.batch_size, seed=fed.seed
        ),
        sigma_g=metrics.estimate_sigma_g(fed.model, ds, shards, points),
        beta=partition.estimate_beta(ds, shards, fed.model, points),
        probes=probes,
    )
    logger.info(
        f"Estimate - {fed.model.kind.value} - L={estimates.L:.6g} "
        f"sigma_l={estimates.sigma_l:.6g} sigma_g={estimates.sigma_g:.6g} "
        f"beta={estimates.beta:.6g}"
    )
    return estimates


# =========================================================================== #
#                                    SWEEP                                    #
# =========================================================================== #


def _child_name(combination: dict[str, Any]) -> str:
    if not combination:
        return "base"
    parts = []
    for axis, value in combination.items():
        value = value.value if hasattr(value, "value") else value
        parts.append(f"{axis}-{value}")
    return "_".join(parts)


def sweep_children(spec: SweepSpec, root: Path) -> list[tuple[dict[str, Any], str]]:
    """(axis values, serialized child config) for every cell, in cartesian
    order. A cell whose config is invalid gets an empty payload.
    """
    names = [name for name, _ in spec.axes.items()]
    grids = [values for _, values in spec.axes.items()]

    children = []
    for values in itertools.product(*grids):
        combination = dict(zip(names, values))
        overrides = {
            AXIS_FLAGS[axis]: value.value if hasattr(value, "value") else value
            for axis, value in combination.items()
        }
        overrides["out"] = root / _child_name(combination)

        raw = apply_overrides(spec.base.model_dump(mode="json"), overrides)
        try:
            children.append((combination, validate(ExperimentConfig, raw).model_dump_json()))
        except error.ErrorConfig as e:
            logger.warning(f"Sweep - INVALID CELL - {_child_name(combination)} - {e.detail}")
            children.append((combination, ""))
    return children


def _run_child(payload: str) -> dict[str, Any]:
    if not payload:
        return {"exit_code": error.ErrorConfig.exit_code, "status": "config_error"}
    cfg = ExperimentConfig.model_validate_json(payload)

    try:
        exit_code = run_experiment(cfg)
    except error.ErrorSimulation as e:
        logger.warning(f"Sweep - CHILD FAILED - {cfg.output_dir} - {e.detail}")
        return {"exit_code": e.exit_code, "status": "error"}
    except Exception as e:
        logger.warning(f"Sweep - CHILD FAILED - {cfg.output_dir} - UNEXPECTED ERROR - {e}")
        return {"exit_code": 1, "status": "error"}

    summary = RunSummary.model_validate_json((cfg.output_dir / FILE_SUMMARY).read_text())
    final = summary.final
    return {
        "exit_code": exit_code,
        "status": summary.status.value,
        "run": cfg.output_dir.name,
        "final_test_acc": final.test_acc if final else np.nan,
        "generalization_gap": summary.generalization_gap,
        "final_consensus_dist": final.consensus_dist if final else np.nan,
        "min_grad_norm_sq": summary.min_grad_norm_sq,
        "rate_slope": summary.rate_slope,
        "comm_exchanges": final.comm_exchanges if final else 0,
    }


def run_sweep(spec: SweepSpec, parallelism: int = 1) -> pandas.DataFrame:
    """Runs every cell and writes `sweep.csv` under the sweep root. Rows follow
    cartesian order; failed cells carry a non-zero `exit_code`.
    """
    if spec.axes.size > spec.cap:
        raise error.ErrorConfig(f"sweep has {spec.axes.size} runs, more than the cap {spec.cap}")

    root = spec.output_root if spec.output_root is not None else default_output_root() / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    children = sweep_children(spec, root)
    logger.info(f"Sweep - START - {len(children)} runs - parallelism {parallelism}")

    payloads = [payload for _, payload in children]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as executor:
            results = list(executor.map(_run_child, payloads))
    else:
        results = [_run_child(payload) for payload in payloads]

    rows = []
    for (combination, _), result in zip(children, results):
        cell = {
            axis: value.value if hasattr(value, "value") else value
            for axis, value in combination.items()
        }
        rows.append({**cell, **result})

    frame = pandas.DataFrame(rows)
    frame.to_csv(root / FILE_SWEEP, index=False, float_format=metrics.CSV_FLOAT_FORMAT, na_rep="")

    failed = int((frame["exit_code"] != EXIT_OK).sum())
    logger.info(f"Sweep - DONE - {len(rows) - failed} ok - {failed} failed")
    return frame


def check_sweep(frame: pandas.DataFrame):
    """Raises `ErrorSweep` when some cells failed"""
    failed = int((frame["exit_code"] != EXIT_OK).sum())
    if failed:
        raise error.ErrorSweep(failed, len(frame))
