import json
from pathlib import Path

import numpy as np
import pandas
import pytest

from app import error, fedalgo, harness, metrics
from app.models import ExperimentConfig, RunStatus, RunSummary

from .conftest import small_fed


def write_json(path: Path, raw: dict) -> Path:
    path.write_text(json.dumps(raw))
    return path


def experiment(tmp_path: Path, name: str = "run", **fed) -> ExperimentConfig:
    path = write_json(tmp_path / f"{name}.json", {"fed": small_fed(**fed)})
    return harness.parse_config(path, {"out": tmp_path / name})


# =========================================================================== #
#                                CONFIGURATION                                #
# =========================================================================== #


def test_defaults(output_root):
    cfg = harness.parse_config()
    assert cfg.fed.algorithm.value == "dfedsam"
    assert cfg.fed.Q == 1
    assert cfg.fed.topology.m == cfg.fed.m == cfg.fed.partition.m
    assert cfg.output_dir == output_root / harness.run_name(cfg.fed)


def test_flags_override_file(tmp_path):
    path = write_json(tmp_path / "cfg.json", {"fed": small_fed(algorithm="dfedsam_mgs", Q=2)})
    cfg = harness.parse_config(path, {"q": 4, "m": 9, "topology": "grid", "seed": 3})

    assert cfg.fed.Q == 4
    assert cfg.fed.topology.grid_shape == (3, 3)
    assert cfg.fed.partition.m == 9
    assert cfg.fed.data.seed == cfg.fed.topology.seed == 3
    assert cfg.fed.K == 2


def test_prime_grid_is_a_config_error():
    with pytest.raises(error.ErrorConfigSchema, match="grid") as caught:
        harness.parse_config(None, {"topology": "grid", "m": 17})
    assert caught.value.exit_code == 2


def test_dfedsam_needs_single_gossip():
    with pytest.raises(error.ErrorConfigSchema, match="Q = 1"):
        harness.parse_config(None, {"algorithm": "dfedsam", "q": 2})


def test_unknown_keys_are_rejected(tmp_path):
    path = write_json(tmp_path / "cfg.json", {"fed": small_fed(bogus=1)})
    with pytest.raises(error.ErrorConfigSchema, match="bogus"):
        harness.parse_config(path)
    with pytest.raises(error.ErrorConfigSchema):
        harness.apply_overrides({}, {"bogus": 1})


def test_bad_config_files(tmp_path):
    with pytest.raises(error.ErrorConfig, match="does not exist"):
        harness.parse_config(tmp_path / "missing.json")

    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(error.ErrorConfig, match="not valid JSON"):
        harness.parse_config(broken)


def test_config_round_trips(tmp_path):
    cfg = experiment(tmp_path, model={"kind": "mlp", "hidden": 7}, init="per-client")
    assert ExperimentConfig.model_validate_json(cfg.model_dump_json()) == cfg


# =========================================================================== #
#                                  EXPERIMENT                                 #
# =========================================================================== #


def test_run_writes_artifacts(tmp_path):
    cfg = experiment(tmp_path, T=6)
    assert harness.run_experiment(cfg) == harness.EXIT_OK

    out = cfg.output_dir
    assert ExperimentConfig.model_validate_json((out / harness.FILE_CONFIG).read_text()) == cfg

    frame = pandas.read_csv(out / harness.FILE_METRICS)
    assert list(frame.columns) == metrics.CSV_COLUMNS
    assert frame["t"].tolist() == [1, 2, 3, 4, 5, 6]

    summary = RunSummary.model_validate_json((out / harness.FILE_SUMMARY).read_text())
    assert summary.status == RunStatus.OK
    assert summary.rounds_completed == 6
    assert summary.min_grad_norm_sq == pytest.approx(frame["grad_norm_sq"].min(), rel=1e-15)
    assert summary.generalization_gap == pytest.approx(
        summary.final.train_acc - summary.final.test_acc
    )
    assert summary.rate_slope is None
    assert "Experiment - DONE" in (out / harness.FILE_LOG).read_text()


def test_quadratic_run_reports_rate(tmp_path):
    cfg = experiment(tmp_path, T=40, model={"kind": "quadratic"})
    assert harness.run_experiment(cfg) == harness.EXIT_OK

    summary = RunSummary.model_validate_json((cfg.output_dir / harness.FILE_SUMMARY).read_text())
    assert summary.rounds_completed == 40
    assert summary.rate_slope < 0


def test_optional_dumps(tmp_path):
    cfg = experiment(tmp_path, T=2)
    cfg = cfg.model_copy(
        update={
            "dump_topology": tmp_path / "w.json",
            "dump_partition": tmp_path / "shards.json",
            "save_models": tmp_path / "models.json",
        }
    )
    harness.run_experiment(cfg)

    assert json.loads((tmp_path / "w.json").read_text())["m"] == 4
    assert len(json.loads((tmp_path / "shards.json").read_text())) == 4
    assert len(json.loads((tmp_path / "models.json").read_text())) == 4


def test_rerun_needs_force(tmp_path):
    cfg = experiment(tmp_path)
    harness.run_experiment(cfg)
    first = (cfg.output_dir / harness.FILE_METRICS).read_bytes()

    with pytest.raises(error.ErrorOutputExists):
        harness.run_experiment(cfg)

    harness.run_experiment(cfg.model_copy(update={"force": True}))
    assert (cfg.output_dir / harness.FILE_METRICS).read_bytes() == first


def test_thread_count_keeps_csv_bytes(tmp_path):
    serial = experiment(tmp_path, "serial", algorithm="dfedsam_mgs", Q=2)
    threaded = experiment(tmp_path, "threaded", algorithm="dfedsam_mgs", Q=2)
    threaded = threaded.model_copy(update={"workers": 8})

    harness.run_experiment(serial)
    harness.run_experiment(threaded)
    assert (serial.output_dir / harness.FILE_METRICS).read_bytes() == (
        threaded.output_dir / harness.FILE_METRICS
    ).read_bytes()


def test_divergence_exit_status(tmp_path):
    cfg = experiment(
        tmp_path,
        eta0=1.0,
        K=5,
        model={"kind": "quadratic", "curvature": [1e300, 1e300]},
    )
    assert harness.run_experiment(cfg) == error.ErrorDivergence.exit_code == 3

    summary = RunSummary.model_validate_json((cfg.output_dir / harness.FILE_SUMMARY).read_text())
    assert summary.status == RunStatus.DIVERGED
    assert summary.rounds_completed == 0
    assert summary.final is None
    assert pandas.read_csv(cfg.output_dir / harness.FILE_METRICS).empty

    snapshot = json.loads((cfg.output_dir / harness.FILE_SNAPSHOT).read_text())
    assert snapshot["t"] == 0
    np.testing.assert_array_equal(snapshot["X"], fedalgo.initial_models(cfg.fed))


# =========================================================================== #
#                                    SWEEP                                    #
# =========================================================================== #


@pytest.fixture
def sweep_file(tmp_path) -> Path:
    return write_json(tmp_path / "sweep.json", {"base": {"fed": small_fed(T=3)}})


def test_sweep_grid(tmp_path, sweep_file):
    spec = harness.parse_sweep(
        sweep_file,
        axes={"topology": ["ring", "full"], "algorithm": ["dfedavg", "dfedsam"]},
        output_root=tmp_path / "grid",
    )
    children = harness.sweep_children(spec, tmp_path / "grid")
    feds = [json.loads(payload)["fed"] for _, payload in children]
    for a, b in ((0, 2), (1, 3)):
        changed = {key for key in feds[a] if feds[a][key] != feds[b][key]}
        assert changed == {"algorithm"}

    frame = harness.run_sweep(spec)
    assert len(frame) == 4
    assert frame[["algorithm", "topology"]].values.tolist() == [
        ["dfedavg", "ring"],
        ["dfedavg", "full"],
        ["dfedsam", "ring"],
        ["dfedsam", "full"],
    ]
    assert (frame["exit_code"] == 0).all()
    assert (tmp_path / "grid" / harness.FILE_SWEEP).exists()
    assert (tmp_path / "grid" / "algorithm-dfedsam_topology-full" / harness.FILE_METRICS).exists()
    harness.check_sweep(frame)


def test_sweep_records_invalid_cells(tmp_path, sweep_file):
    spec = harness.parse_sweep(sweep_file, axes={"Q": ["1", "2"]}, output_root=tmp_path / "q")
    frame = harness.run_sweep(spec)

    assert frame["exit_code"].tolist() == [0, 2]
    assert frame["status"].tolist() == ["ok", "config_error"]
    with pytest.raises(error.ErrorSweep, match="1 of 2") as caught:
        harness.check_sweep(frame)
    assert caught.value.exit_code == 4


def test_sweep_cap(sweep_file):
    axes = {"seed": [str(seed) for seed in range(6)], "rho": ["0.01", "0.05"]}
    with pytest.raises(error.ErrorConfigSchema, match="cap"):
        harness.parse_sweep(sweep_file, axes=axes, cap=10)
    assert harness.parse_sweep(sweep_file, axes=axes, cap=12).axes.size == 12


def test_sweep_rejects_unknown_axis(sweep_file):
    with pytest.raises(error.ErrorConfigSchema, match="unknown sweep axis"):
        harness.parse_sweep(sweep_file, axes={"eta0": ["0.1"]})


@pytest.mark.slow
def test_parallel_sweep_matches_serial(tmp_path, sweep_file):
    axes = {"seed": ["0", "1", "2"]}
    serial = harness.run_sweep(
        harness.parse_sweep(sweep_file, axes=axes, output_root=tmp_path / "a")
    )
    parallel = harness.run_sweep(
        harness.parse_sweep(sweep_file, axes=axes, output_root=tmp_path / "b"), parallelism=2
    )
    pandas.testing.assert_frame_equal(serial, parallel)
