"""End-to-end tests of the sweep -> synth -> identify -> evaluate -> report pipeline."""

import json

import numpy as np
import pytest

import main
from src import ExitCode, RunState
from src.controllers.pipeline_controller import PipelineController, exit_code_for
from src.models.artifact_store import ArtifactStore
from src.models.config_manager import ConfigManager
from src.models.errors import (
    ArtifactIOError, ConfigValidationError, InvalidArgumentError, NumericalFailureError
)

STAGES = ("sweep", "synth", "identify", "evaluate")


def _settings(run_dir, **extra):
    settings = {
        "dimensions.S": 2, "dimensions.K": 16, "dimensions.K_tilde": 16, "dimensions.N": 4000,
        "rotation.sample_rate": 8000.0, "rotation.omega": 1800.0,
        "noise.variance": 1e-4,
        "algorithm.name": "nlms", "algorithm.hyperparameters": {"mu": 0.5},
        "evaluation.snapshot_stride": 100, "evaluation.grid_step_deg": 90.0,
        "runtime.seed": 11, "runtime.workers": 1, "runtime.output_dir": str(run_dir),
    }
    settings.update(extra)
    return settings


def _controller(run_dir, **extra):
    config = ConfigManager().load(overrides=_settings(run_dir, **extra))
    return PipelineController(config)


async def _run(controller, stages=STAGES):
    summaries = {}
    for stage in stages:
        code, summary = await controller.execute(stage)
        assert code == ExitCode.SUCCESS, summary
        summaries[stage] = summary
    return summaries


def _write_config(tmp_path, run_dir, **extra):
    nested = {}
    for key, value in _settings(run_dir, **extra).items():
        section, name = key.split(".", 1)
        nested.setdefault(section, {})[name] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(nested), encoding="utf-8")
    return str(path)


@pytest.mark.asyncio
async def test_full_pipeline_writes_every_artifact(tmp_path):
    run_dir = tmp_path / "run"
    controller = _controller(run_dir)
    summaries = await _run(controller, STAGES + ("report",))

    assert summaries["sweep"]["P"] == 32
    assert set(summaries["synth"]["ears"]) == {"left", "right"}
    assert summaries["evaluate"]["nm_db"] < -10.0
    assert summaries["report"]["algorithms"] == ["nlms"]
    assert controller.state == RunState.COMPLETED

    for name in ("config.json", "sweep.f64", "bank.f64", "recording_left.f64",
                 "recording_right.json", "truth_frames_left.f64", "truth_grid_right.f64",
                 "result_nlms_left.json", "result_nlms_right_snapshots.f64",
                 "metrics_nlms.csv", "metrics_nlms.json", "itd_nlms.csv", "summary_nlms.md",
                 "report.csv", "report.json", "report.md", "report.html"):
        assert (run_dir / name).is_file(), name

    report = ArtifactStore(run_dir).load_metrics("nlms")
    assert [row.azimuth_deg for row in report.itd_table] == [0.0, 90.0, 180.0, 270.0]
    assert set(report.per_ear) == {"left", "right"}
    assert "<table>" in (run_dir / "report.html").read_text(encoding="utf-8")


@pytest.mark.asyncio
async def test_report_compares_algorithms_in_fixed_order(tmp_path):
    run_dir = tmp_path / "run"
    await _run(_controller(run_dir, **{"algorithm.name": "kalman", "algorithm.hyperparameters": {}}))
    await _run(_controller(run_dir), ("identify", "evaluate"))
    code, summary = await _controller(run_dir).execute("report")

    assert code == ExitCode.SUCCESS
    assert summary["algorithms"] == ["nlms", "kalman"]
    rows = ArtifactStore(run_dir).read_csv("report.csv")
    assert [row["algo"] for row in rows] == ["nlms", "kalman"]


@pytest.mark.asyncio
async def test_grid_mode_evaluation(tmp_path):
    controller = _controller(tmp_path / "run", **{"evaluation.mode": "grid"})
    summaries = await _run(controller)
    assert summaries["identify"]["ears"]["left"]["snapshots"] == 4
    assert summaries["evaluate"]["frames_evaluated"] == 2 * 4 * 2


@pytest.mark.asyncio
async def test_single_ear_run_skips_itd(tmp_path):
    controller = _controller(tmp_path / "run", **{"scenario.ears": ["right"]})
    summaries = await _run(controller)
    assert summaries["evaluate"]["itd_table"] == []
    assert list(summaries["evaluate"]["per_ear"]) == ["right"]


@pytest.mark.asyncio
async def test_reruns_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    await _run(_controller(first))
    await _run(_controller(second))
    for name in ("bank.f64", "recording_left.f64", "recording_right.f64",
                 "result_nlms_left_errors.f64", "result_nlms_right_snapshots.f64",
                 "result_nlms_left_etrace.csv", "metrics_nlms.json", "metrics_nlms.csv",
                 "itd_nlms.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


@pytest.mark.asyncio
async def test_segmented_dnn_identification(tmp_path):
    run_dir = tmp_path / "run"
    controller = _controller(
        run_dir,
        **{"dimensions.N": 1200, "algorithm.name": "dnn", "algorithm.hyperparameters": {},
           "algorithm.segments": 2, "trainer.max_epochs": 2, "trainer.lr": 1e-4}
    )
    summaries = await _run(controller, ("sweep", "synth", "identify"))

    assert summaries["identify"]["ears"]["left"]["failed_segments"] == []
    for ear in ("left", "right"):
        for seg in (0, 1):
            assert (run_dir / f"checkpoint_{ear}_seg{seg:02d}.f64").is_file()
            assert (run_dir / f"epochs_{ear}_seg{seg:02d}.csv").is_file()
    result = ArtifactStore(run_dir).load_result("dnn", "left")
    assert result.segment_boundaries == [0, 600]
    assert result.N == 1200


@pytest.mark.asyncio
async def test_dnn_trains_every_requested_segment(tmp_path):
    run_dir = tmp_path / "run"
    controller = _controller(
        run_dir,
        **{"dimensions.N": 1000, "algorithm.name": "dnn", "algorithm.hyperparameters": {},
           "algorithm.segments": 3, "trainer.max_epochs": 1, "trainer.lr": 1e-4,
           "scenario.ears": ["left"]}
    )
    await _run(controller, ("sweep", "synth", "identify"))

    for seg in (0, 1, 2):
        assert (run_dir / f"checkpoint_left_seg{seg:02d}.f64").is_file()
    result = ArtifactStore(run_dir).load_result("dnn", "left")
    assert result.segment_boundaries == [0, 333, 666]
    assert (run_dir / "result_dnn_left_etrace.csv").is_file()


@pytest.mark.asyncio
async def test_stage_errors_map_to_exit_codes(tmp_path):
    code, summary = await _controller(tmp_path / "empty").execute("synth")
    assert code == ExitCode.IO_FAILURE
    assert summary["type"] == "ArtifactIOError"

    diverging = _controller(tmp_path / "lms", **{"algorithm.name": "lms",
                                                  "algorithm.hyperparameters": {"mu": 10.0}})
    await _run(diverging, ("sweep", "synth"))
    code, summary = await diverging.execute("identify")
    assert code == ExitCode.NUMERICAL_FAILURE
    assert diverging.state == RunState.FAILED

    bad_hyper = _controller(tmp_path / "lms", **{"algorithm.hyperparameters": {"step": 1.0}})
    code, _ = await bad_hyper.execute("identify")
    assert code == ExitCode.INVALID_CONFIG

    code, _ = await _controller(tmp_path / "lms").execute("calibrate")
    assert code == ExitCode.INVALID_CONFIG


def test_exit_code_for():
    assert exit_code_for(ConfigValidationError(["bad"])) == ExitCode.INVALID_CONFIG
    assert exit_code_for(InvalidArgumentError("bad")) == ExitCode.INVALID_CONFIG
    assert exit_code_for(NumericalFailureError("nan", frame=3)) == ExitCode.NUMERICAL_FAILURE
    assert exit_code_for(ArtifactIOError("missing", "x.f64")) == ExitCode.IO_FAILURE
    assert exit_code_for(KeyError("x")) == ExitCode.UNEXPECTED


@pytest.mark.asyncio
async def test_cli_summary_matches_library(tmp_path, capsys):
    run_dir = tmp_path / "run"
    config_path = _write_config(tmp_path, run_dir)
    for stage in ("sweep", "synth", "identify"):
        assert await main.main([stage, "--config", config_path, "--quiet"]) == ExitCode.SUCCESS
    capsys.readouterr()

    assert await main.main(["evaluate", "--config", config_path, "--quiet"]) == ExitCode.SUCCESS
    printed = json.loads(capsys.readouterr().out)
    stored = ArtifactStore(run_dir).load_metrics("nlms").to_dict()
    assert printed == {"command": "evaluate", **stored}
    assert (run_dir / "logs" / "rotir.log").is_file()


@pytest.mark.asyncio
async def test_cli_overrides_and_usage_errors(tmp_path, capsys):
    run_dir = tmp_path / "run"
    config_path = _write_config(tmp_path, tmp_path / "unused")
    code = await main.main(["sweep", "--config", config_path, "--out", str(run_dir),
                            "--set", "dimensions.K_tilde=8", "--quiet"])
    assert code == ExitCode.SUCCESS
    assert json.loads(capsys.readouterr().out)["P"] == 16
    assert (run_dir / "bank.f64").is_file()

    assert await main.main(["sweep", "--config", config_path, "--quiet",
                            "--set", "dimensions.P=30"]) == ExitCode.INVALID_CONFIG
    assert await main.main(["calibrate"]) == 2
    assert await main.main(["sweep", "--config", str(tmp_path / "absent.json"),
                            "--quiet"]) == ExitCode.INVALID_CONFIG
    assert await main.main(["synth", "--config", config_path, "--out", str(tmp_path / "fresh"),
                            "--quiet"]) == ExitCode.IO_FAILURE


def test_stored_truth_refuses_unknown_frames():
    from src.controllers.pipeline_controller import stored_truth
    from src.models.scenario import RotationProfile

    frames = np.ones((2, 1, 4))
    truth = stored_truth(np.array([0, 10]), frames, 20, RotationProfile())
    assert truth.frames([10]).shape == (1, 1, 4)
    with pytest.raises(InvalidArgumentError, match="frame 5"):
        truth.frames([5])
