"""
Pipeline Controller Module

Orchestrates the sweep -> synth -> identify -> evaluate -> report pipeline
over one run directory. Each command is a thin wrapper over library calls;
per-ear and per-segment work is fanned out through the JobRunner.
"""

import logging
from dataclasses import replace
from typing import Any, Dict, List, Optional, Tuple

import markdown2
import numpy as np

from .. import EARS, Algorithms, ExitCode, RunState
from ..models.artifact_store import ArtifactStore, format_csv, metrics_row, METRICS_HEADER
from ..models.config_manager import GRID_KIND, ExperimentConfig
from ..models.errors import (
    ArtifactIOError, InvalidArgumentError, NumericalFailureError, IdentificationError
)
from ..models.identifiers import make_identifier, run_identifier
from ..models.metrics import (
    azimuth_map, combine_ears, evaluate_frames, evaluate_grid, itd_error_table,
    otf_compensate_ir, time_window
)
from ..models.result_models import IdentificationResult, MetricsReport, StorePolicy
from ..models.scenario import (
    IRTrajectory, render, synth_trajectory, trajectory_from_grid
)
from ..models.signals import build_excitation_bank, generate_perfect_sweep
from ..models.trainer import segment_bounds, stitch_segments, train_segment
from ..utils.logging_config import timed
from .job_runner import Job, JobRunner

logger = logging.getLogger(__name__)

COMMANDS = ("sweep", "synth", "identify", "evaluate", "report")


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the process exit code."""
    if isinstance(error, InvalidArgumentError):
        return ExitCode.INVALID_CONFIG
    if isinstance(error, NumericalFailureError):
        return ExitCode.NUMERICAL_FAILURE
    if isinstance(error, (ArtifactIOError, OSError)):
        return ExitCode.IO_FAILURE
    return ExitCode.UNEXPECTED


def build_trajectory(config: ExperimentConfig, ear: str) -> IRTrajectory:
    """
    Ground-truth trajectory of one ear.

    Raises:
        InvalidArgumentError: If a grid does not match the configured dimensions
    """
    dims = config.dimensions
    rotation = config.rotation.profile()
    sc = config.scenario
    if sc.kind == GRID_KIND:
        grid = ArtifactStore.load_grid(sc.grid_files[ear])
        if grid.K != dims.K:
            raise InvalidArgumentError(f"Grid for ear '{ear}' has K={grid.K}, config says {dims.K}")
        rows = sc.speaker_rows if sc.speaker_rows is not None else list(range(dims.S))
        return trajectory_from_grid(grid, rotation, config.N, dims.S, rows, sc.speaker_offsets)
    return synth_trajectory(sc.kind, config.synth_params(ear, config.trajectory_seed(ear)))


def synth_ear(config: ExperimentConfig, ear: str, bank) -> Dict[str, Any]:
    """Render one ear and sample its true IRs at the evaluation frames and azimuths."""
    trajectory = build_trajectory(config, ear)
    recording = render(
        trajectory, bank, noise_variance=config.noise.variance, seed=config.noise_seed(ear),
        snr_db=config.noise.snr_db, ear=ear
    )
    rotation = config.rotation.profile()
    frame_idx = StorePolicy.strided(config.evaluation.snapshot_stride).select(0, trajectory.N)
    grid_idx = StorePolicy.at_azimuths(config.evaluation.grid()).select(0, trajectory.N, rotation)
    return {
        'recording': recording,
        'frames': (frame_idx, trajectory.frames(frame_idx)),
        'grid': (grid_idx, trajectory.frames(grid_idx)),
    }


def identify_ear(config: ExperimentConfig, ear: str, bank, recording) -> IdentificationResult:
    """Stream a baseline identifier over one ear."""
    algo = make_identifier(config.algorithm.name, bank.width, **config.algorithm.hyperparameters)
    return run_identifier(algo, bank, recording, config.store_policy(),
                          rotation=config.rotation.profile(), ear=ear)


def stored_truth(indices: np.ndarray, frames: np.ndarray, N: int, rotation) -> IRTrajectory:
    """Trajectory view over stored true IRs; asking for any other frame is an error."""
    position = {int(n): i for i, n in enumerate(indices)}
    _, S, K = frames.shape

    def frame_fn(idx: np.ndarray) -> np.ndarray:
        missing = [int(n) for n in idx if int(n) not in position]
        if missing:
            raise InvalidArgumentError(
                f"No stored true IR for frame {missing[0]} ({len(missing)} missing); "
                "re-run synth with the same evaluation settings"
            )
        return frames[[position[int(n)] for n in idx]]

    return IRTrajectory(N, S, K, rotation, frame_fn=frame_fn, label="stored-truth")


class PipelineController:
    """
    Runs pipeline commands against one run directory.

    Library exceptions propagate out of the cmd_* coroutines; `execute`
    turns them into exit codes.
    """

    def __init__(self, config: ExperimentConfig, store: Optional[ArtifactStore] = None,
                 workers: Optional[int] = None):
        """
        Initialize PipelineController.

        Args:
            config: Validated experiment configuration
            store: Artifact store (defaults to runtime.output_dir)
            workers: Concurrency limit (defaults to runtime.workers)
        """
        self.config = config
        self.store = store or ArtifactStore(config.runtime.output_dir)
        self.workers = workers or config.runtime.workers
        self.state = RunState.STARTING
        logger.debug("PipelineController initialized for %s", self.store.root)

    @property
    def ears(self) -> List[str]:
        return list(self.config.scenario.ears)

    async def execute(self, command: str, **kwargs: Any) -> Tuple[int, Dict[str, Any]]:
        """
        Run one command and map failures to exit codes.

        Returns:
            (exit code, command summary or error description)
        """
        handler = getattr(self, f"cmd_{command}", None)
        if command not in COMMANDS or handler is None:
            return ExitCode.INVALID_CONFIG, {'error': f"Unknown command '{command}'"}
        self.state = RunState.RUNNING
        try:
            with timed(command, logger, command=command):
                summary = await handler(**kwargs)
        except IdentificationError as e:
            self.state = RunState.FAILED
            logger.error("%s failed: %s", command, e)
            return exit_code_for(e), {'error': str(e), 'type': type(e).__name__}
        except OSError as e:
            self.state = RunState.FAILED
            logger.error("%s failed with an I/O error: %s", command, e)
            return ExitCode.IO_FAILURE, {'error': str(e), 'type': type(e).__name__}
        except Exception as e:
            self.state = RunState.FAILED
            logger.exception("%s failed unexpectedly", command)
            return ExitCode.UNEXPECTED, {'error': str(e), 'type': type(e).__name__}
        self.state = RunState.COMPLETED
        return ExitCode.SUCCESS, summary

    async def _save_config(self) -> None:
        await self.store.write_json("config.json", self.config.to_dict())

    async def cmd_sweep(self) -> Dict[str, Any]:
        """Generate the perfect sweep and the excitation bank."""
        dims = self.config.dimensions
        sweep = generate_perfect_sweep(dims.period)
        bank = build_excitation_bank(sweep, dims.S, dims.K_tilde, self.config.N,
                                     sample_rate=self.config.rotation.sample_rate)
        await self._save_config()
        await self.store.save_bank(bank, export_wav=self.config.runtime.export_wav)
        logger.info("Sweep P=%d and bank S=%d N=%d written", sweep.period, bank.S, bank.length)
        return {'command': 'sweep', 'P': sweep.period, 'S': bank.S, 'N': bank.length,
                'files': ['sweep.f64', 'bank.f64']}

    async def cmd_synth(self) -> Dict[str, Any]:
        """Render the recording of every ear and store the true IRs used for scoring."""
        bank = self.store.load_bank()
        if bank.length < self.config.N:
            raise InvalidArgumentError(
                f"Bank length {bank.length} is shorter than N={self.config.N}; re-run sweep"
            )
        async with JobRunner(self.workers) as runner:
            outputs = await runner.run_all([
                Job(f"synth-{ear}", synth_ear, (self.config, ear, bank)) for ear in self.ears
            ])
        summary = {'command': 'synth', 'ears': {}}
        meta = {'N': self.config.N, 'rotation': self.config.rotation.profile().to_dict()}
        for ear, out in zip(self.ears, outputs):
            recording = out['recording']
            await self.store.save_recording(recording, export_wav=self.config.runtime.export_wav)
            for kind in ('frames', 'grid'):
                indices, frames = out[kind]
                await self.store.save_truth(kind, ear, indices, frames, meta)
            summary['ears'][ear] = {'N': recording.N, 'snr_db': recording.snr_db,
                                    'noise_variance': recording.noise_variance}
            logger.info("Rendered %s ear: N=%d snr=%s dB", ear, recording.N, recording.snr_db)
        await self._save_config()
        return summary

    async def cmd_identify(self) -> Dict[str, Any]:
        """Run the configured identifier on every ear."""
        bank = self.store.load_bank()
        recordings = {ear: self.store.load_recording(ear) for ear in self.ears}
        name = self.config.algorithm.name
        if name == Algorithms.DNN:
            results = await self._identify_dnn(bank, recordings)
        else:
            async with JobRunner(self.workers) as runner:
                found = await runner.run_all([
                    Job(f"{name}-{ear}", identify_ear, (self.config, ear, bank, recordings[ear]))
                    for ear in self.ears
                ])
            results = dict(zip(self.ears, found))

        summary = {'command': 'identify', 'algo': name, 'ears': {}}
        for ear, result in results.items():
            await self.store.save_result(result)
            finite = result.errors[np.isfinite(result.errors)]
            summary['ears'][ear] = {
                'snapshots': int(result.snapshot_indices.size),
                'mean_ise': float(np.mean(finite ** 2)) if finite.size else None,
                'failed_segments': list(result.failed_segments),
            }
        await self._save_config()
        return summary

    async def _identify_dnn(self, bank, recordings) -> Dict[str, IdentificationResult]:
        """Train every (ear, segment) pair as an independent job and stitch per ear."""
        trainer = replace(self.config.trainer, seed=self.config.seeds()['trainer'])
        policy = self.config.store_policy()
        rotation = self.config.rotation.profile()
        jobs = []
        for ear in self.ears:
            for i, (lo, hi) in enumerate(segment_bounds(recordings[ear].N, self.config.algorithm.segments)):
                jobs.append(Job(f"dnn-{ear}-seg{i}", train_segment,
                                (i, lo, hi, bank, recordings[ear], trainer, policy, rotation, ear)))
        async with JobRunner(self.workers) as runner:
            outcomes = await runner.run_all(jobs)

        results = {}
        for ear in self.ears:
            mine = [o for job, o in zip(jobs, outcomes) if job.args[-1] == ear]
            stitched = stitch_segments(mine, bank.S, bank.tap_count, trainer, ear=ear)
            if all(o.failed for o in mine):
                raise NumericalFailureError(f"Every segment of the {ear} ear failed: {mine[0].error}")
            for outcome in mine:
                tag = f"{ear}_seg{outcome.index:02d}"
                if outcome.failed:
                    logger.warning("Segment %d of %s ear failed: %s", outcome.index, ear, outcome.error)
                    continue
                await self.store.save_checkpoint(f"checkpoint_{tag}", outcome.params, {
                    'segment': outcome.index, 'start': outcome.start, 'stop': outcome.stop,
                    'best_epoch': outcome.best_epoch, 'ear': ear,
                })
                await self.store.save_epoch_log(f"epochs_{tag}.csv", outcome.epoch_log)
            results[ear] = stitched.result
        return results

    def _postprocess(self, result: IdentificationResult) -> IdentificationResult:
        """Apply OTF compensation to the stored estimates when configured."""
        ev = self.config.evaluation
        if ev.otf_file is None or result.is_empty:
            return result
        otf = ArtifactStore.load_otf(ev.otf_file)
        blocks = result.snapshots.reshape(-1, result.S, result.K_tilde)
        corrected = otf_compensate_ir(blocks, otf, reg=ev.otf_reg)
        return replace(result, snapshots=corrected.reshape(-1, result.S * result.K_tilde))

    def _truth_map(self, ear: str) -> Dict[float, np.ndarray]:
        """True (K, S) matrices per evaluation azimuth, taken at the stored frame nearest to it."""
        indices, frames, _ = self.store.load_truth('grid', ear)
        theta = self.config.rotation.profile().angle(indices)
        mapped = {}
        for az in self.config.evaluation.grid():
            distance = np.abs((theta - az + 180.0) % 360.0 - 180.0)
            mapped[float(az)] = frames[int(np.argmin(distance))].T
        return mapped

    def evaluate_ear(self, ear: str, algo: str) -> Tuple[MetricsReport, Dict[float, np.ndarray]]:
        """Score one ear; returns the report and the per-azimuth estimates used for ITD."""
        ev = self.config.evaluation
        fs = self.config.rotation.sample_rate
        result = self._postprocess(self.store.load_result(algo, ear))
        est_map = azimuth_map(result, ev.grid(), rotation=self.config.rotation.profile())
        if ev.mode == 'grid':
            report = evaluate_grid(est_map, self._truth_map(ear), fs, band=ev.band,
                                   fft_size=ev.fft_size, window=ev.window_seconds(),
                                   algo=algo, ear=ear)
        else:
            indices, frames, meta = self.store.load_truth('frames', ear)
            truth = stored_truth(indices, frames, int(meta['N']), self.config.rotation.profile())
            report = evaluate_frames(result, truth, fs, band=ev.band, fft_size=ev.fft_size,
                                     window=ev.window_seconds())
        if report.frames_excluded:
            logger.warning("%s ear: %d zero-norm frames excluded from NM", ear, report.frames_excluded)
        return report, est_map

    def _itd_table(self, est_maps: Dict[str, Dict[float, np.ndarray]]) -> list:
        ev = self.config.evaluation
        fs = self.config.rotation.sample_rate
        s = ev.itd_speaker
        truths = {ear: self._truth_map(ear) for ear in EARS}
        window = ev.window_seconds()

        def pair(maps: Dict[str, Dict[float, np.ndarray]], az: float):
            left, right = maps[EARS[0]][az][:, s], maps[EARS[1]][az][:, s]
            if window is not None:
                left = time_window(left, window[0], window[1], fs)
                right = time_window(right, window[0], window[1], fs)
            return left, right

        grid = ev.grid()
        true_set = {az: pair(truths, az) for az in grid}
        est_set = {az: pair(est_maps, az) for az in grid}
        return itd_error_table(true_set, est_set, grid, fs, max_lag=ev.max_lag)

    async def cmd_evaluate(self) -> Dict[str, Any]:
        """Score the configured algorithm's results against the stored truth."""
        algo = self.config.algorithm.name
        reports = {}
        est_maps = {}
        for ear in self.ears:
            reports[ear], est_maps[ear] = self.evaluate_ear(ear, algo)

        itd_table = self._itd_table(est_maps) if set(EARS) <= set(self.ears) else []
        report = combine_ears(reports, itd_table)
        await self.store.save_metrics(report)
        await self.store.write_text(f"summary_{algo}.md", render_summary(report))
        logger.info("%s: NM %.2f dB, LSD %.2f dB", algo, report.nm_db, report.lsd_db)
        return {'command': 'evaluate', **report.to_dict()}

    async def cmd_report(self) -> Dict[str, Any]:
        """Consolidate every evaluated algorithm of the run into one comparison table."""
        names = self.store.metrics_names()
        if not names:
            raise ArtifactIOError("No evaluated runs found", self.store.root)
        order = {name: i for i, name in enumerate(Algorithms.ALL)}
        names.sort(key=lambda n: (order.get(n, len(order)), n))
        reports = [self.store.load_metrics(name) for name in names]

        await self.store.write_csv("report.csv", METRICS_HEADER, [metrics_row(r) for r in reports])
        await self.store.write_json("report.json", {'rows': [r.to_dict() for r in reports]})
        text = render_report(reports)
        await self.store.write_text("report.md", text)
        await self.store.write_text("report.html", markdown2.markdown(text, extras=["tables"]))
        logger.info("Report written for %d algorithms", len(reports))
        return {'command': 'report', 'algorithms': names,
                'table': format_csv(METRICS_HEADER, [metrics_row(r) for r in reports])}


def _itd_markdown(report: MetricsReport) -> List[str]:
    if not report.itd_table:
        return []
    lines = ["", f"### ITD ({report.algo})", "",
             "| Azimuth (deg) | True ITD (us) | Estimated ITD (us) | Abs. error (us) |",
             "|---:|---:|---:|---:|"]
    for row in report.itd_table:
        lines.append(f"| {row.azimuth_deg:g} | {row.itd_us_true:.1f} | "
                     f"{row.itd_us_est:.1f} | {row.abs_err_us:.1f} |")
    return lines


def render_summary(report: MetricsReport) -> str:
    """Markdown summary of one evaluated algorithm."""
    lines = [f"# {report.algo}", "",
             f"Band: {report.band[0]:g} to {report.band[1]:g} Hz, "
             f"{report.frames_evaluated} frames evaluated, {report.frames_excluded} excluded", "",
             "| Ear | NM (dB) | LSD (dB) |", "|---|---:|---:|"]
    for ear, values in sorted(report.per_ear.items()):
        lines.append(f"| {ear} | {values['nm_db']:.2f} | {values['lsd_db']:.2f} |")
    lines.append(f"| mean | {report.nm_db:.2f} | {report.lsd_db:.2f} |")
    if report.exact_match:
        lines += ["", "Estimates match the truth exactly (NM at its floor)."]
    lines += _itd_markdown(report)
    return "\n".join(lines) + "\n"


def render_report(reports: List[MetricsReport]) -> str:
    """Markdown comparison table over algorithms, followed by each ITD table."""
    lines = ["# Identification results", "",
             "| Algorithm | NM (dB) | LSD (dB) |", "|---|---:|---:|"]
    for r in reports:
        lines.append(f"| {r.algo} | {r.nm_db:.2f} | {r.lsd_db:.2f} |")
    for r in reports:
        lines += _itd_markdown(r)
    return "\n".join(lines) + "\n"
