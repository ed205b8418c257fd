"""
Artifact Store Module

Reads and writes run artifacts under one run directory: raw little-endian
float64 payloads with JSON sidecars (shape, dtype, SHA-256, metadata),
CSV tables, float32 WAV exports, identifier checkpoints and metric
reports. Writes are asynchronous (aiofiles); reads are synchronous.
"""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import aiofiles
import numpy as np
import soundfile as sf

from ..utils.hash_utils import calculate_array_hash, calculate_file_hash
from .dnn_model import LAYOUT_VERSION, DnnParams
from .errors import ArtifactIOError, InvalidArgumentError
from .result_models import EpochRecord, IdentificationResult, MetricsReport
from .scenario import IRDatasetGrid, Recording
from .signals import ExcitationBank, PerfectSweep, build_excitation_bank

logger = logging.getLogger(__name__)

PAYLOAD_SUFFIX = ".f64"
SIDECAR_SUFFIX = ".json"
PAYLOAD_DTYPE = "<f8"

ITD_HEADER = ("azimuth_deg", "itd_us_true", "itd_us_est", "abs_err_us")
EPOCH_HEADER = ("epoch", "loss", "wall_time_s")
ETRACE_HEADER = ("n", "e", "ise")
METRICS_HEADER = ("algo", "nm_db", "lsd_db", "band_lo_hz", "band_hi_hz",
                  "frames_evaluated", "frames_excluded", "exact_match")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")


def dumps(data: Any) -> str:
    """Deterministic JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def format_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """CSV text with floats written via repr."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buffer.getvalue()


class ArtifactStore:
    """
    Artifact I/O rooted at a run directory.

    Every array payload <stem>.f64 has a sidecar <stem>.json; loading
    verifies shape and digest.
    """

    def __init__(self, root):
        """
        Initialize the store.

        Args:
            root: Run directory (created when missing)

        Raises:
            ArtifactIOError: If the directory cannot be created
        """
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactIOError(f"Cannot create run directory ({e})", self.root) from e

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, stem: str) -> bool:
        return self.path(stem + SIDECAR_SUFFIX).is_file()

    # Low-level writers

    async def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        try:
            async with aiofiles.open(target, 'w', encoding='utf-8', newline='') as f:
                await f.write(text)
        except OSError as e:
            raise ArtifactIOError(f"Cannot write artifact ({e})", target) from e
        return target

    async def write_bytes(self, name: str, data: bytes) -> Path:
        target = self.path(name)
        try:
            async with aiofiles.open(target, 'wb') as f:
                await f.write(data)
        except OSError as e:
            raise ArtifactIOError(f"Cannot write artifact ({e})", target) from e
        return target

    async def write_json(self, name: str, data: Any) -> Path:
        return await self.write_text(name, dumps(data))

    async def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return await self.write_text(name, format_csv(header, rows))

    async def write_array(self, stem: str, array: np.ndarray,
                          metadata: Optional[Dict[str, Any]] = None) -> Path:
        """
        Write a float64 payload and its sidecar.

        Args:
            stem: File stem inside the run directory
            array: Array to store (C order, little-endian float64)
            metadata: Domain metadata merged into the sidecar

        Returns:
            Payload path
        """
        data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)
        sidecar = {
            'shape': list(data.shape),
            'dtype': PAYLOAD_DTYPE,
            'sha256': calculate_array_hash(data),
            'metadata': metadata or {},
        }
        payload = await self.write_bytes(stem + PAYLOAD_SUFFIX, data.tobytes())
        await self.write_json(stem + SIDECAR_SUFFIX, sidecar)
        logger.debug("Wrote %s %s", payload.name, data.shape)
        return payload

    async def write_wav(self, name: str, signal: np.ndarray, sample_rate: float) -> Path:
        """Float32 WAV export for listening; not used for computation."""
        target = self.path(name)
        try:
            sf.write(str(target), np.asarray(signal, dtype=np.float32), int(round(sample_rate)),
                     format="WAV", subtype="FLOAT")
        except (OSError, RuntimeError) as e:
            raise ArtifactIOError(f"Cannot write WAV ({e})", target) from e
        return target

    # Low-level readers

    def read_json(self, name: str) -> Any:
        target = self.path(name)
        try:
            with open(target, 'r', encoding='utf-8') as f:
                return json.load(f)
        except FileNotFoundError as e:
            raise ArtifactIOError("Missing artifact", target) from e
        except (OSError, json.JSONDecodeError) as e:
            raise ArtifactIOError(f"Cannot read artifact ({e})", target) from e

    def read_array(self, stem: str, verify: bool = True) -> Tuple[np.ndarray, Dict[str, Any]]:
        """
        Read a payload and its sidecar metadata.

        Raises:
            ArtifactIOError: Missing files, size mismatch or digest mismatch
        """
        sidecar = self.read_json(stem + SIDECAR_SUFFIX)
        target = self.path(stem + PAYLOAD_SUFFIX)
        try:
            data = np.fromfile(target, dtype=sidecar.get('dtype', PAYLOAD_DTYPE))
        except FileNotFoundError as e:
            raise ArtifactIOError("Missing payload", target) from e
        except OSError as e:
            raise ArtifactIOError(f"Cannot read payload ({e})", target) from e
        shape = tuple(sidecar['shape'])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ArtifactIOError(f"Payload holds {data.size} values, sidecar says {shape}", target)
        if verify and calculate_file_hash(target) != sidecar.get('sha256'):
            raise ArtifactIOError("Payload digest does not match its sidecar", target)
        data = data.reshape(shape).astype(np.float64)
        return data, sidecar.get('metadata', {})

    def read_csv(self, name: str) -> List[Dict[str, str]]:
        target = self.path(name)
        try:
            with open(target, 'r', encoding='utf-8', newline='') as f:
                return list(csv.DictReader(f))
        except FileNotFoundError as e:
            raise ArtifactIOError("Missing artifact", target) from e

    # Excitation

    async def save_sweep(self, sweep: PerfectSweep, sample_rate: Optional[float] = None,
                         export_wav: bool = False) -> Path:
        path = await self.write_array("sweep", sweep.samples, sweep.to_dict())
        if export_wav and sample_rate:
            await self.write_wav("sweep.wav", sweep.samples, sample_rate)
        return path

    async def save_bank(self, bank: ExcitationBank, export_wav: bool = False) -> Path:
        """Store the sweep and the bank rows; the WAV export has one channel per speaker."""
        await self.save_sweep(bank.sweep, bank.sample_rate, export_wav)
        path = await self.write_array("bank", bank.rows, bank.to_dict())
        if export_wav and bank.sample_rate:
            await self.write_wav("bank.wav", bank.rows.T, bank.sample_rate)
        return path

    def load_bank(self) -> ExcitationBank:
        """Rebuild the bank from the stored sweep and check it against the stored rows."""
        samples, sweep_meta = self.read_array("sweep")
        rows, meta = self.read_array("bank")
        sweep = PerfectSweep(period=int(sweep_meta['P']), samples=samples,
                             scaling=sweep_meta.get('scaling', 'unit_power'))
        bank = build_excitation_bank(sweep, int(meta['S']), int(meta['K_tilde']), int(meta['N']),
                                     sample_rate=meta.get('sample_rate'))
        if not np.array_equal(bank.rows, rows):
            raise ArtifactIOError("Stored bank rows differ from the rebuilt bank", self.path("bank.f64"))
        return bank

    # Recordings and truth

    async def save_recording(self, recording: Recording, export_wav: bool = False) -> Path:
        ear = recording.ear or "mono"
        path = await self.write_array(f"recording_{ear}", recording.y, recording.to_dict())
        if export_wav and recording.sample_rate:
            await self.write_wav(f"recording_{ear}.wav", recording.y, recording.sample_rate)
        return path

    def load_recording(self, ear: str) -> Recording:
        y, meta = self.read_array(f"recording_{ear}")
        return Recording(
            y=y, noise_variance=float(meta['noise_variance']), snr_db=meta.get('snr_db'),
            seed=int(meta['seed']), sample_rate=meta.get('sample_rate'),
            clean_power=float(meta.get('clean_power', 0.0)), ear=meta.get('ear')
        )

    async def save_truth(self, kind: str, ear: str, indices: np.ndarray, frames: np.ndarray,
                         metadata: Dict[str, Any]) -> Path:
        """True IRs (len, S, K) at the given time indices; kind is 'frames' or 'grid'."""
        meta = {**metadata, 'indices': np.asarray(indices, dtype=np.int64).tolist(), 'ear': ear}
        return await self.write_array(f"truth_{kind}_{ear}", frames, meta)

    def load_truth(self, kind: str, ear: str) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
        frames, meta = self.read_array(f"truth_{kind}_{ear}")
        return np.asarray(meta['indices'], dtype=np.int64), frames, meta

    # Identification results

    @staticmethod
    def result_stem(algo: str, ear: Optional[str]) -> str:
        return f"result_{algo}_{ear or 'mono'}"

    async def save_result(self, result: IdentificationResult) -> Path:
        stem = self.result_stem(result.algo, result.ear)
        await self.write_array(stem + "_errors", result.errors)
        await self.write_array(stem + "_snapshots", result.snapshots)
        errors = result.errors.tolist()
        await self.write_csv(stem + "_etrace.csv", ETRACE_HEADER,
                             ((n, e, e * e) for n, e in enumerate(errors)))
        return await self.write_json(stem + SIDECAR_SUFFIX, result.to_dict())

    def load_result(self, algo: str, ear: Optional[str]) -> IdentificationResult:
        stem = self.result_stem(algo, ear)
        meta = self.read_json(stem + SIDECAR_SUFFIX)
        errors, _ = self.read_array(stem + "_errors")
        snapshots, _ = self.read_array(stem + "_snapshots")
        return IdentificationResult.from_dict(meta, errors, snapshots)

    # Checkpoints

    async def save_checkpoint(self, stem: str, params: DnnParams,
                              metadata: Optional[Dict[str, Any]] = None) -> Path:
        """Flat concatenation of every tensor in checkpoint order, with a layout header."""
        header = {
            'layout_version': LAYOUT_VERSION,
            'd': params.d,
            'fields': [[name, list(value.shape)] for name, value in params.items()],
            **(metadata or {}),
        }
        flat = np.concatenate([value.reshape(-1) for _, value in params.items()])
        return await self.write_array(stem, flat, header)

    def load_checkpoint(self, stem: str) -> Tuple[DnnParams, Dict[str, Any]]:
        """
        Load a checkpoint.

        Raises:
            ArtifactIOError: On digest or layout mismatch
        """
        flat, header = self.read_array(stem)
        if header.get('layout_version') != LAYOUT_VERSION:
            raise ArtifactIOError(
                f"Checkpoint layout {header.get('layout_version')} is not {LAYOUT_VERSION}",
                self.path(stem + PAYLOAD_SUFFIX)
            )
        tensors = {}
        offset = 0
        for name, shape in header['fields']:
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        if offset != flat.size or list(tensors) != list(DnnParams.field_names()):
            raise ArtifactIOError("Checkpoint fields do not match the parameter layout",
                                  self.path(stem + PAYLOAD_SUFFIX))
        try:
            return DnnParams(**tensors), header
        except InvalidArgumentError as e:
            raise ArtifactIOError(f"Checkpoint tensors are malformed ({e})",
                                  self.path(stem + PAYLOAD_SUFFIX)) from e

    async def save_epoch_log(self, name: str, records: Sequence[EpochRecord]) -> Path:
        return await self.write_csv(name, EPOCH_HEADER, (r.to_row() for r in records))

    # Datasets

    async def save_grid(self, stem: str, grid: IRDatasetGrid) -> Path:
        return await self.write_array(stem, grid.irs, {
            'azimuths': grid.azimuths.tolist(), 'sample_rate': grid.sample_rate
        })

    @staticmethod
    def load_grid(path) -> IRDatasetGrid:
        """Load a dataset grid from a payload path or its stem."""
        path = Path(path)
        stem = path.with_suffix("") if path.suffix in (PAYLOAD_SUFFIX, SIDECAR_SUFFIX) else path
        irs, meta = ArtifactStore(stem.parent).read_array(stem.name)
        return IRDatasetGrid(azimuths=np.asarray(meta['azimuths'], dtype=np.float64), irs=irs,
                             sample_rate=float(meta['sample_rate']))

    @staticmethod
    def load_otf(path) -> np.ndarray:
        """Load an output-transfer-function IR (one-dimensional payload)."""
        path = Path(path)
        stem = path.with_suffix("") if path.suffix in (PAYLOAD_SUFFIX, SIDECAR_SUFFIX) else path
        otf, _ = ArtifactStore(stem.parent).read_array(stem.name)
        if otf.ndim != 1:
            raise ArtifactIOError("OTF payload must be one-dimensional", path)
        return otf

    # Reports

    async def save_metrics(self, report: MetricsReport) -> Path:
        algo = report.algo or "unknown"
        await self.write_csv(f"metrics_{algo}.csv", METRICS_HEADER, [metrics_row(report)])
        if report.itd_table:
            await self.write_csv(f"itd_{algo}.csv", ITD_HEADER, (r.to_row() for r in report.itd_table))
        return await self.write_json(f"metrics_{algo}.json", report.to_dict())

    def load_metrics(self, algo: str) -> MetricsReport:
        return MetricsReport.from_dict(self.read_json(f"metrics_{algo}.json"))

    def metrics_names(self) -> List[str]:
        """Algorithms with a stored metrics report, sorted."""
        return sorted(p.stem[len("metrics_"):] for p in self.root.glob("metrics_*.json"))


def metrics_row(report: MetricsReport) -> Tuple[Any, ...]:
    return (report.algo, float(report.nm_db), float(report.lsd_db), float(report.band[0]),
            float(report.band[1]), report.frames_evaluated, report.frames_excluded,
            int(report.exact_match))
