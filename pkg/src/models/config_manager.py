"""
Configuration Manager Module

Experiment configuration as a tree of dataclasses with defaults, JSON
loading, dot-notation overrides, rule-table validation and seed
derivation.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .. import BAND_PRESETS, DEFAULT_SEED, EARS, Algorithms, get_default_output_dir
from .errors import ArtifactIOError, ConfigValidationError, InvalidArgumentError
from .result_models import StorePolicy
from .scenario import RotationProfile, SynthKind, SynthParams
from .trainer import TrainerConfig

logger = logging.getLogger(__name__)

GRID_KIND = "grid"
SCENARIO_KINDS = tuple(k.value for k in SynthKind) + (GRID_KIND,)
EVALUATION_MODES = ("frames", "grid")

# Order of the per-concern child seeds; never reorder
SEED_CONCERNS = ("trajectory", "noise_left", "noise_right", "trainer")


@dataclass
class ScenarioConfig:
    """Ground-truth source: a synthetic generator or per-ear dataset grid files."""
    kind: str = SynthKind.FRACTIONAL_DELAY_PAN.value
    ears: List[str] = field(default_factory=lambda: list(EARS))
    grid_files: Dict[str, str] = field(default_factory=dict)
    speaker_rows: Optional[List[int]] = None
    speaker_offsets: Optional[List[float]] = None
    span_degrees: Optional[float] = None
    decay_taps: float = 4.0
    variation: float = 0.5
    bandwidth_hz: float = 2.0
    base_delay: float = 6.0
    delay_slope: float = 0.0
    speaker_delay_step: float = 0.5
    sinc_half_width: float = 4.0
    gain: float = 1.0


@dataclass
class RotationConfig:
    """Constant-speed rotation."""
    theta0: float = 0.0
    omega: float = 45.0
    sample_rate: float = 44100.0

    def profile(self) -> RotationProfile:
        return RotationProfile(theta0=self.theta0, omega=self.omega, sample_rate=self.sample_rate)


@dataclass
class DimensionConfig:
    """Sizes: speakers S, true taps K, estimated taps K~, length N, optional period P."""
    S: int = 2
    K: int = 16
    K_tilde: int = 16
    N: int = 8000
    P: Optional[int] = None

    @property
    def period(self) -> int:
        return self.S * self.K_tilde


@dataclass
class NoiseConfig:
    """Additive noise, as a variance or a target SNR (the SNR wins when both are set)."""
    variance: Optional[float] = 0.01
    snr_db: Optional[float] = None


@dataclass
class AlgorithmConfig:
    """Identifier choice and its hyperparameters."""
    name: str = Algorithms.NLMS
    hyperparameters: Dict[str, Any] = field(default_factory=dict)
    segments: int = 1


@dataclass
class EvaluationConfig:
    """Scoring setup."""
    mode: str = "frames"
    grid_step_deg: float = 30.0
    snapshot_stride: int = 100
    band: Any = "full"
    fft_size: Optional[int] = None
    max_lag: Optional[int] = None
    itd_speaker: int = 0
    window_ms: Optional[List[float]] = None
    otf_file: Optional[str] = None
    otf_reg: float = 1e-6

    def grid(self) -> List[float]:
        """Target azimuths 0, step, 2*step, ... below 360."""
        count = int(math.floor(360.0 / self.grid_step_deg + 1e-9))
        return [float(i * self.grid_step_deg) for i in range(count)]

    def window_seconds(self) -> Optional[Tuple[float, float]]:
        if self.window_ms is None:
            return None
        return (self.window_ms[0] / 1000.0, self.window_ms[1] / 1000.0)


@dataclass
class RuntimeConfig:
    """Process-level settings."""
    seed: int = DEFAULT_SEED
    workers: Optional[int] = None
    output_dir: str = field(default_factory=get_default_output_dir)
    log_level: str = "INFO"
    export_wav: bool = False


@dataclass
class ExperimentConfig:
    """Complete experiment configuration."""
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    rotation: RotationConfig = field(default_factory=RotationConfig)
    dimensions: DimensionConfig = field(default_factory=DimensionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def N(self) -> int:
        """Sequence length, derived from the rotation span when one is configured."""
        if self.scenario.span_degrees is not None:
            return self.rotation.profile().samples_for_span(self.scenario.span_degrees)
        return self.dimensions.N

    def synth_params(self, ear: str, seed: int) -> SynthParams:
        """Synthetic generator parameters for one ear; the right ear mirrors the delay slope."""
        sc = self.scenario
        return SynthParams(
            N=self.N, S=self.dimensions.S, K=self.dimensions.K,
            rotation=self.rotation.profile(), seed=seed,
            decay_taps=sc.decay_taps, variation=sc.variation, bandwidth_hz=sc.bandwidth_hz,
            base_delay=sc.base_delay, delay_slope=sc.delay_slope,
            speaker_delay_step=sc.speaker_delay_step,
            ear_sign=1.0 if ear == EARS[0] else -1.0,
            sinc_half_width=sc.sinc_half_width, gain=sc.gain
        )

    def store_policy(self) -> StorePolicy:
        """Snapshots kept by identifiers: strided frames or the azimuth grid."""
        if self.evaluation.mode == "grid":
            return StorePolicy.at_azimuths(self.evaluation.grid())
        return StorePolicy.strided(self.evaluation.snapshot_stride)

    def seeds(self) -> Dict[str, int]:
        """
        Child seeds per concern derived from runtime.seed.

        Returns:
            Mapping concern -> 32-bit seed, independent of worker count
        """
        children = np.random.SeedSequence(self.runtime.seed).spawn(len(SEED_CONCERNS))
        return {
            name: int(child.generate_state(1, dtype=np.uint32)[0])
            for name, child in zip(SEED_CONCERNS, children)
        }

    def noise_seed(self, ear: str) -> int:
        return self.seeds()[f"noise_{ear}"]

    def trajectory_seed(self, ear: str) -> int:
        """Per-ear child of the trajectory seed."""
        children = np.random.SeedSequence(self.seeds()["trajectory"]).spawn(len(EARS))
        return int(children[EARS.index(ear)].generate_state(1, dtype=np.uint32)[0])


def _is_int(x: Any) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool) \
        and math.isfinite(float(x))


def _optional(rule: Callable[[Any], bool]) -> Callable[[Any], bool]:
    return lambda x: x is None or rule(x)


class ConfigManager:
    """
    Experiment configuration manager.

    Builds an ExperimentConfig from defaults, a JSON file and dot-notation
    overrides, and validates it against per-key rules and cross-field
    rules, reporting every problem at once.
    """

    def __init__(self, validate_on_load: bool = True, check_files: bool = True):
        """
        Initialize ConfigManager.

        Args:
            validate_on_load: Whether to validate when loading
            check_files: Whether referenced files must exist
        """
        self.validate_on_load = validate_on_load
        self.check_files = check_files
        self._validation_rules = self._setup_validation_rules()

    def _setup_validation_rules(self) -> Dict[str, Callable[[Any], bool]]:
        """Set up validation rules for configuration keys."""
        positive_int = lambda x: _is_int(x) and x >= 1  # noqa: E731
        return {
            'scenario.kind': lambda x: x in SCENARIO_KINDS,
            'scenario.span_degrees': _optional(lambda x: _is_number(x) and x > 0),
            'scenario.decay_taps': lambda x: _is_number(x) and x > 0,
            'scenario.variation': lambda x: _is_number(x) and x >= 0,
            'scenario.bandwidth_hz': lambda x: _is_number(x) and x > 0,
            'scenario.base_delay': lambda x: _is_number(x) and x >= 0,
            'scenario.delay_slope': _is_number,
            'scenario.speaker_delay_step': _is_number,
            'scenario.sinc_half_width': lambda x: _is_number(x) and x > 0,
            'scenario.gain': _is_number,
            'rotation.theta0': _is_number,
            'rotation.omega': lambda x: _is_number(x) and x >= 0,
            'rotation.sample_rate': lambda x: _is_number(x) and x > 0,
            'dimensions.S': positive_int,
            'dimensions.K': positive_int,
            'dimensions.K_tilde': positive_int,
            'dimensions.N': positive_int,
            'dimensions.P': _optional(positive_int),
            'noise.variance': _optional(lambda x: _is_number(x) and x >= 0),
            'noise.snr_db': _optional(_is_number),
            'algorithm.name': lambda x: x in Algorithms.ALL,
            'algorithm.segments': positive_int,
            'trainer.lr': lambda x: _is_number(x) and x > 0,
            'trainer.beta1': lambda x: _is_number(x) and 0 <= x < 1,
            'trainer.beta2': lambda x: _is_number(x) and 0 <= x < 1,
            'trainer.adam_eps': lambda x: _is_number(x) and x > 0,
            'trainer.max_epochs': positive_int,
            'trainer.convergence_tol': lambda x: _is_number(x) and x >= 0,
            'trainer.patience': positive_int,
            'trainer.clip_norm': _optional(lambda x: _is_number(x) and x > 0),
            'trainer.init_jitter': lambda x: _is_number(x) and x >= 0,
            'trainer.update_fraction': lambda x: _is_number(x) and 0 < x <= 1,
            'trainer.log_every': lambda x: _is_int(x) and x >= 0,
            'evaluation.mode': lambda x: x in EVALUATION_MODES,
            'evaluation.grid_step_deg': lambda x: _is_number(x) and 0 < x <= 360,
            'evaluation.snapshot_stride': positive_int,
            'evaluation.fft_size': _optional(positive_int),
            'evaluation.max_lag': _optional(lambda x: _is_int(x) and x >= 0),
            'evaluation.itd_speaker': lambda x: _is_int(x) and x >= 0,
            'evaluation.otf_reg': lambda x: _is_number(x) and x >= 0,
            'runtime.seed': lambda x: _is_int(x) and x >= 0,
            'runtime.workers': _optional(positive_int),
            'runtime.log_level': lambda x: str(x).upper() in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'),
        }

    def load(self, path: Optional[str] = None,
             overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
        """
        Load a configuration.

        Args:
            path: JSON file (defaults only when None)
            overrides: Dot-notation overrides applied after the file

        Returns:
            ExperimentConfig

        Raises:
            ArtifactIOError: If the file cannot be read
            ConfigValidationError: On unknown keys, malformed JSON or invalid values
        """
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                with open(path, 'r', encoding='utf-8') as f:
                    data = json.load(f)
            except FileNotFoundError as e:
                raise ConfigValidationError([f"Configuration file not found: {path}"]) from e
            except json.JSONDecodeError as e:
                raise ConfigValidationError([f"Malformed JSON in {path}: {e}"]) from e
            except OSError as e:
                raise ArtifactIOError(f"Cannot read configuration ({e})", path) from e
            if not isinstance(data, dict):
                raise ConfigValidationError([f"Configuration root must be an object: {path}"])

        flat = self._flatten_dict(data)
        flat.update(overrides or {})
        config = self._merge_with_defaults(flat)

        if self.validate_on_load:
            self.validate(config)

        logger.info("Configuration loaded%s", f" from {path}" if path else "")
        return config

    def from_dict(self, data: Mapping[str, Any]) -> ExperimentConfig:
        """Build and validate a configuration from a nested dictionary."""
        config = self._merge_with_defaults(self._flatten_dict(dict(data)))
        if self.validate_on_load:
            self.validate(config)
        return config

    def _flatten_dict(self, data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
        """Flatten nested sections to dot keys; free-form dict fields stay whole."""
        flat: Dict[str, Any] = {}
        for key, value in data.items():
            full_key = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict) and prefix == "" and key in _section_names():
                flat.update(self._flatten_dict(value, full_key))
            else:
                flat[full_key] = value
        return flat

    def _merge_with_defaults(self, overrides: Mapping[str, Any]) -> ExperimentConfig:
        """Merge override values with default settings, collecting unknown keys."""
        config = ExperimentConfig()
        problems = []
        for key, value in overrides.items():
            if not self._set_nested_value(config, key, value):
                problems.append(f"Unknown configuration key '{key}'")
        if problems:
            raise ConfigValidationError(problems)
        return config

    def _set_nested_value(self, obj: Any, key: str, value: Any) -> bool:
        """Set value using dot notation key; False when the key does not exist."""
        parts = key.split('.')
        current = obj
        for part in parts[:-1]:
            if not is_dataclass(current) or part not in _field_names(current):
                return False
            current = getattr(current, part)
        final_key = parts[-1]
        if not is_dataclass(current) or final_key not in _field_names(current) \
                or is_dataclass(getattr(current, final_key)):
            return False
        setattr(current, final_key, value)
        return True

    def _flatten_config(self, config: ExperimentConfig) -> Dict[str, Any]:
        flat = {}
        for section, values in asdict(config).items():
            for key, value in values.items():
                flat[f"{section}.{key}"] = value
        return flat

    def validate_value(self, key: str, value: Any) -> bool:
        """Check one value against its rule (keys without a rule always pass)."""
        rule = self._validation_rules.get(key)
        if rule is None:
            return True
        try:
            return bool(rule(value))
        except Exception as e:
            logger.debug("Validation error for '%s': %s", key, e)
            return False

    def validate(self, config: ExperimentConfig) -> None:
        """
        Validate every value and the cross-field rules.

        Raises:
            ConfigValidationError: Listing every problem found
        """
        problems = [
            f"Invalid value for '{key}': {value!r}"
            for key, value in self._flatten_config(config).items()
            if not self.validate_value(key, value)
        ]
        problems.extend(self._cross_field_problems(config))
        if problems:
            raise ConfigValidationError(problems)

    def _cross_field_problems(self, config: ExperimentConfig) -> List[str]:
        problems = []
        dims = config.dimensions
        if _is_int(dims.S) and _is_int(dims.K_tilde):
            if dims.P is not None and dims.P != dims.S * dims.K_tilde:
                problems.append(
                    f"Sweep period P={dims.P} must equal S*K~ = {dims.S * dims.K_tilde}"
                )
            if dims.S * dims.K_tilde % 2:
                problems.append(f"Sweep period S*K~ = {dims.S * dims.K_tilde} must be even")

        sc = config.scenario
        if not sc.ears or any(ear not in EARS for ear in sc.ears) or len(set(sc.ears)) != len(sc.ears):
            problems.append(f"scenario.ears must be a non-empty subset of {list(EARS)}")
        if sc.kind == GRID_KIND:
            for ear in sc.ears:
                grid_file = sc.grid_files.get(ear)
                if not grid_file:
                    problems.append(f"scenario.grid_files has no entry for ear '{ear}'")
                elif self.check_files and not Path(grid_file).is_file():
                    problems.append(f"Grid file does not exist: {grid_file}")
        if sc.speaker_rows is not None and len(sc.speaker_rows) != dims.S:
            problems.append(f"scenario.speaker_rows needs {dims.S} entries")
        if sc.speaker_offsets is not None and len(sc.speaker_offsets) != dims.S:
            problems.append(f"scenario.speaker_offsets needs {dims.S} entries")
        if sc.span_degrees is not None and config.rotation.omega == 0:
            problems.append("scenario.span_degrees needs a nonzero rotation.omega")

        try:
            config.rotation.profile()
        except InvalidArgumentError as e:
            problems.append(str(e))
        try:
            TrainerConfig(**asdict(config.trainer))
        except (InvalidArgumentError, TypeError) as e:
            problems.append(f"trainer: {e}")

        ev = config.evaluation
        if isinstance(ev.band, str):
            if ev.band not in BAND_PRESETS:
                problems.append(f"Unknown band preset '{ev.band}'")
        elif not (isinstance(ev.band, (list, tuple)) and len(ev.band) == 2):
            problems.append("evaluation.band must be a preset name or [f_lo, f_hi]")
        else:
            lo, hi = ev.band
            nyquist = config.rotation.sample_rate / 2.0 if _is_number(config.rotation.sample_rate) else None
            if not _is_number(lo) or (hi is not None and not _is_number(hi)):
                problems.append("evaluation.band bounds must be numbers")
            elif hi is not None and (lo >= hi or (nyquist is not None and hi > nyquist)):
                problems.append(f"evaluation.band ({lo}, {hi}) is not within (0, fs/2]")
        if ev.window_ms is not None:
            if len(ev.window_ms) != 2 or not 0 <= ev.window_ms[0] < ev.window_ms[1]:
                problems.append("evaluation.window_ms must be [t0, t1] with 0 <= t0 < t1")
        if ev.otf_file is not None and self.check_files and not Path(ev.otf_file).is_file():
            problems.append(f"OTF file does not exist: {ev.otf_file}")
        if _is_int(ev.itd_speaker) and _is_int(dims.S) and ev.itd_speaker >= dims.S:
            problems.append(f"evaluation.itd_speaker must be < S={dims.S}")

        algo = config.algorithm
        if not isinstance(algo.hyperparameters, dict):
            problems.append("algorithm.hyperparameters must be an object")
        if algo.name in Algorithms.STREAMING and algo.segments != 1:
            problems.append("Only the dnn identifier is segmented; set algorithm.segments to 1")
        return problems

    def save(self, config: ExperimentConfig, path: str) -> None:
        """Write the configuration as JSON."""
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        except OSError as e:
            raise ArtifactIOError(f"Cannot write configuration ({e})", path) from e


def _section_names() -> Tuple[str, ...]:
    return tuple(f.name for f in fields(ExperimentConfig))


def _field_names(obj: Any) -> Tuple[str, ...]:
    return tuple(f.name for f in fields(obj))


def parse_override(text: str) -> Tuple[str, Any]:
    """
    Parse a "section.key=value" command-line override.

    The value is read as JSON when possible, otherwise kept as a string.

    Raises:
        ConfigValidationError: If there is no '='
    """
    if '=' not in text:
        raise ConfigValidationError([f"Override must look like key=value, got '{text}'"])
    key, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
