"""
RotIR Application

A library and command-line tool that simulates continuous-rotation impulse
response measurement with a rotating loudspeaker array, identifies the
time-varying impulse responses with classical adaptive filters and a
trainable gated recurrent identifier, and scores the results.
"""

from pathlib import Path

__version__ = "0.2.0"
__author__ = "RotIR Team"
__description__ = "Time-varying impulse response identification for rotating speaker arrays"

# Application metadata
APP_NAME = "RotIR"
APP_VERSION = __version__
APP_AUTHOR = __author__
APP_DESCRIPTION = __description__


def get_default_output_dir() -> str:
    """
    Get the default directory for run outputs.

    Returns:
        Path to ./runs relative to the current working directory as a string
    """
    return str(Path.cwd() / "runs")


# Numerical constants
DEFAULT_SEED = 20240601
RECIPROCAL_POWER_EPS = 1e-12
LOG_LOSS_EPS = 1e-30
MAGNITUDE_FLOOR = 1e-12
NM_FLOOR_DB = -300.0
NLMS_EPS_PER_TAP = 1e-8
KALMAN_INITIAL_COVARIANCE = 1e-2

# Frequency band presets (Hz); None upper bound means Nyquist
BAND_PRESETS = {
    "full": (0.0, None),
    "experiment": (200.0, 17000.0),
}

# Ear tags used in file names and reports
EARS = ("left", "right")


class ExitCode:
    """Process exit codes of the command-line front end."""
    SUCCESS = 0
    UNEXPECTED = 1
    INVALID_CONFIG = 2
    NUMERICAL_FAILURE = 3
    IO_FAILURE = 4


class RunState:
    """Pipeline run state enumeration."""
    STARTING = "starting"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Algorithms:
    """Identifier names accepted by the configuration."""
    LMS = "lms"
    NLMS = "nlms"
    JO_NLMS = "jo_nlms"
    KALMAN = "kalman"
    DNN = "dnn"

    ALL = (LMS, NLMS, JO_NLMS, KALMAN, DNN)
    STREAMING = (LMS, NLMS, JO_NLMS, KALMAN)
