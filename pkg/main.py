"""
Main Application Entry Point

Command-line front end of the identification pipeline:

    rotir {sweep|synth|identify|evaluate|report} [options]

Results are printed to stdout as JSON; logs go to stderr and to
<output_dir>/logs. Exit codes: 0 success, 2 invalid arguments or
configuration, 3 numerical failure, 4 I/O failure, 1 anything else.
"""

import argparse
import asyncio
import signal
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from src import APP_NAME, APP_VERSION, ExitCode, RunState
from src.controllers.pipeline_controller import COMMANDS, PipelineController, exit_code_for
from src.models.artifact_store import dumps
from src.models.config_manager import ConfigManager, parse_override
from src.models.errors import IdentificationError
from src.utils.logging_config import get_logger, setup_logging

logger = get_logger(__name__)


class Application:
    """
    One CLI invocation: load the configuration, configure logging and run
    a single pipeline command.
    """

    def __init__(self, args: argparse.Namespace):
        """Initialize the application from parsed arguments."""
        self.args = args
        self.state = RunState.STARTING
        self.controller: Optional[PipelineController] = None
        self._task: Optional[asyncio.Task] = None

    def _overrides(self) -> Dict[str, Any]:
        overrides = dict(parse_override(text) for text in self.args.set or [])
        if self.args.out is not None:
            overrides['runtime.output_dir'] = str(self.args.out)
        if self.args.workers is not None:
            overrides['runtime.workers'] = self.args.workers
        if self.args.seed is not None:
            overrides['runtime.seed'] = self.args.seed
        if self.args.algo is not None:
            overrides['algorithm.name'] = self.args.algo
        return overrides

    def initialize(self) -> None:
        """
        Load the configuration and attach file logging to the run directory.

        Raises:
            ConfigValidationError: On invalid configuration or overrides
        """
        config = ConfigManager().load(self.args.config, self._overrides())
        log_level = "DEBUG" if self.args.debug else (self.args.log_level or config.runtime.log_level)
        run_dir = Path(config.runtime.output_dir)
        setup_logging(
            log_dir=run_dir / "logs",
            log_level=log_level,
            enable_console=not self.args.quiet,
            enable_json=True,
            context={'run_id': run_dir.name, 'subcommand': self.args.command}
        )
        self.controller = PipelineController(config)
        logger.info("Starting %s v%s: %s in %s", APP_NAME, APP_VERSION, self.args.command, run_dir)

    def _setup_signal_handlers(self) -> None:
        """Cancel the running command on SIGINT/SIGTERM."""
        loop = asyncio.get_running_loop()
        for signum in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(signum, self._signal_handler, signum)
            except (NotImplementedError, RuntimeError):
                # Not supported on this platform's loop
                pass

    def _signal_handler(self, signum: int) -> None:
        logger.info("Received signal %d, cancelling %s", signum, self.args.command)
        if self._task is not None:
            self._task.cancel()

    async def run(self) -> int:
        """
        Run the command.

        Returns:
            Process exit code
        """
        try:
            self.initialize()
        except IdentificationError as e:
            logger.error("%s", e)
            return exit_code_for(e)

        self._setup_signal_handlers()
        self.state = RunState.RUNNING
        self._task = asyncio.ensure_future(self.controller.execute(self.args.command))
        try:
            code, summary = await self._task
        except asyncio.CancelledError:
            logger.warning("%s cancelled", self.args.command)
            self.state = RunState.FAILED
            return ExitCode.UNEXPECTED

        self.state = self.controller.state
        stream = sys.stdout if code == ExitCode.SUCCESS else sys.stderr
        stream.write(dumps(summary))
        return code


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        prog="rotir",
        description=f"{APP_NAME} v{APP_VERSION} - time-varying impulse response identification"
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", "-c", help="Experiment configuration (JSON)")
    parser.add_argument("--out", "-o", type=Path, help="Run directory (overrides runtime.output_dir)")
    parser.add_argument("--workers", "-j", type=int, help="Concurrent jobs (overrides runtime.workers)")
    parser.add_argument("--seed", type=int, help="Master seed (overrides runtime.seed)")
    parser.add_argument("--algo", help="Identifier name (overrides algorithm.name)")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="Dot-notation override, e.g. --set dimensions.N=16000 (repeatable)"
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Set logging level (overrides runtime.log_level)"
    )
    parser.add_argument("--quiet", "-q", action="store_true", help="No console logging")
    return parser.parse_args(argv)


async def main(argv: Optional[List[str]] = None) -> int:
    """
    Main application entry point.

    Returns:
        Exit code
    """
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        # argparse exits with 2 on usage errors and 0 for --help/--version
        return int(e.code or 0)

    setup_logging(log_level="DEBUG" if args.debug else (args.log_level or "INFO"),
                  enable_console=not args.quiet)
    app = Application(args)
    try:
        return await app.run()
    except Exception as e:
        logger.exception("Fatal error: %s", e)
        return ExitCode.UNEXPECTED


def run_app(argv: Optional[List[str]] = None) -> int:
    """Synchronous entry point."""
    try:
        return asyncio.run(main(argv))
    except KeyboardInterrupt:
        print("Interrupted", file=sys.stderr)
        return ExitCode.UNEXPECTED


if __name__ == "__main__":
    sys.exit(run_app())
