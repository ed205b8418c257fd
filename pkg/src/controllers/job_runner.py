"""
Job Runner for Bounded Concurrent Pipeline Work

Runs named, independent jobs (one per ear, one per training segment) on a
process pool through asyncio, with a concurrency limit, status tracking,
timings and results returned in submission order.
"""

import asyncio
import logging
import time
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import psutil

logger = logging.getLogger(__name__)


class JobStatus(Enum):
    """Status of a job."""
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class Job:
    """A named call of a module-level function."""
    name: str
    func: Callable[..., Any]
    args: Tuple[Any, ...] = ()
    kwargs: Dict[str, Any] = field(default_factory=dict)
    status: JobStatus = JobStatus.QUEUED
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    error: Optional[BaseException] = None

    @property
    def duration(self) -> Optional[float]:
        if self.started_at is None or self.finished_at is None:
            return None
        return self.finished_at - self.started_at


def default_workers() -> int:
    """Physical core count, at least 1."""
    return max(1, psutil.cpu_count(logical=False) or 1)


class JobRunner:
    """
    Bounded concurrent job execution.

    With workers == 1 jobs run inline in submission order; otherwise they
    run on a process pool, at most `workers` at a time. Either way results
    come back in submission order, so outputs do not depend on the worker
    count.
    """

    def __init__(self, workers: Optional[int] = None, executor: Optional[Executor] = None):
        """
        Initialize the runner.

        Args:
            workers: Concurrency limit (physical core count when None)
            executor: Executor to use instead of an owned process pool
        """
        self.workers = workers or default_workers()
        if self.workers < 1:
            raise ValueError(f"Worker count must be >= 1, got {self.workers}")
        self._executor = executor
        self._owns_executor = executor is None
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._jobs: List[Job] = []

    @property
    def inline(self) -> bool:
        return self.workers == 1 and self._executor is None

    async def __aenter__(self) -> 'JobRunner':
        return self

    async def __aexit__(self, exc_type, exc, tb) -> None:
        await self.shutdown()

    def _get_executor(self) -> Executor:
        if self._executor is None:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        return self._executor

    async def _run_job(self, job: Job) -> Any:
        async with self._semaphore:
            job.status = JobStatus.RUNNING
            job.started_at = time.perf_counter()
            logger.debug("Job %s started", job.name)
            try:
                if self.inline:
                    result = job.func(*job.args, **job.kwargs)
                else:
                    loop = asyncio.get_running_loop()
                    result = await loop.run_in_executor(
                        self._get_executor(), _call, job.func, job.args, job.kwargs
                    )
            except Exception as e:
                job.status = JobStatus.FAILED
                job.error = e
                logger.error("Job %s failed: %s", job.name, e)
                raise
            finally:
                job.finished_at = time.perf_counter()
            job.status = JobStatus.COMPLETED
            logger.debug("Job %s completed in %.3f s", job.name, job.duration)
            return result

    async def run_all(self, jobs: Sequence[Job]) -> List[Any]:
        """
        Run jobs and return their results in submission order.

        Every job runs to completion; afterwards the first failure in
        submission order is re-raised.

        Args:
            jobs: Jobs to run

        Returns:
            Results, one per job
        """
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(self.workers)
        self._jobs.extend(jobs)
        if self.inline:
            outcomes = []
            for job in jobs:
                try:
                    outcomes.append(await self._run_job(job))
                except Exception as e:
                    outcomes.append(e)
        else:
            outcomes = await asyncio.gather(*(self._run_job(job) for job in jobs),
                                            return_exceptions=True)
        for outcome in outcomes:
            if isinstance(outcome, BaseException):
                raise outcome
        return list(outcomes)

    def get_statistics(self) -> Dict[str, Any]:
        """Counts per status and total busy time."""
        counts = {status.value: 0 for status in JobStatus}
        for job in self._jobs:
            counts[job.status.value] += 1
        busy = sum(job.duration or 0.0 for job in self._jobs)
        return {'workers': self.workers, 'jobs': len(self._jobs), 'busy_seconds': busy, **counts}

    async def shutdown(self) -> None:
        """Shut down an owned process pool."""
        if self._executor is not None and self._owns_executor:
            self._executor.shutdown(wait=True)
            self._executor = None


def _call(func: Callable[..., Any], args: Tuple[Any, ...], kwargs: Dict[str, Any]) -> Any:
    return func(*args, **kwargs)
