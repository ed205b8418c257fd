"""Tests for JobRunner ordering, failure handling and statistics."""

import math
import operator

import pytest

from src.controllers.job_runner import Job, JobRunner, JobStatus, default_workers


@pytest.mark.asyncio
async def test_inline_results_in_submission_order():
    calls = []

    def record(tag):
        calls.append(tag)
        return tag * 2

    async with JobRunner(workers=1) as runner:
        assert runner.inline
        results = await runner.run_all([Job(f"job{i}", record, (i,)) for i in range(5)])

    assert results == [0, 2, 4, 6, 8]
    assert calls == [0, 1, 2, 3, 4]


@pytest.mark.asyncio
async def test_failures_run_everything_then_raise_the_first():
    calls = []

    def work(i):
        calls.append(i)
        if i in (1, 3):
            raise ValueError(f"bad {i}")
        return i

    runner = JobRunner(workers=1)
    jobs = [Job(f"job{i}", work, (i,)) for i in range(4)]
    with pytest.raises(ValueError, match="bad 1"):
        await runner.run_all(jobs)

    assert calls == [0, 1, 2, 3]
    assert [job.status for job in jobs] == [
        JobStatus.COMPLETED, JobStatus.FAILED, JobStatus.COMPLETED, JobStatus.FAILED
    ]
    assert isinstance(jobs[1].error, ValueError)


@pytest.mark.asyncio
async def test_statistics():
    runner = JobRunner(workers=1)
    await runner.run_all([Job("a", operator.add, (1, 2)), Job("b", operator.mul, (3, 4))])
    stats = runner.get_statistics()
    assert stats["jobs"] == 2
    assert stats["completed"] == 2
    assert stats["failed"] == 0
    assert stats["workers"] == 1
    assert stats["busy_seconds"] >= 0.0


@pytest.mark.asyncio
async def test_process_pool_matches_inline():
    jobs = lambda: [Job(f"f{n}", math.factorial, (n,)) for n in range(8)]  # noqa: E731
    inline = await JobRunner(workers=1).run_all(jobs())
    async with JobRunner(workers=2) as pooled:
        assert not pooled.inline
        results = await pooled.run_all(jobs())
    assert results == inline == [math.factorial(n) for n in range(8)]


@pytest.mark.asyncio
async def test_process_pool_failure_is_reraised():
    async with JobRunner(workers=2) as runner:
        with pytest.raises(ValueError):
            await runner.run_all([Job("ok", math.sqrt, (4.0,)), Job("bad", math.sqrt, (-1.0,))])


def test_worker_count_validation():
    assert default_workers() >= 1
    with pytest.raises(ValueError):
        JobRunner(workers=-1)
