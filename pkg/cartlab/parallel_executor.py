# cartlab/parallel_executor.py
"""Bounded parallel execution of independent rollouts."""

import asyncio
import logging
from typing import Awaitable, Callable, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_MAX_PARALLEL = 4


class RolloutExecutor:
    """Runs independent jobs with at most `max_parallel` in flight; results keep submission order."""

    def __init__(self, max_parallel: int = DEFAULT_MAX_PARALLEL):
        if max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        self.max_parallel = max_parallel
        self.running = 0
        self.peak_running = 0
        self.completed = 0
        self.failed = 0

    async def _run_one(self, semaphore: asyncio.Semaphore, label: str, job: Callable[[], Awaitable[T]]) -> T:
        async with semaphore:
            self.running += 1
            self.peak_running = max(self.peak_running, self.running)
            try:
                result = await job()
                self.completed += 1
                return result
            except Exception as e:
                self.failed += 1
                logger.warning("[Executor] %s failed: %s", label, e)
                raise
            finally:
                self.running -= 1

    async def run(self, jobs: Sequence[Callable[[], Awaitable[T]]], labels: Optional[Sequence[str]] = None) -> List[T]:
        """
        Execute every job; the first failure propagates after all jobs settle.
        """
        if not jobs:
            return []
        labels = list(labels) if labels is not None else [f"job-{i}" for i in range(len(jobs))]
        semaphore = asyncio.Semaphore(self.max_parallel)
        logger.debug("[Executor] launching %d jobs (max %d in flight)", len(jobs), self.max_parallel)
        outcomes = await asyncio.gather(
            *(self._run_one(semaphore, label, job) for label, job in zip(labels, jobs)),
            return_exceptions=True,
        )
        for outcome in outcomes:
            if isinstance(outcome, BaseException):
                raise outcome
        return list(outcomes)


async def run_parallel(jobs: Sequence[Callable[[], Awaitable[T]]], max_parallel: int = DEFAULT_MAX_PARALLEL) -> List[T]:
    """
    Run rollouts with bounded parallelism.

    Args:
        jobs: zero-argument coroutine factories
        max_parallel: in-flight limit

    Returns:
        Results in the order of `jobs`
    """
    return await RolloutExecutor(max_parallel).run(jobs)
