from typing import Any, Callable, List, Sequence, Tuple, TypeVar
import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor

log = logging.getLogger(__name__)

T = TypeVar("T")


class TrialPool:
    """Runs independent trials, in worker processes when `jobs` > 1

    Results come back in submission order regardless of completion order.
    """

    def __init__(self, jobs: int = 1) -> None:
        if jobs < 1:
            raise ValueError(f"jobs must be ≥ 1, got {jobs}")
        self.jobs = jobs

    async def map(
        self, fn: Callable[..., T], argslist: Sequence[Tuple[Any, ...]]
    ) -> List[T]:
        if self.jobs == 1 or len(argslist) <= 1:
            return [fn(*args) for args in argslist]

        loop = asyncio.get_running_loop()
        workers = min(self.jobs, len(argslist))
        log.debug("Starting %d workers for %d trials", workers, len(argslist))
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [loop.run_in_executor(executor, fn, *args) for args in argslist]
            return list(await asyncio.gather(*futures))

    def run(self, fn: Callable[..., T], argslist: Sequence[Tuple[Any, ...]]) -> List[T]:
        return asyncio.run(self.map(fn, argslist))
