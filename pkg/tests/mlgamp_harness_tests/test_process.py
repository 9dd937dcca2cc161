import os

import pytest

from mlgamp_harness.process import TrialPool


def power(base: int, exponent: int) -> int:
    return base ** exponent


def worker_pid(_: int) -> int:
    return os.getpid()


@pytest.mark.asyncio
async def test_map_sequential() -> None:
    pool = TrialPool(1)
    assert await pool.map(power, [(2, 3), (3, 2), (5, 0)]) == [8, 9, 1]


@pytest.mark.asyncio
async def test_map_keeps_submission_order() -> None:
    pool = TrialPool(jobs=2)
    args = [(n, 2) for n in range(20)]
    assert await pool.map(power, args) == [n * n for n in range(20)]


@pytest.mark.asyncio
async def test_map_empty() -> None:
    assert await TrialPool(4).map(power, []) == []


def test_run_uses_worker_processes() -> None:
    pids = TrialPool(2).run(worker_pid, [(i,) for i in range(4)])
    assert os.getpid() not in pids


def test_single_item_runs_inline() -> None:
    assert TrialPool(2).run(worker_pid, [(0,)]) == [os.getpid()]


def test_invalid_jobs() -> None:
    with pytest.raises(ValueError):
        TrialPool(0)
