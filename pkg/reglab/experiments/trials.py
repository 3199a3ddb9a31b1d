"""
Per-trial RNG streams and the trial runner.

Trial ``i`` of a run with base seed ``s`` owns the stream
``SeedSequence(s, spawn_key=(i,))``; results come back ordered by trial index
no matter how many worker processes ran them.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Any, Callable, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from ..core.errors import ReglabError, TrialError

logger = logging.getLogger(__name__)

load_dotenv()


def trial_sequence(base_seed: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(base_seed, spawn_key=(trial,))


def trial_rng(base_seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(trial_sequence(base_seed, trial))


def replay_seed(base_seed: int, trial: int) -> int:
    """A single 64-bit integer identifying trial ``trial``'s stream (for logs and failure reports)."""
    return int(trial_sequence(base_seed, trial).generate_state(1, dtype=np.uint64)[0])


def resolve_workers(workers: Optional[int]) -> int:
    """Explicit value, else REGLAB_WORKERS, else 1."""
    if workers is None:
        workers = int(os.getenv("REGLAB_WORKERS", "1"))
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def _guarded(experiment: str, fn: Callable, base_seed: int, shared: dict, trial: int):
    try:
        return fn(trial, trial_rng(base_seed, trial), **shared)
    except TrialError:
        raise
    except (ReglabError, ArithmeticError, ValueError) as exc:
        raise TrialError(experiment, trial, replay_seed(base_seed, trial), exc) from exc


def run_trials(
    experiment: str,
    fn: Callable[..., Any],
    trials: Sequence[int],
    base_seed: int,
    workers: int = 1,
    **shared,
) -> List[Any]:
    """
    Call ``fn(trial, rng, **shared)`` for every trial index.

    ``fn`` and ``shared`` must be picklable when ``workers > 1``. Failures are
    re-raised as :class:`TrialError` carrying the trial index and its seed.
    """
    trials = list(trials)
    job = partial(_guarded, experiment, fn, base_seed, shared)
    logger.info("%s: %d trials on %d worker(s)", experiment, len(trials), workers)
    if workers <= 1 or len(trials) <= 1:
        return [job(t) for t in trials]
    chunksize = max(1, len(trials) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, trials, chunksize=chunksize))


def _guarded_block(experiment: str, fn: Callable, base_seed: int, shared: dict, block: Sequence[int]):
    rngs = [trial_rng(base_seed, t) for t in block]
    try:
        return fn(list(block), rngs, **shared)
    except (ReglabError, ArithmeticError, ValueError) as exc:
        raise TrialError(experiment, block[0], replay_seed(base_seed, block[0]), exc) from exc


def run_trial_blocks(
    experiment: str,
    fn: Callable[..., List[Any]],
    n_trials: int,
    block_size: int,
    base_seed: int,
    workers: int = 1,
    **shared,
) -> List[Any]:
    """
    Batched variant of :func:`run_trials`: ``fn(trial_indices, rngs, **shared)``
    handles a contiguous block and returns one result per trial. A failing
    block is reported against its first trial.
    """
    blocks = [list(range(i, min(i + block_size, n_trials))) for i in range(0, n_trials, block_size)]
    job = partial(_guarded_block, experiment, fn, base_seed, shared)
    logger.info("%s: %d trials in %d block(s) on %d worker(s)", experiment, n_trials, len(blocks), workers)
    if workers <= 1 or len(blocks) <= 1:
        results = [job(b) for b in blocks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, blocks))
    return [r for block in results for r in block]
