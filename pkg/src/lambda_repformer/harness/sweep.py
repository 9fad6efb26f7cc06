from __future__ import annotations

import statistics
from dataclasses import replace
from typing import Sequence

from ..dataset.manifest import DatasetSplit, Episode
from ..errors import ConfigError
from .training import RunResult, TrainConfig, train


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    if not values:
        raise ConfigError("need at least one value")
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else 0.0)


def seed_sweep(
    config: TrainConfig,
    episodes: Sequence[Episode],
    split: DatasetSplit,
    provider,
    n_seeds: int = 5,
    registry=None,
) -> tuple[RunResult, list[RunResult]]:
    """Train and test with seeds ``config.seed .. config.seed + n_seeds - 1``.

    Returns an aggregate (the first run's curves, all seeds, mean and sample
    std of test accuracy) and the individual runs.
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    runs = [
        train(episodes, split, replace(config, seed=config.seed + k), provider, registry).result
        for k in range(n_seeds)
    ]
    mean, std = mean_std([r.test.accuracy for r in runs])
    agg = replace(runs[0], seeds=tuple(r.seeds[0] for r in runs), mean_accuracy=mean, std_accuracy=std)
    return agg, runs
