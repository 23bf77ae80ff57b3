"""Aggregate statistics: interquartile mean and percentile-bootstrap confidence intervals."""

import numpy as np

MIN_BOOTSTRAP_VALUES = 2


def _iqm_weights(n: int) -> np.ndarray:
    """Weight of each sorted rank in the middle half of [0, n].

    Rank i occupies [i, i + 1); its weight is the overlap with [n/4, 3n/4]
    divided by n/2, so ranks straddling a quartile count fractionally.
    """
    edges = np.arange(n + 1, dtype=float)
    low, high = n / 4.0, 3.0 * n / 4.0
    overlap = np.clip(np.minimum(edges[1:], high) - np.maximum(edges[:-1], low), 0.0, None)
    return overlap / (n / 2.0)


def iqm(values: object) -> float:
    """Interquartile mean with fractional trimming.

    Raises:
        ValueError: `values` is empty.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size == 0:
        msg = "iqm of an empty sequence"
        raise ValueError(msg)
    return float(np.sort(x) @ _iqm_weights(x.size))


def bootstrap_ci(
    values: object,
    level: float = 0.95,
    resamples: int = 2000,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval of the IQM.

    Args:
        values: At least two observations.
        level: Coverage of the interval.
        resamples: Number of bootstrap resamples.
        seed: Seed of the resampling generator.

    Returns:
        (low, high) quantiles of the resampled IQMs.

    Raises:
        ValueError: Fewer than two values, or `level` outside (0, 1).
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size < MIN_BOOTSTRAP_VALUES:
        msg = f"bootstrap_ci needs at least {MIN_BOOTSTRAP_VALUES} values, got {x.size}"
        raise ValueError(msg)
    if not 0.0 < level < 1.0:
        msg = f"level must lie in (0, 1), got {level}"
        raise ValueError(msg)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    stats = np.sort(x[idx], axis=1) @ _iqm_weights(x.size)
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(stats, [tail, 1.0 - tail])
    return float(low), float(high)
