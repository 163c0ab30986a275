from __future__ import annotations

import math
from typing import Iterable, Tuple

import numpy as np


def ms(seconds: float) -> str:
    """Format a duration in seconds as milliseconds."""
    return f"{seconds * 1000.0:,.1f} ms".replace(",", " ")


def ceil_div(a: int, b: int) -> int:
    """Integer ceiling of a / b for b > 0 (negative numerators allowed)."""
    return -((-a) // b)


def frames_for_duration(seconds: float, hop: float) -> int:
    """Number of whole frames covering ``seconds`` at the given hop."""
    if seconds <= 0:
        return 0
    return int(round(seconds / hop))


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    """Mean and population standard deviation; (nan, nan) when empty."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())


def sample_boundary(frame_index: int, samples_per_frame: float) -> int:
    """First sample index of ``frame_index`` on a possibly fractional grid.

    Frame boundaries are rounded from the exact position so that the total
    sample count never drifts, even when hop * sample_rate is not integral.
    """
    return int(math.floor(frame_index * samples_per_frame + 0.5))
