"""Paired cosine schedules: rectification strength rises, global adoption falls."""
from __future__ import annotations

import math
from dataclasses import dataclass


def _progress(l: int, L: int) -> float:
    if L < 1:
        raise ValueError("total rounds L must be >= 1")
    if not 0 <= l <= L:
        raise ValueError(f"round {l} outside [0, {L}]")
    return (l / L) * (math.pi / 2)


def eps_plus(l: int, L: int) -> float:
    return 1.0 - math.cos(_progress(l, L))


def eps_minus(l: int, L: int) -> float:
    return math.cos(_progress(l, L))


@dataclass(frozen=True)
class Schedule:
    l: int
    L: int
    eps_plus: float
    eps_minus: float

    @classmethod
    def at(cls, l: int, L: int) -> "Schedule":
        return cls(l, L, eps_plus(l, L), eps_minus(l, L))
