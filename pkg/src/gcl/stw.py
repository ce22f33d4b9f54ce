"""Score-to-weight (STW) functions.

Map a ground-truth relevance score ``s`` in ``[1, s_max]`` to a positive
loss weight. Five shapes are supported:

=============  ==========================================================
constant       ``c``
linear         ``s``
inverse        ``s_max / (s_max - s + 1)``
inverse_sqrt   ``s_max / sqrt(s_max - s + 1)``
piecewise      ``s_max`` if ``s >= 0.9 s_max`` else
               ``s_max / (0.9 s_max - s + 1)``
=============  ==========================================================

``s_max`` here is a dataset-level constant (100 for rank-derived scores).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

KINDS = ("constant", "linear", "inverse", "inverse_sqrt", "piecewise")

PIECEWISE_FRACTION = 0.9


@dataclass(frozen=True)
class StwFunction:
    kind: str
    s_max: float = 100.0
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown STW kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not (self.s_max > 0) or not math.isfinite(self.s_max):
            raise ValueError(f"s_max must be a positive finite number, got {self.s_max}")
        if self.kind == "constant" and not (self.c > 0):
            raise ValueError(f"constant STW requires c > 0, got {self.c}")

    def __call__(self, s: float) -> float:
        return stw_eval(self, s)


def stw_eval(f: StwFunction, s: float) -> float:
    """Weight for a single score under ``f``."""
    s = float(s)
    s_max = float(f.s_max)
    if not (1.0 <= s <= s_max):
        raise ValueError(f"score {s} outside [1, {s_max}]")
    if f.kind == "constant":
        return float(f.c)
    if f.kind == "linear":
        return s
    if f.kind == "inverse":
        return s_max / (s_max - s + 1.0)
    if f.kind == "inverse_sqrt":
        return s_max / math.sqrt(s_max - s + 1.0)
    # piecewise: flat top decile
    threshold = PIECEWISE_FRACTION * s_max
    if s >= threshold:
        return s_max
    return s_max / (threshold - s + 1.0)


def stw_batch(f: StwFunction, scores: Iterable[float]) -> list[float]:
    out = []
    for i, s in enumerate(scores):
        try:
            out.append(stw_eval(f, s))
        except ValueError as exc:
            raise ValueError(f"scores[{i}]: {exc}") from None
    return out


def stw_curves(kinds: Sequence[str], s_values: Sequence[float], s_max: float = 100.0, c: float = 1.0):
    """Rows of ``(kind, s, w)`` for plotting the weight curves."""
    rows = []
    for kind in kinds:
        f = StwFunction(kind, s_max=s_max, c=c)
        for s in s_values:
            rows.append((kind, float(s), stw_eval(f, s)))
    return rows
