"""Bounding boxes as discrete location tokens.

Boxes live in normalized [0,1] coordinates, order (y_min, x_min, y_max,
x_max). Each coordinate quantizes to one of 1024 bins rendered as a
zero-padded token "<locNNNN>". Index 1024 is reserved and never emitted
or accepted. Dequantization returns bin centers, which halves the
worst-case round-trip error versus left edges.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

NUM_BINS = 1024

# Exactly "<loc" + 4 ASCII decimal digits + ">"; zero padding is mandatory.
LOC_TOKEN_RE = re.compile(r"<loc([0-9]{4})>")


@dataclass(frozen=True)
class BoxNorm:
    """Box in normalized coordinates, y/x mins not above y/x maxes."""

    y_min: float
    x_min: float
    y_max: float
    x_max: float

    def __post_init__(self):
        if self.y_min > self.y_max or self.x_min > self.x_max:
            raise ValueError(f"box ordering violated: {self}")

    def area(self) -> float:
        return (self.y_max - self.y_min) * (self.x_max - self.x_min)


@dataclass(frozen=True)
class LocQuad:
    """Quantized box: four token indices in [0, 1023]."""

    y_min: int
    x_min: int
    y_max: int
    x_max: int

    def __post_init__(self):
        for v in (self.y_min, self.x_min, self.y_max, self.x_max):
            if not 0 <= v < NUM_BINS:
                raise ValueError(f"loc index {v} outside [0, {NUM_BINS - 1}]")
        if self.y_min > self.y_max or self.x_min > self.x_max:
            raise ValueError(f"quad ordering violated: {self}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.y_min, self.x_min, self.y_max, self.x_max)


def quantize(c: float) -> int:
    """Map a coordinate in [0,1] to a bin index; 1.0 clamps to 1023."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"coordinate {c} outside [0, 1]")
    return min(int(c * NUM_BINS), NUM_BINS - 1)


def dequantize(k: int) -> float:
    """Bin center of index k."""
    if not 0 <= k < NUM_BINS:
        raise ValueError(f"loc index {k} outside [0, {NUM_BINS - 1}]")
    return (k + 0.5) / NUM_BINS


def encode_box(b: BoxNorm) -> str:
    """Render a box as four loc tokens in (y_min, x_min, y_max, x_max) order."""
    return "".join(
        f"<loc{quantize(c):04d}>" for c in (b.y_min, b.x_min, b.y_max, b.x_max)
    )


def decode_box(q: LocQuad) -> BoxNorm:
    """Box whose coordinates are the bin centers of the quad."""
    return BoxNorm(
        y_min=dequantize(q.y_min),
        x_min=dequantize(q.x_min),
        y_max=dequantize(q.y_max),
        x_max=dequantize(q.x_max),
    )


def _token_runs(text: str) -> list[list[int]]:
    """Maximal runs of adjacent, in-range loc tokens, left to right.

    A token with an out-of-range index (>= 1024) is not a loc token and
    breaks the run, as does any character between two tokens.
    """
    runs: list[list[int]] = []
    prev_end = None
    for match in LOC_TOKEN_RE.finditer(text):
        value = int(match.group(1))
        if value >= NUM_BINS:
            prev_end = None
            continue
        if prev_end == match.start() and runs:
            runs[-1].append(value)
        else:
            runs.append([value])
        prev_end = match.end()
    return runs


def parse_loc_sequence(text: str) -> Optional[LocQuad]:
    """First valid quad found in the text, or None.

    Scans every window of 4 consecutive loc tokens in position order and
    returns the first one satisfying the quad ordering invariants.
    Invalidly ordered windows are skipped, not repaired, so generation
    faults stay visible to the caller.
    """
    for run in _token_runs(text):
        for i in range(len(run) - 3):
            a, b, c, d = run[i : i + 4]
            if a <= c and b <= d:
                return LocQuad(a, b, c, d)
    return None
