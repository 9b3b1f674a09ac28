"""Binary masks stored as a cropped bitmap plus its pixel offset.

Pixel ``(x, y)`` of the crop sits at integer image coordinates
``(x0 + x, y0 + y)``; coordinates may be negative because pockets straddle
the table edge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Mask:
    x0: int
    y0: int
    bits: np.ndarray

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (self.x0, self.y0) == (other.x0, other.y0) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.x0, self.y0, self.bits.shape, self.bits.tobytes()))

    def translated(self, dx: int, dy: int) -> "Mask":
        return Mask(self.x0 + dx, self.y0 + dy, self.bits)

    def to_dense(self, width: int, height: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        ys, xs = np.nonzero(self.bits)
        xs = xs + self.x0
        ys = ys + self.y0
        keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        out[ys[keep], xs[keep]] = True
        return out


def compute_centroid(mask) -> tuple[float, float] | None:
    """Mean (x, y) of the set pixels, or ``None`` for an empty mask.

    Accepts a :class:`Mask` or a bare 2-D boolean array (origin at 0, 0).
    """
    if isinstance(mask, Mask):
        bits, x0, y0 = mask.bits, mask.x0, mask.y0
    else:
        bits, x0, y0 = np.asarray(mask, dtype=bool), 0, 0
    ys, xs = np.nonzero(bits)
    if xs.size == 0:
        return None
    return float(xs.mean()) + x0, float(ys.mean()) + y0
