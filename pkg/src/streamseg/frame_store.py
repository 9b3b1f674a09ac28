"""Index-mapped frame storage with eviction and a byte-footprint model.

Frames are addressed by their global position in the stream.  After old
frames are evicted the storage is no longer contiguous, so every lookup goes
through ``images_idx`` instead of indexing ``records`` directly.
"""
from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import IndexGapError, MissingFrameError

SINGLE = "single"
HALF = "half"
FAST = "fast"
SLOW = "slow"

_ELEMENT_BYTES = {SINGLE: 4, HALF: 2}


@dataclass
class FrameRecord:
    global_idx: int
    native_width: int = 1920
    native_height: int = 1080
    internal_side: int = 1024
    payload: Any = None
    precision: str = SINGLE
    tier: str = FAST

    def __post_init__(self):
        if self.global_idx < 0:
            raise ValueError(f"global_idx must be non-negative, got {self.global_idx}")
        if min(self.native_width, self.native_height, self.internal_side) <= 0:
            raise ValueError("frame dimensions must be positive")
        if self.precision not in _ELEMENT_BYTES:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.tier not in (FAST, SLOW):
            raise ValueError(f"unknown storage tier {self.tier!r}")

    @property
    def native_bytes(self) -> int:
        # decoded RGB frame, float32
        return self.native_width * self.native_height * 3 * 4

    @property
    def internal_bytes(self) -> int:
        return self.internal_side ** 2 * 3 * _ELEMENT_BYTES[self.precision]

    @property
    def nbytes(self) -> int:
        return self.native_bytes + self.internal_bytes


@dataclass
class FrameStore:
    records: list[FrameRecord] = field(default_factory=list)
    images_idx: list[int] = field(default_factory=list)
    num_frames_total: int = 0

    def __len__(self):
        return len(self.records)

    def __contains__(self, frame_idx):
        pos = bisect_left(self.images_idx, frame_idx)
        return pos < len(self.images_idx) and self.images_idx[pos] == frame_idx

    @property
    def oldest(self) -> int | None:
        return self.images_idx[0] if self.images_idx else None

    @property
    def newest(self) -> int | None:
        return self.images_idx[-1] if self.images_idx else None

    def append_frames(self, frames: Iterable[FrameRecord]) -> None:
        frames = list(frames)
        expected = self.num_frames_total
        for offset, frame in enumerate(frames):
            if frame.global_idx != expected + offset:
                raise IndexGapError(
                    f"expected frame {expected + offset}, got {frame.global_idx}"
                )
        for frame in frames:
            self.records.append(frame)
            self.images_idx.append(frame.global_idx)
        self.num_frames_total += len(frames)

    def position_of(self, frame_idx: int) -> int:
        pos = bisect_left(self.images_idx, frame_idx)
        if pos == len(self.images_idx) or self.images_idx[pos] != frame_idx:
            raise MissingFrameError(f"frame {frame_idx} is not resident")
        return pos

    def get_frame(self, frame_idx: int) -> FrameRecord:
        return self.records[self.position_of(frame_idx)]

    def release_frames_before(self, cutoff: int, protected: Iterable[int] = ()) -> list[int]:
        """Drop every frame below ``cutoff`` that is not protected.

        Returns the released global indices.  ``num_frames_total`` is a
        historical count and is left alone.
        """
        protected = set(protected)
        keep_records, keep_idx, released = [], [], []
        for rec, idx in zip(self.records, self.images_idx):
            if idx < cutoff and idx not in protected:
                released.append(idx)
            else:
                keep_records.append(rec)
                keep_idx.append(idx)
        self.records, self.images_idx = keep_records, keep_idx
        return released

    def footprint_bytes(self) -> int:
        return sum(rec.nbytes for rec in self.records)

    def tier_bytes(self) -> dict[str, int]:
        out = {FAST: 0, SLOW: 0}
        for rec in self.records:
            out[rec.tier] += rec.nbytes
        return out

    def memory_row(self) -> dict[str, int]:
        tiers = self.tier_bytes()
        return {
            "frame_count_resident": len(self.records),
            "fast_bytes": tiers[FAST],
            "slow_bytes": tiers[SLOW],
            "num_frames_total": self.num_frames_total,
        }
