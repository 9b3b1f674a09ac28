"""Streaming propagation schedule.

Incoming frames accumulate in a buffer of ``buffer_size`` (K) frames.  When
the buffer is full it is flushed: frames on the detection grid (every D-th
global index) are prompted by the detector, then the segmenter re-runs over
the most recent frames in reverse order, at most ``max_frames_to_track`` (M)
of them, and finally frames older than ``retention`` are evicted from both
the memory bank and the frame store.

Work is counted in :class:`PropagationStats`; with D=1 and unbounded M the
total is the triangular number of the flush heads, and with bounded M it
grows linearly in the stream length.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DuplicatePromptError, NoPromptError, OrderingError
from .frame_store import FrameRecord, FrameStore
from .masks import Mask, compute_centroid
from .memory_bank import FEATURE_DIM, MemoryBank, null_rows

log = logging.getLogger(__name__)


@dataclass
class PropagationConfig:
    buffer_size: int = 10
    max_frames_to_track: int | None = 20
    detection_interval: int = 5
    retention: int | None = 40
    attention_limit: int = 7
    update_window: int | None = None
    condition_phase: int = 0

    @property
    def effective_update_window(self) -> int | None:
        return self.retention if self.update_window is None else self.update_window

    def validate(self) -> None:
        K, M, D, R = self.buffer_size, self.max_frames_to_track, self.detection_interval, self.retention
        if K < 1:
            raise ConfigError(f"buffer_size must be >= 1, got {K}")
        if D < 1:
            raise ConfigError(f"detection_interval must be >= 1, got {D}")
        if self.attention_limit < 1:
            raise ConfigError("attention_limit must be >= 1")
        if M is not None and M < K:
            raise ConfigError(
                f"max_frames_to_track ({M}) must cover at least one buffer ({K})"
            )
        if R is not None:
            if M is None:
                raise ConfigError("a bounded retention needs a bounded max_frames_to_track")
            if R <= M:
                raise ConfigError(
                    f"retention ({R}) must exceed max_frames_to_track ({M})"
                )
        if self.update_window is not None and self.update_window < 1:
            raise ConfigError("update_window must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PropagationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown propagation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PropagationStats:
    frames_propagated_total: int = 0
    propagation_calls: int = 0
    detector_calls: int = 0
    trace: list = field(default_factory=list)  # (head_idx, span) per call


@dataclass(frozen=True)
class PromptBox:
    obj_id: Hashable
    box: tuple[float, float, float, float]
    score: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box} for object {self.obj_id!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (x0 + x1) / 2, (y0 + y1) / 2

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


def designate_condition_frames(flushed: Sequence[int], interval: int, phase: int = 0) -> list[int]:
    return [i for i in flushed if i % interval == phase % interval]


# frame, prompts for that frame, ids with memory in the attention frames
Segmenter = Callable[[FrameRecord, Mapping[Hashable, PromptBox], set], Mapping[Hashable, Mask]]
Detector = Callable[[FrameRecord], Sequence[PromptBox]]


@dataclass
class Violation:
    kind: str
    head: int
    frames: list


class PropagationEngine:
    """Drives ingest -> flush -> propagate -> release for one video stream."""

    def __init__(
        self,
        config: PropagationConfig,
        segmenter: Segmenter,
        detector: Detector | None = None,
        bank: MemoryBank | None = None,
        store: FrameStore | None = None,
        *,
        check_config: bool = True,
        record_visits: bool = False,
    ):
        if check_config:
            config.validate()
        self.config = config
        self.segmenter = segmenter
        self.detector = detector
        self.bank = bank if bank is not None else MemoryBank()
        self.store = store if store is not None else FrameStore()
        self.stats = PropagationStats()
        self.pending: list[FrameRecord] = []
        self.prompts: dict[int, dict[Hashable, PromptBox]] = {}
        self.violations: list[Violation] = []
        self.memory_rows: list[dict] = []
        self.attention_log: list[tuple[int, list[int], int]] | None = [] if record_visits else None
        self.visits: list[list[int]] | None = [] if record_visits else None
        self.release_log: list[tuple[int, list[int]]] = []
        self.peak_resident = 0
        self.peak_bytes = 0
        self.floor_resident: int | None = None
        self._next_idx = 0
        self._last_head: int | None = None

    # -- accounting ---------------------------------------------------------

    @property
    def resident_frames(self) -> int:
        return len(self.store) + len(self.bank.preload_frame_inds)

    # -- buffering ----------------------------------------------------------

    def ingest_frame(self, frame: FrameRecord) -> dict[int, dict] | None:
        """Buffer one frame; returns the propagation result when a flush fires."""
        if frame.global_idx != self._next_idx:
            raise OrderingError(f"expected frame {self._next_idx}, got {frame.global_idx}")
        self._next_idx += 1
        self.pending.append(frame)
        if len(self.pending) == self.config.buffer_size:
            return self.flush()
        return None

    def finish(self) -> dict[int, dict] | None:
        """Flush a partially filled buffer at end of stream."""
        if self.pending:
            return self.flush()
        return None

    def flush(self) -> dict[int, dict]:
        frames, self.pending = self.pending, []
        self.store.append_frames(frames)
        self.peak_resident = max(self.peak_resident, self.resident_frames)
        self.peak_bytes = max(self.peak_bytes, self.store.footprint_bytes())
        idx = [f.global_idx for f in frames]
        for c in designate_condition_frames(idx, self.config.detection_interval, self.config.condition_phase):
            if self.detector is None:
                continue
            self.stats.detector_calls += 1
            boxes = self.detector(self.store.get_frame(c))
            self.apply_prompts(c, boxes)
        head = idx[-1]
        results = self.propagate(head)
        self._release(head)
        return results

    # -- prompts ------------------------------------------------------------

    def apply_prompts(self, frame_idx: int, boxes: Iterable[PromptBox]) -> None:
        boxes = list(boxes)
        ids = [b.obj_id for b in boxes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1}, key=str)
            raise DuplicatePromptError(f"frame {frame_idx}: several prompts for object ids {dup}")
        bank = self.bank
        new = [i for i in ids if i not in bank.registry]
        for obj_id in new:
            bank.register_object(obj_id)
        if new:
            log.debug("frame %d: registered new objects %s", frame_idx, new)
            bank.update_memory_for_new_ids(frame_idx, self.config.effective_update_window)
        if not boxes:
            return
        rows = null_rows(len(bank.registry))
        for b in boxes:
            cx, cy = b.center
            rows[bank.registry.slot_of[b.obj_id]] = (1.0, cx, cy, b.area)
        bank.write_frame_output(frame_idx, True, rows)
        self.prompts[frame_idx] = {b.obj_id: b for b in boxes}

    # -- propagation --------------------------------------------------------

    def _remembered(self, attention: list[int]) -> set:
        bank = self.bank
        n = len(bank.registry)
        if not attention or n == 0:
            return set()
        stacked = np.stack([bank.entry(f).rows for f in attention])
        seen = np.any(stacked != 0, axis=(0, 2))
        ids = bank.registry.obj_ids
        return {ids[s] for s in np.flatnonzero(seen)}

    def _rows(self, masks: Mapping[Hashable, Mask]) -> np.ndarray:
        bank = self.bank
        rows = null_rows(len(bank.registry))
        for obj_id, mask in masks.items():
            c = compute_centroid(mask)
            if c is None:
                continue
            rows[bank.registry.slot_of[obj_id]] = (1.0, c[0], c[1], mask.area)
        return rows

    def window_low(self, head: int) -> int:
        M = self.config.max_frames_to_track
        return 0 if M is None else max(head - M + 1, 0)

    def propagate(self, head: int) -> dict[int, dict]:
        """Re-segment frames ``head, head-1, ...`` down to the window floor.

        Returns ``{frame_idx: {obj_id: Mask}}`` for every visited frame.
        """
        bank, store = self.bank, self.store
        if not bank.has_condition_entry():
            raise NoPromptError("no condition frame in the memory bank; nothing to propagate from")
        wanted_low = self.window_low(head)
        low = max(wanted_low, store.oldest)
        if low > wanted_low:
            self.violations.append(Violation("visit-evicted", head, list(range(wanted_low, low))))
        limit = self.config.attention_limit
        results: dict[int, dict] = {}
        visited = []
        for f in range(head, low - 1, -1):
            frame = store.get_frame(f)
            attention = bank.select_attention_frames(f, limit, cond_through=head)
            if self.attention_log is not None:
                self.attention_log.append((f, attention, len(bank.registry)))
            masks = self.segmenter(frame, self.prompts.get(f, {}), self._remembered(attention))
            masks = {k: m for k, m in masks.items() if k in bank.registry}
            bank.write_frame_output(f, f in bank.cond_frame_outputs, self._rows(masks))
            results[f] = masks
            visited.append(f)
        span = head - low + 1
        self.stats.frames_propagated_total += span
        self.stats.propagation_calls += 1
        self.stats.trace.append((head, span))
        if self.visits is not None:
            self.visits.append(visited)
        self._last_head = head
        return results

    def _release(self, head: int) -> None:
        R = self.config.retention
        released: list[int] = []
        if R is not None:
            released = self.bank.release_old_frames(head, R, self.store)
            for f in released:
                self.prompts.pop(f, None)
        self.release_log.append((head, released))
        wanted_low = self.window_low(head)
        if self.store.oldest is not None and self.store.oldest > wanted_low:
            self.violations.append(
                Violation("evicted-inside-window", head, list(range(wanted_low, self.store.oldest)))
            )
        resident = self.resident_frames
        self.floor_resident = resident if self.floor_resident is None else min(self.floor_resident, resident)
        row = {
            "call_no": self.stats.propagation_calls,
            "head_idx": head,
            "span": self.stats.trace[-1][1],
            "frames_propagated_total": self.stats.frames_propagated_total,
            "resident_frames": resident,
        }
        row.update(self.store.memory_row())
        self.memory_rows.append(row)

    # -- whole stream -------------------------------------------------------

    def run_stream(self, source: Iterable[FrameRecord], n: int) -> PropagationStats:
        for frame in itertools.islice(source, n):
            self.ingest_frame(frame)
        self.finish()
        return self.stats
