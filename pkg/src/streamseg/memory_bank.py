"""Per-frame, per-object memory bookkeeping for the streaming segmenter.

The bank mirrors the layout of a video predictor's inference state: condition
and non-condition outputs keyed by frame, a per-object mirror of both, the set
of consolidated condition frames, and an append-only object registry.  Rows
are small feature vectors (one per registered object); an all-zero row is the
null memory of an object that was not seen on that frame.

Preloaded entries are remapped to negative frame indices so they can never
collide with frames of the current video and never fall inside a recency
window.
"""
from __future__ import annotations

import json
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Hashable, Iterable

import numpy as np

from .errors import (
    AlreadyRegisteredError,
    MissingFrameError,
    PreloadFormatError,
    ShapeError,
)

FEATURE_DIM = 4  # presence, centroid x, centroid y, area
PRELOAD_FORMAT = "streamseg-preload"
PRELOAD_VERSION = 1

COND = "cond_frame_outputs"
NON_COND = "non_cond_frame_outputs"


@dataclass
class ObjectRegistry:
    obj_ids: list = field(default_factory=list)
    slot_of: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.obj_ids)

    def __contains__(self, obj_id):
        return obj_id in self.slot_of

    def register(self, obj_id: Hashable) -> int:
        if obj_id in self.slot_of:
            raise AlreadyRegisteredError(f"object {obj_id!r} is already registered")
        self.slot_of[obj_id] = len(self.obj_ids)
        self.obj_ids.append(obj_id)
        return self.slot_of[obj_id]


@dataclass
class MemoryEntry:
    frame_idx: int
    is_condition: bool
    rows: np.ndarray
    registry_size_at_update: int

    def __post_init__(self):
        if self.rows.shape[0] != self.registry_size_at_update:
            raise ShapeError(
                f"entry for frame {self.frame_idx} has {self.rows.shape[0]} rows,"
                f" expected {self.registry_size_at_update}"
            )

    def has_memory(self, slot: int) -> bool:
        return slot < self.rows.shape[0] and bool(np.any(self.rows[slot]))


def null_rows(n: int) -> np.ndarray:
    return np.zeros((n, FEATURE_DIM), dtype=np.float32)


class MemoryBank:
    def __init__(self):
        self.cond_frame_outputs: dict[int, MemoryEntry] = {}
        self.non_cond_frame_outputs: dict[int, MemoryEntry] = {}
        self.per_obj_outputs: dict[Hashable, dict[str, dict[int, np.ndarray]]] = {}
        self.consolidated_frame_inds: set[int] = set()
        self.preload_frame_inds: set[int] = set()
        # remapped preload index -> frame index in the source video
        self.preload_source: dict[int, int] = {}
        self.registry = ObjectRegistry()
        self._keys: list[int] = []
        self._cond_keys: list[int] = []

    def __len__(self):
        return len(self._keys)

    def __contains__(self, frame_idx):
        return frame_idx in self.cond_frame_outputs or frame_idx in self.non_cond_frame_outputs

    @property
    def frame_indices(self) -> list[int]:
        return list(self._keys)

    def entry(self, frame_idx: int) -> MemoryEntry | None:
        e = self.cond_frame_outputs.get(frame_idx)
        return e if e is not None else self.non_cond_frame_outputs.get(frame_idx)

    def has_condition_entry(self) -> bool:
        return bool(self.cond_frame_outputs)

    def is_current(self, entry: MemoryEntry) -> bool:
        return entry.registry_size_at_update == len(self.registry)

    # -- registry ---------------------------------------------------------

    def register_object(self, obj_id: Hashable) -> int:
        slot = self.registry.register(obj_id)
        self.per_obj_outputs[obj_id] = {COND: {}, NON_COND: {}}
        return slot

    def update_memory_for_new_ids(self, current_idx: int, max_update_frames: int | None) -> list[int]:
        """Grow the rows of recent entries (and all preload entries) to the
        current registry size.  Returns the frame indices that were updated.

        Entries outside the window keep their old shape and are thereby
        excluded from attention until they are rewritten.
        """
        n = len(self.registry)
        updated = []
        for f in self._keys:
            in_window = (
                max_update_frames is None or abs(current_idx - f) < max_update_frames
            )
            if not (in_window or f in self.preload_frame_inds):
                continue
            entry = self.entry(f)
            old = entry.rows.shape[0]
            if old < n:
                entry.rows = np.vstack([entry.rows, null_rows(n - old)])
                kind = COND if entry.is_condition else NON_COND
                for obj in self.registry.obj_ids[old:]:
                    self.per_obj_outputs[obj][kind][f] = entry.rows[self.registry.slot_of[obj]].copy()
            entry.registry_size_at_update = n
            updated.append(f)
        return updated

    # -- attention ----------------------------------------------------------

    def select_attention_frames(
        self,
        current_idx: int,
        limit: int,
        *,
        cond_through: int | None = None,
    ) -> list[int]:
        """Frames whose memory may condition the segmentation of ``current_idx``.

        The ``limit`` most recent current-shaped entries strictly below
        ``current_idx``, plus every preload condition frame.  When
        ``cond_through`` is given, current-shaped condition entries in
        ``(current_idx, cond_through]`` are added as well; reverse propagation
        uses this so that a newer prompt can correct older frames.
        """
        if limit < 1:
            raise ValueError("attention limit must be >= 1")
        chosen = [
            f for f in self.preload_frame_inds
            if f in self.cond_frame_outputs and self.is_current(self.cond_frame_outputs[f])
        ]
        recent = []
        pos = bisect_left(self._keys, current_idx) - 1
        while pos >= 0 and len(recent) < limit:
            f = self._keys[pos]
            pos -= 1
            if f in self.preload_frame_inds:
                continue
            if self.is_current(self.entry(f)):
                recent.append(f)
        chosen.extend(recent)
        if cond_through is not None:
            lo = bisect_right(self._cond_keys, current_idx)
            hi = bisect_right(self._cond_keys, cond_through)
            for f in self._cond_keys[lo:hi]:
                if self.is_current(self.cond_frame_outputs[f]):
                    chosen.append(f)
        return sorted(set(chosen))

    # -- writes -------------------------------------------------------------

    def write_frame_output(self, frame_idx: int, is_condition: bool, rows: np.ndarray) -> MemoryEntry:
        rows = np.asarray(rows, dtype=np.float32)
        n = len(self.registry)
        if rows.ndim != 2 or rows.shape != (n, FEATURE_DIM):
            raise ShapeError(f"expected rows of shape {(n, FEATURE_DIM)}, got {rows.shape}")
        known = frame_idx in self
        # condition status is sticky: once prompted, a frame stays a condition frame
        if frame_idx in self.cond_frame_outputs:
            is_condition = True
        if is_condition:
            self.non_cond_frame_outputs.pop(frame_idx, None)
            for per_obj in self.per_obj_outputs.values():
                per_obj[NON_COND].pop(frame_idx, None)
            target, kind = self.cond_frame_outputs, COND
            self.consolidated_frame_inds.add(frame_idx)
        else:
            target, kind = self.non_cond_frame_outputs, NON_COND
        entry = MemoryEntry(frame_idx, is_condition, rows.copy(), n)
        if not known:
            insort(self._keys, frame_idx)
        if is_condition and frame_idx not in self.cond_frame_outputs:
            insort(self._cond_keys, frame_idx)
        target[frame_idx] = entry
        for obj, slot in self.registry.slot_of.items():
            self.per_obj_outputs[obj][kind][frame_idx] = entry.rows[slot].copy()
        return entry

    def _drop(self, f: int) -> None:
        # mirrors the release order of the reference predictor: non-cond
        # outputs first, then cond outputs and the consolidated index
        self.non_cond_frame_outputs.pop(f, None)
        for per_obj in self.per_obj_outputs.values():
            per_obj[NON_COND].pop(f, None)
        self.cond_frame_outputs.pop(f, None)
        self.consolidated_frame_inds.discard(f)
        for per_obj in self.per_obj_outputs.values():
            per_obj[COND].pop(f, None)
        for keys in (self._keys, self._cond_keys):
            pos = bisect_left(keys, f)
            if pos < len(keys) and keys[pos] == f:
                del keys[pos]

    def release_old_frames(self, current_idx: int, max_inference_state_frames: int, frame_store=None) -> list[int]:
        """Evict every frame at distance >= ``max_inference_state_frames`` from
        ``current_idx``; preload frames are never evicted.  The paired frame
        store (if given) releases the same range.  Returns evicted bank frames.
        """
        cutoff = current_idx - max_inference_state_frames + 1
        old = [f for f in self._keys if f < cutoff and f not in self.preload_frame_inds]
        for f in old:
            self._drop(f)
        if frame_store is not None:
            frame_store.release_frames_before(cutoff, protected=self.preload_frame_inds)
        return old

    # -- preload ------------------------------------------------------------

    def export_preload(self, frame_indices: Iterable[int]) -> dict[str, Any]:
        frame_indices = sorted(set(frame_indices))
        n = len(self.registry)
        entries = []
        for f in frame_indices:
            entry = self.entry(f)
            if entry is None:
                raise MissingFrameError(f"frame {f} is not in the memory bank")
            rows = entry.rows
            if rows.shape[0] < n:
                rows = np.vstack([rows, null_rows(n - rows.shape[0])])
            entries.append({
                "frame_idx": self.preload_source.get(f, f),
                "is_condition": True,
                "rows": rows.astype(np.float32).tolist(),
            })
        entries.sort(key=lambda e: e["frame_idx"])
        return {
            "format": PRELOAD_FORMAT,
            "version": PRELOAD_VERSION,
            "registry": list(self.registry.obj_ids),
            "entries": entries,
        }


def validate_preload(payload: Any) -> None:
    if not isinstance(payload, dict):
        raise PreloadFormatError("preload payload must be a mapping")
    if payload.get("format") != PRELOAD_FORMAT:
        raise PreloadFormatError(f"not a preload bank: format={payload.get('format')!r}")
    if payload.get("version") != PRELOAD_VERSION:
        raise PreloadFormatError(f"unsupported preload version {payload.get('version')!r}")
    registry = payload.get("registry")
    entries = payload.get("entries")
    if not isinstance(registry, list) or not isinstance(entries, list):
        raise PreloadFormatError("registry and entries must be lists")
    if len(set(registry)) != len(registry):
        raise PreloadFormatError("duplicate object ids in preload registry")
    seen = set()
    for e in entries:
        try:
            f, rows = int(e["frame_idx"]), e["rows"]
        except (KeyError, TypeError, ValueError) as exc:
            raise PreloadFormatError(f"malformed preload entry: {e!r}") from exc
        if f in seen:
            raise PreloadFormatError(f"duplicate preload frame {f}")
        seen.add(f)
        arr = np.asarray(rows, dtype=np.float32)
        if arr.shape != (len(registry), FEATURE_DIM):
            raise PreloadFormatError(
                f"preload frame {f}: rows shape {arr.shape} does not match registry"
            )


def init_state(preload: dict[str, Any] | None = None) -> MemoryBank:
    bank = MemoryBank()
    if preload is None:
        return bank
    validate_preload(preload)
    for obj_id in preload["registry"]:
        bank.register_object(obj_id)
    entries = sorted(preload["entries"], key=lambda e: int(e["frame_idx"]))
    n = len(entries)
    for i, e in enumerate(entries):
        remapped = i - n  # -n .. -1, source order preserved
        bank.preload_frame_inds.add(remapped)
        bank.preload_source[remapped] = int(e["frame_idx"])
        bank.write_frame_output(remapped, True, np.asarray(e["rows"], dtype=np.float32))
    return bank


def dumps_preload(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def dump_preload(payload: dict[str, Any], path) -> None:
    Path(path).write_text(dumps_preload(payload))


def load_preload(path) -> dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PreloadFormatError(f"{path}: not valid JSON ({exc})") from exc
    validate_preload(payload)
    return payload
