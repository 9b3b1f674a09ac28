"""Two-worker streaming pipeline.

The inference worker streams scenario frames through the propagation engine
and hands every refreshed frame to the post-processing worker through a
bounded FIFO.  Each hand-off carries a revision tag: a frame that a later
propagation re-segments is pushed again with the next revision, and the
consumer simply re-evaluates it.  Frame results also sit in a shared
``VideoSegments`` map until the consumer has processed their latest
revision; the producer waits whenever that map would outgrow M + K entries.
"""
from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Hashable, Mapping

from .billiards import POCKET_IDS, NoiseConfig, Scenario, is_pocket_id
from .errors import ConfigError, GeometryError, OrderingError
from .events import EventLog, EventPostProcessor, TableGeometry, ThresholdConfig, derive_geometry
from .frame_store import FAST, SINGLE
from .masks import Mask, compute_centroid
from .memory_bank import MemoryBank, init_state, load_preload
from .propagation import PropagationConfig, PropagationEngine, PropagationStats

log = logging.getLogger(__name__)

_END = None  # end-of-stream sentinel


@dataclass
class PipelineConfig:
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    thresholds: ThresholdConfig | None = None  # None: derived from the scene
    noise: NoiseConfig | None = None           # None: the scenario's own noise
    scenario_path: str | None = None
    preload_path: str | None = None
    out_events: str | None = None
    out_memory_report: str | None = None
    out_figure: str | None = None
    seed: int | None = None
    frames: int | None = None
    detector_enabled: bool = True
    precision: str = SINGLE
    tier: str = FAST
    consumer_delay: float = 0.0
    geometry_patience: int | None = None  # frames held while pockets are unresolved
    queue_factor: int = 4

    def validate(self) -> None:
        self.propagation.validate()
        if self.consumer_delay < 0:
            raise ConfigError("consumer_delay must be non-negative")
        if self.queue_factor < 1:
            raise ConfigError("queue_factor must be >= 1")
        if self.frames is not None and self.frames < 0:
            raise ConfigError("frames must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "propagation" in d:
                d["propagation"] = PropagationConfig.from_dict(d["propagation"])
            if d.get("thresholds") is not None:
                d["thresholds"] = ThresholdConfig(**d["thresholds"])
            if d.get("noise") is not None:
                d["noise"] = NoiseConfig(**d["noise"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


class VideoSegments:
    """Frame results awaiting the consumer, keyed by frame index.

    ``publish`` blocks while adding a batch would exceed ``capacity``
    distinct frames.  An entry is released once the consumer finishes the
    revision currently stored for it.
    """

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self.entries: dict[int, tuple[int, dict]] = {}
        self.peak = 0
        self.waits = 0
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self):
        with self._cond:
            return len(self.entries)

    def publish(self, batch: Mapping[int, tuple[int, dict]], timeout: float | None = None) -> bool:
        with self._cond:
            def fits():
                return self._closed or self.capacity is None or \
                    len(self.entries.keys() | batch.keys()) <= self.capacity
            if not fits():
                self.waits += 1
                if not self._cond.wait_for(fits, timeout):
                    return False
            if self._closed:
                return False
            self.entries.update(batch)
            self.peak = max(self.peak, len(self.entries))
            return True

    def release_consumed(self, frame_idx: int, revision: int | None = None) -> bool:
        """Drop the entry if ``revision`` is the stored one (or not given).

        Releasing an absent or superseded entry is a no-op.
        """
        with self._cond:
            held = self.entries.get(frame_idx)
            if held is None or (revision is not None and held[0] != revision):
                return False
            del self.entries[frame_idx]
            self._cond.notify_all()
            return True

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class FramesQueue:
    """Bounded FIFO of (frame_idx, masks, revision) with wait accounting."""

    def __init__(self, maxsize: int = 0):
        self._q: queue.Queue = queue.Queue(maxsize)
        self.waits = 0
        self.pushed = 0
        self.peak = 0

    def put(self, item, abort: threading.Event) -> bool:
        try:
            self._q.put_nowait(item)
        except queue.Full:
            self.waits += 1
            while True:
                if abort.is_set():
                    return False
                try:
                    self._q.put(item, timeout=0.05)
                    break
                except queue.Full:
                    continue
        if item is not _END:
            self.pushed += 1
        self.peak = max(self.peak, self._q.qsize())
        return True

    def get(self, timeout: float | None = None):
        return self._q.get(timeout=timeout)

    def empty(self) -> bool:
        return self._q.empty()

    def qsize(self) -> int:
        return self._q.qsize()


def pocket_centres(masks: Mapping[Hashable, Mask]) -> dict[str, tuple[float, float]] | None:
    """Centroids of the six pocket masks, or None while any is missing."""
    out = {}
    for name, pid in POCKET_IDS.items():
        m = masks.get(pid)
        c = compute_centroid(m) if m is not None else None
        if c is None:
            return None
        out[name] = c
    return out


@dataclass
class PipelineResult:
    log: EventLog
    stats: PropagationStats
    memory_rows: list[dict]
    engine: PropagationEngine
    geometry: TableGeometry | None
    segments_peak: int
    segments_left: int
    queue_left: int
    backpressure_waits: int
    queue_peak: int
    items_pushed: int
    consumed: list[tuple[int, int]]
    pushed: list[tuple[int, int]]
    partial: bool = False
    error: BaseException | None = None
    threads_alive: int = 0
    elapsed: float = 0.0

    @property
    def events(self):
        return self.log.records()

    def summary(self) -> dict:
        return {
            "partial": self.partial,
            "error": None if self.error is None else f"{type(self.error).__name__}: {self.error}",
            "events": len(self.log),
            "frames_propagated_total": self.stats.frames_propagated_total,
            "propagation_calls": self.stats.propagation_calls,
            "detector_calls": self.stats.detector_calls,
            "peak_resident_frames": self.engine.peak_resident,
            "floor_resident_frames": self.engine.floor_resident,
            "video_segments_peak": self.segments_peak,
            "backpressure_waits": self.backpressure_waits,
            "items_pushed": self.items_pushed,
            "items_consumed": len(self.consumed),
        }


def _scenario_for(config: PipelineConfig, scenario: Scenario | None) -> Scenario:
    if scenario is None:
        if config.scenario_path is None:
            raise ConfigError("no scenario given")
        scenario = Scenario.load(config.scenario_path)
    if config.noise is not None:
        scenario.noise = config.noise
    if config.seed is not None:
        scenario.noise.seed = config.seed
        scenario.seed = config.seed
    if config.frames is not None:
        scenario.frames = config.frames
    return scenario


def thresholds_for(scenario: Scenario) -> ThresholdConfig:
    radius = scenario.balls[0].radius if scenario.balls else 10.0
    t = scenario.table
    return ThresholdConfig.for_scene(t.pocket_radius, radius, t.friction_decel)


def run(config: PipelineConfig, scenario: Scenario | None = None, preload: dict | None = None,
        bank: MemoryBank | None = None, *, strict: bool = False) -> PipelineResult:
    """Run producer and consumer threads to completion.

    Config problems raise :class:`ConfigError` before any thread starts.
    A failure inside either worker shuts both down and is reported through
    ``result.partial`` and ``result.error``; with ``strict`` it is re-raised
    after the outputs are written.
    """
    config.validate()
    scenario = _scenario_for(config, scenario)
    if preload is None and config.preload_path is not None:
        preload = load_preload(config.preload_path)
    if bank is None:
        bank = init_state(preload) if preload is not None else MemoryBank()
    pc = config.propagation
    backend = scenario.backend(config.detector_enabled)
    engine = PropagationEngine(pc, backend.segmenter, backend.detector if config.detector_enabled else None,
                               bank=bank)
    thresholds = config.thresholds or thresholds_for(scenario)

    M, K = pc.max_frames_to_track, pc.buffer_size
    frames_q = FramesQueue(0 if M is None else config.queue_factor * M)
    segments = VideoSegments(None if M is None else M + K)
    patience = config.geometry_patience
    if patience is None:
        patience = M + K if M is not None else 50
    horizon = None if M is None else M + K + 4

    abort = threading.Event()
    errors: list[BaseException] = []
    revisions: dict[int, int] = {}
    pushed: list[tuple[int, int]] = []
    consumed: list[tuple[int, int]] = []
    state: dict = {"geometry": None, "post": None}

    def push(results: dict[int, dict]) -> bool:
        batch = {}
        for f in sorted(results):
            revisions[f] = revisions.get(f, 0) + 1
            batch[f] = (revisions[f], results[f])
        while not segments.publish(batch, timeout=0.05):
            if abort.is_set():
                return False
        for f, (rev, masks) in batch.items():
            if not frames_q.put((f, masks, rev), abort):
                return False
            pushed.append((f, rev))
        return True

    def producer():
        try:
            for frame in scenario.frame_records(precision=config.precision, tier=config.tier):
                if abort.is_set():
                    return
                results = engine.ingest_frame(frame)
                if results is not None and not push(results):
                    return
            results = engine.finish()
            if results is not None:
                push(results)
        except BaseException as exc:  # reported, not swallowed
            log.error("inference worker failed: %s", exc)
            errors.append(exc)
            abort.set()
        finally:
            frames_q.put(_END, threading.Event())

    def consumer():
        held: dict[int, tuple[dict, int]] = {}
        last_rev: dict[int, int] = {}
        high = -1
        try:
            while True:
                try:
                    item = frames_q.get(timeout=0.05)
                except queue.Empty:
                    if abort.is_set():
                        return
                    continue
                if item is _END:
                    if held and state["post"] is None:
                        raise GeometryError("stream ended before the six pockets were segmented")
                    return
                if abort.is_set():
                    continue  # drain so the producer never blocks on a dead consumer
                if state["post"] is None:
                    # park results (latest revision per frame) until the
                    # pockets are known; parked frames leave VideoSegments
                    f, masks, rev = item
                    held[f] = (masks, rev)
                    segments.release_consumed(f, rev)
                    pockets = pocket_centres(masks)
                    if pockets is not None:
                        geometry = derive_geometry(pockets, thresholds.buffer_margin, thresholds.near_pocket_radius)
                        state["geometry"] = geometry
                        state["post"] = EventPostProcessor(geometry, thresholds, horizon, ignore=is_pocket_id)
                    elif len(held) > patience:
                        raise GeometryError(f"pockets unresolved after {patience} frames")
                    if state["post"] is None:
                        continue
                    batch = [(g, *held[g]) for g in sorted(held)]
                    held = {}
                else:
                    batch = [item]
                for f, masks, rev in batch:
                    if f > high + 1:
                        raise OrderingError(f"frame {f} reached the consumer before frame {high + 1}")
                    if rev <= last_rev.get(f, 0):
                        raise OrderingError(f"frame {f}: revision {rev} after {last_rev[f]}")
                    last_rev[f] = rev
                    if config.consumer_delay:
                        time.sleep(config.consumer_delay)
                    state["post"].process_frame(f, masks)
                    consumed.append((f, rev))
                    high = max(high, f)
                    segments.release_consumed(f, rev)
                    if horizon is not None:
                        for old in [g for g in last_rev if g < f - horizon]:
                            del last_rev[old]
        except BaseException as exc:
            log.error("post-processing worker failed: %s", exc)
            errors.append(exc)
            abort.set()
            segments.close()
            while True:  # keep draining until the producer signs off
                try:
                    if frames_q.get(timeout=0.05) is _END:
                        return
                except queue.Empty:
                    continue

    t0 = time.perf_counter()
    workers = [threading.Thread(target=producer, name="inference"),
               threading.Thread(target=consumer, name="post-process")]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    elapsed = time.perf_counter() - t0

    post = state["post"]
    result = PipelineResult(
        log=post.log if post is not None else EventLog(),
        stats=engine.stats,
        memory_rows=engine.memory_rows,
        engine=engine,
        geometry=state["geometry"],
        segments_peak=segments.peak,
        segments_left=len(segments),
        queue_left=frames_q.qsize(),
        backpressure_waits=segments.waits + frames_q.waits,
        queue_peak=frames_q.peak,
        items_pushed=frames_q.pushed,
        consumed=consumed,
        pushed=pushed,
        partial=bool(errors),
        error=errors[0] if errors else None,
        threads_alive=sum(w.is_alive() for w in workers),
        elapsed=elapsed,
    )
    write_outputs(config, result)
    if strict and result.error is not None:
        raise result.error
    return result


def write_outputs(config: PipelineConfig, result: PipelineResult) -> None:
    from .report import plot_memory_report, write_memory_report

    if config.out_events:
        result.log.write_jsonl(config.out_events)
    if config.out_memory_report:
        write_memory_report(result.memory_rows, config.out_memory_report, partial=result.partial)
    if config.out_figure:
        plot_memory_report(result.memory_rows, config.out_figure)
