"""Deterministic 2-D billiards world.

The world is the frame source, the stand-in for the detector and segmenter,
and the ground-truth oracle for table events.  Units are pixels and frames;
the table spans ``[0, width] x [0, height]`` with y pointing down, so "top"
is the ``y = 0`` cushion.

Motion inside a frame is event driven: the earliest contact (ball-ball,
cushion, pocket jaw, pocket capture) is found analytically, resolved, and
integration continues for the rest of the frame.  Balls have equal mass.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Hashable, Iterator, Mapping, Sequence

import numpy as np

from .frame_store import FAST, SINGLE, FrameRecord
from .masks import Mask
from .propagation import PromptBox

POCKET_NAMES = ("TL", "TM", "TR", "BL", "BM", "BR")
POCKET_ID_BASE = 1000
POCKET_IDS = {name: POCKET_ID_BASE + i for i, name in enumerate(POCKET_NAMES)}
BOUNDARIES = ("top", "bottom", "left", "right")

_EPS = 1e-12


def is_pocket_id(obj_id: Hashable) -> bool:
    return isinstance(obj_id, int) and POCKET_ID_BASE <= obj_id < POCKET_ID_BASE + len(POCKET_NAMES)


@dataclass(frozen=True)
class TableSpec:
    width: float = 800.0
    height: float = 400.0
    pocket_radius: float = 18.0
    cushion_restitution: float = 1.0
    friction_decel: float = 0.05
    # rounded pocket jaws: one circle on each side of every pocket mouth,
    # centred just outside the cushion line
    jaw_radius: float = 8.0
    jaw_offset: float = 24.0
    jaw_depth: float = 6.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("table dimensions must be positive")
        if not 0 < self.pocket_radius < min(self.width, self.height) / 4:
            raise ValueError("pocket_radius must be positive and below a quarter of the short side")
        if not 0.0 <= self.cushion_restitution <= 1.0:
            raise ValueError("cushion_restitution must lie in [0, 1]")
        if self.friction_decel < 0:
            raise ValueError("friction_decel must be non-negative")

    @property
    def pockets(self) -> dict[str, tuple[float, float]]:
        w, h = self.width, self.height
        return {
            "TL": (0.0, 0.0), "TM": (w / 2, 0.0), "TR": (w, 0.0),
            "BL": (0.0, h), "BM": (w / 2, h), "BR": (w, h),
        }

    @property
    def jaws(self) -> list[tuple[tuple[float, float], str, str]]:
        """(centre, boundary, pocket) for each jaw circle."""
        w, h = self.width, self.height
        a, b = self.jaw_offset, self.jaw_depth
        out = []
        for name, (px, py) in self.pockets.items():
            wall = "top" if py == 0 else "bottom"
            jy = -b if py == 0 else h + b
            for dx in (-a, a):
                if 0 <= px + dx <= w:
                    out.append(((px + dx, jy), wall, name))
            if px in (0.0, w):
                side = "left" if px == 0 else "right"
                jx = -b if px == 0 else w + b
                dy = a if py == 0 else -a
                out.append(((jx, py + dy), side, name))
        return out


@dataclass(frozen=True)
class BallState:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    radius: float = 10.0
    pocketed: bool = False
    enter_frame: int = 0

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)

    def on_table(self, frame: int) -> bool:
        return not self.pocketed and frame >= self.enter_frame


@dataclass(frozen=True)
class GroundTruthEvent:
    kind: str  # goal | collision | rebound
    frame: int
    balls: tuple[int, ...]
    location: str | None = None
    detail: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "frame": self.frame, "balls": list(self.balls),
                "location": self.location, "detail": self.detail}


@dataclass(frozen=True)
class Shot:
    frame: int
    ball: int
    impulse: tuple[float, float]


@dataclass
class NoiseConfig:
    box_jitter_px: float = 0.0
    dropout_prob: float = 0.0
    mask_erosion_px: int = 0
    seed: int = 0
    # (frame, obj_id) pairs the detector always misses; obj_id None drops the frame
    forced_dropouts: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.box_jitter_px < 0 or self.mask_erosion_px < 0:
            raise ValueError("noise magnitudes must be non-negative")
        self.forced_dropouts = [tuple(p) for p in self.forced_dropouts]

    def forced(self, frame: int, obj_id) -> bool:
        return (frame, obj_id) in self.forced_dropouts or (frame, None) in self.forced_dropouts


@dataclass(frozen=True)
class World:
    table: TableSpec
    balls: tuple[BallState, ...]
    frame: int = 0
    shots: tuple[Shot, ...] = ()

    def ball(self, ball_id: int) -> BallState:
        for b in self.balls:
            if b.id == ball_id:
                return b
        raise KeyError(ball_id)

    def active(self) -> list[BallState]:
        return [b for b in self.balls if b.on_table(self.frame)]

    def kinetic_energy(self) -> float:
        return sum(0.5 * (b.velocity[0] ** 2 + b.velocity[1] ** 2) for b in self.active())


# -- physics ------------------------------------------------------------------


def _contact_time(dx, dy, dvx, dvy, dist) -> float | None:
    """Earliest t >= 0 at which |d + dv t| == dist while closing, else None."""
    b = dx * dvx + dy * dvy
    if b >= 0:
        return None
    a = dvx * dvx + dvy * dvy
    c = dx * dx + dy * dy - dist * dist
    if c <= 0:
        return 0.0
    disc = b * b - a * c
    if disc < 0:
        return None
    return c / (-b + math.sqrt(disc))


class _Body:
    __slots__ = ("id", "x", "y", "vx", "vy", "r", "live", "src")

    def __init__(self, ball: BallState):
        self.src = ball
        self.id = ball.id
        self.x, self.y = ball.position
        self.vx, self.vy = ball.velocity
        self.r = ball.radius
        self.live = True


def step(world: World) -> tuple[World, list[GroundTruthEvent]]:
    """Advance one frame.  Events carry the index of the new frame."""
    t_frame = world.frame + 1
    table = world.table
    e = table.cushion_restitution
    shots = {}
    for s in world.shots:
        if s.frame == t_frame:
            dvx, dvy = shots.get(s.ball, (0.0, 0.0))
            shots[s.ball] = (dvx + s.impulse[0], dvy + s.impulse[1])

    bodies = []
    for ball in world.balls:
        body = _Body(ball)
        body.live = ball.on_table(world.frame)
        if body.live:
            if ball.id in shots:
                body.vx += shots[ball.id][0]
                body.vy += shots[ball.id][1]
            sp = math.hypot(body.vx, body.vy)
            f = table.friction_decel
            if f > 0:
                if sp <= f:
                    body.vx = body.vy = 0.0
                else:
                    body.vx *= (sp - f) / sp
                    body.vy *= (sp - f) / sp
        bodies.append(body)

    events: list[GroundTruthEvent] = []
    pockets = table.pockets
    jaws = table.jaws
    t = 0.0
    for _ in range(1000):
        live = [b for b in bodies if b.live]
        best = None  # (dt, kind, payload)

        def consider(dt, kind, payload):
            nonlocal best
            if dt is not None and dt <= 1.0 - t + _EPS and (best is None or dt < best[0]):
                best = (dt, kind, payload)

        remaining = 1.0 - t
        reach = {id(b): math.hypot(b.vx, b.vy) * remaining + 1e-9 for b in live}
        for i, p in enumerate(live):
            rp = reach[id(p)]
            for q in live[i + 1:]:
                if math.hypot(q.x - p.x, q.y - p.y) - p.r - q.r > rp + reach[id(q)]:
                    continue
                consider(_contact_time(q.x - p.x, q.y - p.y, q.vx - p.vx, q.vy - p.vy, p.r + q.r),
                         "ball", (p, q))
            if rp <= 1e-9:
                continue
            for name, (px, py) in pockets.items():
                if math.hypot(p.x - px, p.y - py) - table.pocket_radius > rp:
                    continue
                consider(_contact_time(p.x - px, p.y - py, p.vx, p.vy, table.pocket_radius), "pocket", (p, name))
            for centre, wall, pname in jaws:
                if math.hypot(p.x - centre[0], p.y - centre[1]) - p.r - table.jaw_radius > rp:
                    continue
                consider(_contact_time(p.x - centre[0], p.y - centre[1], p.vx, p.vy, p.r + table.jaw_radius),
                         "jaw", (p, centre, wall))
            if p.vx < 0:
                consider(max(0.0, (p.x - p.r) / -p.vx), "cushion", (p, "left"))
            if p.vx > 0:
                consider(max(0.0, (table.width - p.r - p.x) / p.vx), "cushion", (p, "right"))
            if p.vy < 0:
                consider(max(0.0, (p.y - p.r) / -p.vy), "cushion", (p, "top"))
            if p.vy > 0:
                consider(max(0.0, (table.height - p.r - p.y) / p.vy), "cushion", (p, "bottom"))

        dt = (1.0 - t) if best is None else min(best[0], 1.0 - t)
        for b in live:
            b.x += b.vx * dt
            b.y += b.vy * dt
        t += dt
        if best is None:
            break
        kind, payload = best[1], best[2]
        if kind == "ball":
            p, q = payload
            nx, ny = q.x - p.x, q.y - p.y
            d = math.hypot(nx, ny)
            nx, ny = nx / d, ny / d
            pn = p.vx * nx + p.vy * ny
            qn = q.vx * nx + q.vy * ny
            p.vx += (qn - pn) * nx
            p.vy += (qn - pn) * ny
            q.vx += (pn - qn) * nx
            q.vy += (pn - qn) * ny
            events.append(GroundTruthEvent("collision", t_frame, tuple(sorted((p.id, q.id)))))
        elif kind == "pocket":
            p, name = payload
            p.live = False
            p.vx = p.vy = 0.0
            events.append(GroundTruthEvent("goal", t_frame, (p.id,), name))
        elif kind == "jaw":
            p, centre, wall = payload
            nx, ny = p.x - centre[0], p.y - centre[1]
            d = math.hypot(nx, ny)
            nx, ny = nx / d, ny / d
            vn = p.vx * nx + p.vy * ny
            p.vx -= (1 + e) * vn * nx
            p.vy -= (1 + e) * vn * ny
            events.append(GroundTruthEvent("rebound", t_frame, (p.id,), wall, "jaw"))
        else:
            p, wall = payload
            if wall in ("left", "right"):
                p.vx = -e * p.vx
            else:
                p.vy = -e * p.vy
            events.append(GroundTruthEvent("rebound", t_frame, (p.id,), wall))
        if t >= 1.0:
            # zero-length remainder; contacts at exactly t=1 are already resolved
            break
    else:  # pragma: no cover - pathological stacking
        raise RuntimeError(f"frame {t_frame}: contact resolution did not converge")

    new_balls = []
    for body in bodies:
        ball = body.src
        if not ball.on_table(t_frame):
            pass
        elif not ball.on_table(world.frame):
            pass  # enters the table on this frame at its scripted position
        elif body.live:
            ball = replace(ball, position=(body.x, body.y), velocity=(body.vx, body.vy))
        else:
            ball = replace(ball, position=(body.x, body.y), velocity=(0.0, 0.0), pocketed=True)
        new_balls.append(ball)
    return replace(world, balls=tuple(new_balls), frame=t_frame), _merge_events(events)


def _merge_events(events: list[GroundTruthEvent]) -> list[GroundTruthEvent]:
    # one record per (kind, balls) within a frame; repeated contacts of the
    # same pair inside one frame are a single physical event at this timescale
    seen, out = set(), []
    for ev in events:
        key = (ev.kind, ev.balls)
        if key not in seen:
            seen.add(key)
            out.append(ev)
    return out


def simulate(world: World, n_frames: int) -> tuple[list[World], list[GroundTruthEvent]]:
    """States for frames ``0 .. n_frames-1`` and every event in between."""
    states = [world]
    events: list[GroundTruthEvent] = []
    for _ in range(n_frames - 1):
        world, evs = step(world)
        states.append(world)
        events.extend(evs)
    return states, events


# -- rendering ----------------------------------------------------------------


def _ellipse_mask(cx, cy, a, b, ux, uy) -> Mask:
    ext = max(a, b)
    x0, x1 = math.floor(cx - ext), math.ceil(cx + ext)
    y0, y1 = math.floor(cy - ext), math.ceil(cy + ext)
    xs = np.arange(x0, x1 + 1, dtype=np.float64) - cx
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - cy
    along = xs * ux + ys * uy
    across = ys * ux - xs * uy
    bits = (along / a) ** 2 + (across / b) ** 2 <= 1.0
    return Mask(x0, y0, bits)


def ball_shape(ball: BallState, stretch: float = 0.0, erosion: float = 0.0):
    """(semi-major, semi-minor, unit direction) of a ball's rendered ellipse."""
    r = max(ball.radius - erosion, 0.5)
    sp = ball.speed
    if sp > 0:
        ux, uy = ball.velocity[0] / sp, ball.velocity[1] / sp
    else:
        ux, uy = 1.0, 0.0
    return r * (1.0 + stretch * sp), r, (ux, uy)


def render_ball(ball: BallState, stretch: float = 0.0, erosion: float = 0.0) -> Mask:
    a, b, (ux, uy) = ball_shape(ball, stretch, erosion)
    return _ellipse_mask(ball.position[0], ball.position[1], a, b, ux, uy)


@lru_cache(maxsize=64)
def _pocket_mask(px: float, py: float, radius: float) -> Mask:
    return _ellipse_mask(px, py, radius, radius, 1.0, 0.0)


def render_pocket(table: TableSpec, name: str) -> Mask:
    px, py = table.pockets[name]
    return _pocket_mask(px, py, table.pocket_radius)


def render_masks(world: World, stretch: float = 0.0, erosion: float = 0.0) -> dict[int, Mask]:
    """Mask per ball on the table.  Fast balls are stretched along their
    velocity by ``1 + stretch * speed``; pocketed balls are absent."""
    return {b.id: render_ball(b, stretch, erosion) for b in world.active()}


# -- detector / segmenter stand-ins -----------------------------------------


def _box_of(cx, cy, a, b, ux, uy) -> tuple[float, float, float, float]:
    hw = math.sqrt((a * ux) ** 2 + (b * uy) ** 2)
    hh = math.sqrt((a * uy) ** 2 + (b * ux) ** 2)
    return cx - hw, cy - hh, cx + hw, cy + hh


def detect(world: World, noise: NoiseConfig, stretch: float = 0.0) -> list[PromptBox]:
    """Boxes around every ball on the table plus the six pockets."""
    rng = np.random.default_rng([noise.seed, world.frame])
    objects = []
    for ball in sorted(world.active(), key=lambda b: b.id):
        a, b, (ux, uy) = ball_shape(ball, stretch)
        objects.append((ball.id, _box_of(*ball.position, a, b, ux, uy)))
    R = world.table.pocket_radius
    for name, (px, py) in world.table.pockets.items():
        objects.append((POCKET_IDS[name], (px - R, py - R, px + R, py + R)))
    out = []
    for obj_id, box in objects:
        # draw for every object so dropout of one does not shift the stream
        jitter = rng.normal(0.0, 1.0, 4) * noise.box_jitter_px
        dropped = rng.random() < noise.dropout_prob
        if dropped or noise.forced(world.frame, obj_id):
            continue
        x0, y0, x1, y1 = (v + j for v, j in zip(box, jitter))
        if x1 <= x0:
            x0, x1 = (x0 + x1) / 2 - 0.5, (x0 + x1) / 2 + 0.5
        if y1 <= y0:
            y0, y1 = (y0 + y1) / 2 - 0.5, (y0 + y1) / 2 + 0.5
        out.append(PromptBox(obj_id, (x0, y0, x1, y1), 1.0))
    return out


def segment(
    world: World,
    prompts: Mapping[Hashable, PromptBox],
    remembered: set,
    noise: NoiseConfig | None = None,
    stretch: float = 0.0,
) -> dict[Hashable, Mask]:
    """Behavioural segmenter: an object is segmented iff it is prompted on
    this frame or some attention frame remembers it, and it is visible."""
    erosion = noise.mask_erosion_px if noise is not None else 0
    out: dict[Hashable, Mask] = {}
    for ball in world.active():
        if ball.id in prompts or ball.id in remembered:
            out[ball.id] = render_ball(ball, stretch, erosion)
    for name in POCKET_NAMES:
        pid = POCKET_IDS[name]
        if pid in prompts or pid in remembered:
            out[pid] = render_pocket(world.table, name)
    return out


class SyntheticBackend:
    """Detector and segmenter callables over frames whose payload is a World."""

    def __init__(self, noise: NoiseConfig | None = None, stretch: float = 0.0, detector_enabled: bool = True):
        self.noise = noise or NoiseConfig()
        self.stretch = stretch
        self.detector_enabled = detector_enabled

    def detector(self, frame: FrameRecord) -> list[PromptBox]:
        if not self.detector_enabled:
            return []
        return detect(frame.payload, self.noise, self.stretch)

    def segmenter(self, frame: FrameRecord, prompts, remembered) -> dict:
        return segment(frame.payload, prompts, remembered, self.noise, self.stretch)


# -- scenarios ----------------------------------------------------------------


@dataclass
class Scenario:
    table: TableSpec = field(default_factory=TableSpec)
    balls: list[BallState] = field(default_factory=list)
    shots: list[Shot] = field(default_factory=list)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    frames: int = 300
    stretch: float = 0.05

    def initial_world(self) -> World:
        return World(self.table, tuple(self.balls), 0, tuple(self.shots))

    def run(self, n_frames: int | None = None) -> tuple[list[World], list[GroundTruthEvent]]:
        return simulate(self.initial_world(), self.frames if n_frames is None else n_frames)

    def worlds(self, n_frames: int | None = None) -> Iterator[World]:
        n = self.frames if n_frames is None else n_frames
        world = self.initial_world()
        for i in range(n):
            if i:
                world, _ = step(world)
            yield world

    def frame_records(self, n_frames: int | None = None, *, native=(1920, 1080),
                      internal_side: int = 1024, precision: str = SINGLE, tier: str = FAST) -> Iterator[FrameRecord]:
        for world in self.worlds(n_frames):
            yield FrameRecord(world.frame, native[0], native[1], internal_side, world, precision, tier)

    def backend(self, detector_enabled: bool = True) -> SyntheticBackend:
        return SyntheticBackend(self.noise, self.stretch, detector_enabled)

    def to_dict(self) -> dict:
        t = self.table
        return {
            "table": {k: getattr(t, k) for k in TableSpec.__dataclass_fields__},
            "balls": [
                {"id": b.id, "pos": list(b.position), "vel": list(b.velocity),
                 "radius": b.radius, "enter_frame": b.enter_frame}
                for b in self.balls
            ],
            "shots": [{"frame": s.frame, "ball": s.ball, "impulse": list(s.impulse)} for s in self.shots],
            "noise": {
                "box_jitter_px": self.noise.box_jitter_px,
                "dropout_prob": self.noise.dropout_prob,
                "mask_erosion_px": self.noise.mask_erosion_px,
                "seed": self.noise.seed,
                "forced_dropouts": [list(p) for p in self.noise.forced_dropouts],
            },
            "seed": self.seed,
            "frames": self.frames,
            "stretch": self.stretch,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        table = TableSpec(**d.get("table", {}))
        balls = [
            BallState(int(b["id"]), tuple(map(float, b["pos"])), tuple(map(float, b.get("vel", (0, 0)))),
                      float(b.get("radius", 10.0)), False, int(b.get("enter_frame", 0)))
            for b in d.get("balls", [])
        ]
        ids = [b.id for b in balls]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ball ids in scenario")
        if any(is_pocket_id(i) for i in ids):
            raise ValueError(f"ball ids {POCKET_ID_BASE}..{POCKET_ID_BASE + 5} are reserved for pockets")
        shots = [Shot(int(s["frame"]), int(s["ball"]), tuple(map(float, s["impulse"]))) for s in d.get("shots", [])]
        noise = NoiseConfig(**d.get("noise", {}))
        return cls(table, balls, shots, noise, int(d.get("seed", 0)), int(d.get("frames", 300)),
                   float(d.get("stretch", 0.05)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def events_to_jsonl(events: Sequence[GroundTruthEvent]) -> str:
    return "".join(
        json.dumps({"kind": ev.kind, "frame": ev.frame, "balls": list(ev.balls), "location": ev.location}) + "\n"
        for ev in events
    )


def write_events_jsonl(events: Sequence[GroundTruthEvent], path) -> None:
    """Write to a path, or to an open text stream."""
    if hasattr(path, "write"):
        path.write(events_to_jsonl(events))
        return
    Path(path).write_text(events_to_jsonl(events))
