"""Billiards event detection from per-frame segmentation masks.

Each ball's mask is reduced to a centroid; velocity is the centroid
difference between consecutive frames and acceleration the difference of
consecutive velocities (three frames of data).  On top of these tracks three
detectors run frame by frame:

* goal      - the ball vanishes right after being near a pocket while
              heading into it;
* collision - a sudden velocity change shared with a nearby ball that was
              closing in, with the two accelerations pushing the balls apart;
* rebound   - a ball inside a cushion buffer zone stops heading into the
              cushion; irregular deflections close to a pocket fall back to
              a separate test for the rounded pocket jaws.

Frames may be re-processed with corrected masks.  Every result for a frame
replaces what was recorded for it before, and the log keeps a per-frame
revision counter so consumers can see which outcomes were corrected.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .errors import GeometryError
from .masks import Mask, compute_centroid

Vec = tuple[float, float]

_NORMALS = {  # unit vector pointing out of the table through each boundary
    "top": (0.0, -1.0),
    "bottom": (0.0, 1.0),
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
}


def _sub(a: Vec, b: Vec) -> Vec:
    return a[0] - b[0], a[1] - b[1]


def _dot(a: Vec, b: Vec) -> float:
    return a[0] * b[0] + a[1] * b[1]


def _norm(a: Vec) -> float:
    return math.hypot(a[0], a[1])


@dataclass
class ThresholdConfig:
    near_pocket_radius: float = 36.0
    velocity_change_threshold: float = 0.5
    proximity_radius: float = 44.0
    perpendicular_reversal_tolerance: float = 0.30
    parallel_consistency_tolerance: float = 0.25
    buffer_margin: float = 15.0
    # motion toward a boundary slower than this counts as not heading into it
    direction_deadband: float = 0.25
    # cosine above which a velocity counts as aimed at another ball
    aim_cos: float = 0.9

    def __post_init__(self):
        for name in ("near_pocket_radius", "velocity_change_threshold", "proximity_radius",
                     "perpendicular_reversal_tolerance", "parallel_consistency_tolerance",
                     "buffer_margin", "direction_deadband", "aim_cos"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_scene(cls, pocket_radius: float, ball_radius: float, friction_decel: float,
                  noise_floor: float = 0.5, **overrides) -> "ThresholdConfig":
        """Defaults anchored to scene scale.

        The velocity-change threshold is ``3 * friction_decel`` but never
        below ``noise_floor``: pixel-quantised centroids jitter by a few
        tenths of a pixel, which a second difference amplifies.
        """
        values = dict(
            near_pocket_radius=2.0 * pocket_radius,
            velocity_change_threshold=max(3.0 * friction_decel, noise_floor),
            proximity_radius=2.2 * 2.0 * ball_radius,
            buffer_margin=1.5 * ball_radius,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class TableGeometry:
    pockets: dict[str, Vec]
    boundaries: dict[str, float]
    buffer_margin: float = 15.0
    near_pocket_radius: float = 36.0

    def distance_to(self, boundary: str, p: Vec) -> float:
        b = self.boundaries[boundary]
        return {
            "top": p[1] - b,
            "bottom": b - p[1],
            "left": p[0] - b,
            "right": b - p[0],
        }[boundary]

    def zones(self, p: Vec) -> list[str]:
        return [name for name in _NORMALS if self.distance_to(name, p) <= self.buffer_margin]

    def nearest_pocket(self, p: Vec) -> tuple[str, float]:
        name = min(self.pockets, key=lambda n: math.dist(p, self.pockets[n]))
        return name, math.dist(p, self.pockets[name])


def derive_geometry(pockets, buffer_margin: float = 15.0, near_pocket_radius: float = 36.0) -> TableGeometry:
    """Name six pocket detections by position and derive the four boundaries.

    ``pockets`` may hold (x, y) points, objects with a ``center`` attribute,
    or a mapping whose values are either.
    """
    if isinstance(pockets, Mapping):
        pockets = list(pockets.values())
    pts = []
    for p in pockets:
        c = getattr(p, "center", p)
        pts.append((float(c[0]), float(c[1])))
    if len(pts) != 6:
        raise GeometryError(f"need exactly six pockets, got {len(pts)}")
    by_y = sorted(pts, key=lambda q: (q[1], q[0]))
    top, bottom = by_y[:3], by_y[3:]
    if not max(q[1] for q in top) < min(q[1] for q in bottom):
        raise GeometryError("cannot split pockets into a top and a bottom row")
    top.sort()
    bottom.sort()
    for row in (top, bottom):
        if not row[0][0] < row[1][0] < row[2][0]:
            raise GeometryError("pocket columns are ambiguous")
    span = top[2][0] - top[0][0]
    row_gap = min(q[1] for q in bottom) - max(q[1] for q in top)
    if row_gap < 0.1 * span:
        raise GeometryError("pocket rows are too close together to be a table")
    named = dict(zip(("TL", "TM", "TR"), top)) | dict(zip(("BL", "BM", "BR"), bottom))
    boundaries = {
        "top": sum(q[1] for q in top) / 3,
        "bottom": sum(q[1] for q in bottom) / 3,
        "left": (named["TL"][0] + named["BL"][0]) / 2,
        "right": (named["TR"][0] + named["BR"][0]) / 2,
    }
    inner_w = boundaries["right"] - boundaries["left"]
    inner_h = boundaries["bottom"] - boundaries["top"]
    if 2 * buffer_margin >= min(inner_w, inner_h):
        raise GeometryError("buffer zones would cover the whole playing field")
    return TableGeometry(named, boundaries, buffer_margin, near_pocket_radius)


class BallTrack:
    """Centroids of one ball keyed by frame; velocity and acceleration are
    derived on demand and only where the required frames are present."""

    def __init__(self):
        self.centroids: dict[int, Vec] = {}

    def __contains__(self, frame: int) -> bool:
        return frame in self.centroids

    def position(self, frame: int) -> Vec | None:
        return self.centroids.get(frame)

    def velocity(self, frame: int) -> Vec | None:
        a, b = self.centroids.get(frame - 1), self.centroids.get(frame)
        if a is None or b is None:
            return None
        return _sub(b, a)

    def acceleration(self, frame: int) -> Vec | None:
        v0, v1 = self.velocity(frame - 1), self.velocity(frame)
        if v0 is None or v1 is None:
            return None
        return _sub(v1, v0)

    def prune_before(self, frame: int) -> None:
        for f in [f for f in self.centroids if f < frame]:
            del self.centroids[f]


# -- detectors ----------------------------------------------------------------


def detect_goal(tracks: Mapping[Hashable, BallTrack], geometry: TableGeometry, frame: int) -> dict:
    """{ball: pocket} for balls that vanished into a pocket on ``frame``."""
    out = {}
    if frame < 2:
        return out
    for ball, tr in tracks.items():
        if frame in tr:
            continue
        prev = tr.position(frame - 1)
        v = tr.velocity(frame - 1)
        if prev is None or v is None:
            continue
        name, dist = geometry.nearest_pocket(prev)
        if dist > geometry.near_pocket_radius:
            continue
        if _dot(v, _sub(geometry.pockets[name], prev)) > 0:
            out[ball] = name
    return out


def _collision_candidates(tracks, frame, th: ThresholdConfig) -> set:
    kin = {}
    for ball, tr in tracks.items():
        acc = tr.acceleration(frame)
        if acc is not None:
            kin[ball] = (tr, acc)
    pairs = set()
    for a, (ta, acc_a) in kin.items():
        if _norm(acc_a) <= th.velocity_change_threshold:
            continue
        for b, (tb, acc_b) in kin.items():
            if b == a or _norm(acc_b) <= th.velocity_change_threshold:
                continue
            d_prev2 = math.dist(ta.position(frame - 2), tb.position(frame - 2))
            d_prev = math.dist(ta.position(frame - 1), tb.position(frame - 1))
            d_now = math.dist(ta.position(frame), tb.position(frame))
            if not d_prev < d_prev2:
                continue  # were not closing in
            if min(d_prev, d_now) > th.proximity_radius:
                continue
            sep = _sub(tb.position(frame - 1), ta.position(frame - 1))
            n = _norm(sep)
            if n == 0:
                continue
            sep = (sep[0] / n, sep[1] / n)
            if _dot(acc_a, sep) < 0 < _dot(acc_b, sep):
                pairs.add(tuple(sorted((a, b), key=repr)))
    return pairs


def detect_collision(tracks: Mapping[Hashable, BallTrack], frame: int, thresholds: ThresholdConfig,
                     collisions_so_far: Mapping[int, Iterable] | None = None) -> set:
    """Unordered ball pairs colliding on ``frame``.

    A contact that straddles two frames shows up in both; a pair already
    recorded on the previous frame is not repeated.
    """
    if frame < 3:
        return set()
    pairs = _collision_candidates(tracks, frame, thresholds)
    if collisions_so_far:
        pairs -= set(collisions_so_far.get(frame - 1, ()))
    return pairs


def _aimed_at_other(ball, tracks, frame, th: ThresholdConfig) -> bool:
    tr = tracks[ball]
    v = tr.velocity(frame - 1)
    p = tr.position(frame - 1)
    sp = _norm(v)
    if sp == 0:
        return False
    for other, to in tracks.items():
        if other == ball:
            continue
        q = to.position(frame - 1)
        if q is None:
            continue
        d = _sub(q, p)
        dist = _norm(d)
        if dist == 0 or dist > th.proximity_radius:
            continue
        if _dot(v, d) / (sp * dist) >= th.aim_cos:
            return True
    return False


def detect_rebound(tracks: Mapping[Hashable, BallTrack], geometry: TableGeometry, frame: int,
                   thresholds: ThresholdConfig, collisions: Mapping[int, Iterable] | None = None,
                   rebounds_so_far: Mapping | None = None, paths: dict | None = None) -> dict:
    """{ball: boundary} for cushion and pocket-jaw rebounds on ``frame``.

    If ``paths`` is given it receives ``{ball: "cushion" | "jaw"}`` naming
    the rule that fired.
    """
    th = thresholds
    out = {}
    if frame < 3:
        return out
    collisions = collisions or {}
    involved = set()
    for f in (frame - 1, frame):
        for pair in collisions.get(f, ()):
            involved.update(pair)
    involved.update(b for pair in _collision_candidates(tracks, frame, th) for b in pair)
    tau = th.direction_deadband
    for ball, tr in tracks.items():
        p_now, p_prev = tr.position(frame), tr.position(frame - 1)
        v_prev, v_cur = tr.velocity(frame - 1), tr.velocity(frame)
        if p_now is None or v_prev is None or v_cur is None:
            continue
        if rebounds_so_far is not None and (frame - 1, ball) in rebounds_so_far:
            continue
        zones = set(geometry.zones(p_now)) | set(geometry.zones(p_prev))
        if not zones:
            continue
        # the boundary the ball was heading into hardest
        wall = max(sorted(zones), key=lambda z: _dot(v_prev, _NORMALS[z]))
        normal = _NORMALS[wall]
        tangent = (-normal[1], normal[0])
        into_prev = _dot(v_prev, normal)
        into_cur = _dot(v_cur, normal)
        if not into_prev > tau:  # condition 1
            continue
        away = into_cur < tau and (into_cur < -tau or into_prev - into_cur > th.velocity_change_threshold)
        reversed_ = -into_cur >= (1 - th.perpendicular_reversal_tolerance) * into_prev
        parallel_ok = (abs(_dot(v_cur, tangent) - _dot(v_prev, tangent))
                       <= th.parallel_consistency_tolerance * max(_norm(v_prev), 1.0))
        if away and (reversed_ or parallel_ok):
            out[ball] = wall
            if paths is not None:
                paths[ball] = "cushion"
            continue
        # irregular deflection: a rounded pocket jaw?  The contact happened
        # somewhere between the two samples, so either may be the near one.
        pocket_dist = min(geometry.nearest_pocket(p_prev)[1], geometry.nearest_pocket(p_now)[1])
        if (pocket_dist <= geometry.near_pocket_radius
                and _norm(_sub(v_cur, v_prev)) > th.velocity_change_threshold
                and not _aimed_at_other(ball, tracks, frame, th)
                and ball not in involved):
            out[ball] = wall
            if paths is not None:
                paths[ball] = "jaw"
    return out


# -- event log ----------------------------------------------------------------


@dataclass(frozen=True, order=True)
class EventRecord:
    frame: int
    kind: str
    balls: tuple
    location: str | None = None
    revision_counter: int = field(default=1, compare=False)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "frame": self.frame, "balls": list(self.balls),
                "location": self.location, "revision_counter": self.revision_counter}


class EventLog:
    """Goals per ball, collisions per frame, rebounds per (frame, ball).

    Re-evaluating a frame replaces its earlier outcome.  The revision of a
    frame starts at 1 and grows each time a re-evaluation changes the
    outcome; records carry the revision of the evaluation that wrote them.
    Equality compares event content only.
    """

    def __init__(self):
        self.goals: dict[Hashable, tuple[int, str, int]] = {}
        self.collisions: dict[int, dict[tuple, int]] = {}
        self.rebounds: dict[tuple[int, Hashable], tuple[str, int]] = {}
        self.frame_revisions: dict[int, tuple[tuple, int]] = {}

    def apply_frame(self, frame: int, goals: Mapping, pairs: Iterable, rebounds: Mapping) -> int:
        pairs = set(pairs)
        signature = (
            tuple(sorted(goals.items(), key=repr)),
            tuple(sorted(pairs, key=repr)),
            tuple(sorted(rebounds.items(), key=repr)),
        )
        old = self.frame_revisions.get(frame)
        if old is None:
            rev = 1
        elif old[0] != signature:
            rev = old[1] + 1
        else:
            rev = old[1]
        self.frame_revisions[frame] = (signature, rev)

        if pairs:
            self.collisions[frame] = {p: rev for p in pairs}
        else:
            self.collisions.pop(frame, None)

        for key in [k for k in self.rebounds if k[0] == frame and k[1] not in rebounds]:
            del self.rebounds[key]
        for ball, wall in rebounds.items():
            self.rebounds[(frame, ball)] = (wall, rev)

        for ball in [b for b, g in self.goals.items() if g[0] == frame and b not in goals]:
            del self.goals[ball]
        for ball, pocket in goals.items():
            self.goals[ball] = (frame, pocket, rev)
        return rev

    def retract_goal(self, ball: Hashable, seen_at: int) -> bool:
        g = self.goals.get(ball)
        if g is not None and g[0] < seen_at:
            del self.goals[ball]
            return True
        return False

    def prune_revisions_before(self, frame: int) -> None:
        for f in [f for f in self.frame_revisions if f < frame]:
            del self.frame_revisions[f]

    def records(self) -> list[EventRecord]:
        out = []
        for ball, (frame, pocket, rev) in self.goals.items():
            out.append(EventRecord(frame, "goal", (ball,), pocket, rev))
        for frame, pairs in self.collisions.items():
            for pair, rev in pairs.items():
                out.append(EventRecord(frame, "collision", tuple(pair), None, rev))
        for (frame, ball), (wall, rev) in self.rebounds.items():
            out.append(EventRecord(frame, "rebound", (ball,), wall, rev))
        return sorted(out, key=lambda r: (r.frame, r.kind, repr(r.balls)))

    def content(self) -> list[tuple]:
        return [(r.frame, r.kind, r.balls, r.location) for r in self.records()]

    def __eq__(self, other):
        if not isinstance(other, EventLog):
            return NotImplemented
        return self.content() == other.content()

    def __len__(self):
        return len(self.records())

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records())

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def read_events_jsonl(path) -> list[EventRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(EventRecord(int(d["frame"]), d["kind"], tuple(d["balls"]), d.get("location"),
                                       int(d.get("revision_counter", 1))))
    return out


class EventPostProcessor:
    """Consumes per-frame masks in stream order and maintains the EventLog."""

    def __init__(self, geometry: TableGeometry, thresholds: ThresholdConfig | None = None,
                 horizon: int | None = None, ignore=None):
        self.geometry = geometry
        self.thresholds = thresholds or ThresholdConfig(
            buffer_margin=geometry.buffer_margin, near_pocket_radius=geometry.near_pocket_radius)
        self.tracks: dict[Hashable, BallTrack] = {}
        self.log = EventLog()
        self.horizon = horizon
        self.ignore = ignore or (lambda obj_id: False)
        self.latest = -1
        self.rebound_paths: dict[tuple[int, Hashable], str] = {}

    def process_frame(self, frame: int, masks: Mapping[Hashable, Mask]) -> int:
        present = {}
        for obj_id, mask in masks.items():
            if self.ignore(obj_id):
                continue
            c = compute_centroid(mask)
            if c is not None:
                present[obj_id] = c
        for obj_id in present:
            self.tracks.setdefault(obj_id, BallTrack())
        for obj_id, tr in self.tracks.items():
            if obj_id in present:
                tr.centroids[frame] = present[obj_id]
            else:
                tr.centroids.pop(frame, None)
        rev = self.evaluate(frame)
        for obj_id in present:
            self.log.retract_goal(obj_id, frame)
        if frame > self.latest:
            self.latest = frame
            if self.horizon is not None:
                cutoff = frame - self.horizon
                for tr in self.tracks.values():
                    tr.prune_before(cutoff)
                self.log.prune_revisions_before(cutoff)
                for key in [k for k in self.rebound_paths if k[0] < cutoff]:
                    del self.rebound_paths[key]
        return rev

    def evaluate(self, frame: int) -> int:
        th, log = self.thresholds, self.log
        pairs = detect_collision(self.tracks, frame, th, log.collisions)
        trial = dict(log.collisions)
        if pairs:
            trial[frame] = pairs
        else:
            trial.pop(frame, None)
        paths: dict = {}
        rebounds = detect_rebound(self.tracks, self.geometry, frame, th, trial, log.rebounds, paths)
        for key in [k for k in self.rebound_paths if k[0] == frame]:
            del self.rebound_paths[key]
        self.rebound_paths.update({(frame, b): p for b, p in paths.items()})
        goals = detect_goal(self.tracks, self.geometry, frame)
        return log.apply_frame(frame, goals, pairs, rebounds)


# -- scoring ------------------------------------------------------------------

EVENT_KINDS = ("goal", "collision", "rebound")


def match_events(detected: Sequence, truth: Sequence, tolerance: int = 1) -> list[tuple[int, int]]:
    """Greedy one-to-one matching on (kind, ball set, frame within tolerance).

    Works on anything with ``kind``, ``frame`` and ``balls`` attributes.
    Returns (detected index, truth index) pairs; nearest frames match first.
    """
    candidates = []
    for i, d in enumerate(detected):
        for j, t in enumerate(truth):
            if d.kind == t.kind and set(d.balls) == set(t.balls) and abs(d.frame - t.frame) <= tolerance:
                candidates.append((abs(d.frame - t.frame), i, j))
    used_d, used_t, pairs = set(), set(), []
    for _, i, j in sorted(candidates):
        if i not in used_d and j not in used_t:
            used_d.add(i)
            used_t.add(j)
            pairs.append((i, j))
    return pairs


@dataclass
class Score:
    true_pos: int
    detected: int
    expected: int

    @property
    def precision(self) -> float:
        return self.true_pos / self.detected if self.detected else 1.0

    @property
    def recall(self) -> float:
        return self.true_pos / self.expected if self.expected else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __add__(self, other: "Score") -> "Score":
        return Score(self.true_pos + other.true_pos, self.detected + other.detected,
                     self.expected + other.expected)


def score_events(detected: Sequence, truth: Sequence, tolerance: int = 1) -> dict[str, Score]:
    """Per-kind scores plus an ``"all"`` entry."""
    out = {}
    for kind in EVENT_KINDS:
        d = [e for e in detected if e.kind == kind]
        t = [e for e in truth if e.kind == kind]
        out[kind] = Score(len(match_events(d, t, tolerance)), len(d), len(t))
    out["all"] = out["goal"] + out["collision"] + out["rebound"]
    return out
