"""Seeded scenario generation for the event-detection suite.

Scenarios are built from templates that aim balls at pockets, pocket jaws,
other balls or cushions, then screened against the physics oracle: events
too slow or too crowded to resolve at frame granularity are rejected and
the generator retries with the next derived seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .billiards import BallState, GroundTruthEvent, Scenario, TableSpec, World

TEMPLATES = ("goal", "jaw", "collision", "cushion")

_NORMALS = {"top": (0.0, -1.0), "bottom": (0.0, 1.0), "left": (-1.0, 0.0), "right": (1.0, 0.0)}


@dataclass
class SuiteLimits:
    min_speed_change: float = 1.0   # |dv| every contact must produce
    min_approach: float = 1.0       # incoming speed into the cushion or pocket
    min_gap: int = 3                # frames between two events of one ball
    warmup: int = 4                 # no events before this frame
    tail: int = 3                   # nor in the last frames of the clip


def _aim(rng, src, dst, speed, spread=0.0):
    ang = math.atan2(dst[1] - src[1], dst[0] - src[0]) + rng.uniform(-spread, spread)
    return speed * math.cos(ang), speed * math.sin(ang)


def _free_spot(rng, table: TableSpec, taken, radius=10.0, margin=30.0, near=None, reach=None):
    for _ in range(500):
        if near is None:
            p = (rng.uniform(margin, table.width - margin), rng.uniform(margin, table.height - margin))
        else:
            ang = rng.uniform(0, 2 * math.pi)
            d = rng.uniform(3 * radius, reach)
            p = (near[0] + d * math.cos(ang), near[1] + d * math.sin(ang))
            if not (margin <= p[0] <= table.width - margin and margin <= p[1] <= table.height - margin):
                continue
        if all(math.dist(p, q) > 3 * radius for q in taken):
            return p
    raise RuntimeError("could not place a ball")


def random_scenario(seed: int, frames: int = 150, table: TableSpec | None = None,
                    templates=TEMPLATES, extra_balls: int = 2) -> Scenario:
    """One scenario with a ball per template plus a few random movers."""
    rng = np.random.default_rng(seed)
    table = table or TableSpec()
    balls: list[BallState] = []
    taken: list[tuple[float, float]] = []

    def add(pos, vel):
        balls.append(BallState(len(balls) + 1, pos, vel))
        taken.append(pos)

    for kind in templates:
        speed = rng.uniform(2.5, 6.0)
        if kind == "goal":
            target = list(table.pockets.values())[rng.integers(6)]
            pos = _free_spot(rng, table, taken, near=target, reach=220)
            add(pos, _aim(rng, pos, target, speed, spread=0.03))
        elif kind == "jaw":
            centre, _, _ = table.jaws[rng.integers(len(table.jaws))]
            pos = _free_spot(rng, table, taken, near=centre, reach=220)
            add(pos, _aim(rng, pos, centre, speed, spread=0.05))
        elif kind == "collision":
            target = _free_spot(rng, table, taken, margin=60)
            add(target, (0.0, 0.0))
            pos = _free_spot(rng, table, taken, near=target, reach=160)
            add(pos, _aim(rng, pos, target, speed, spread=0.25))
        elif kind == "cushion":
            pos = _free_spot(rng, table, taken)
            ang = rng.uniform(0, 2 * math.pi)
            add(pos, (speed * math.cos(ang), speed * math.sin(ang)))
        else:
            raise ValueError(f"unknown template {kind!r}")
    for _ in range(extra_balls):
        pos = _free_spot(rng, table, taken)
        ang = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.0, 5.0)
        add(pos, (speed * math.cos(ang), speed * math.sin(ang)))
    return Scenario(table, balls, frames=frames, seed=seed)


def _velocity(world: World, ball_id: int):
    b = world.ball(ball_id)
    return (0.0, 0.0) if b.pocketed else b.velocity


def screen(worlds: list[World], events: list[GroundTruthEvent], limits: SuiteLimits | None = None) -> list[str]:
    """Reasons the oracle events are unresolvable at frame granularity."""
    lim = limits or SuiteLimits()
    n = len(worlds)
    problems = []
    last_seen: dict[int, int] = {}
    for ev in sorted(events, key=lambda e: e.frame):
        f = ev.frame
        if f < lim.warmup or f > n - 1 - lim.tail:
            problems.append(f"{ev.kind}@{f}: too close to clip edge")
            continue
        for b in ev.balls:
            if b in last_seen and f - last_seen[b] < lim.min_gap:
                problems.append(f"{ev.kind}@{f}: ball {b} had an event at {last_seen[b]}")
            last_seen[b] = f
        for b in ev.balls:
            before, after = _velocity(worlds[f - 1], b), _velocity(worlds[f], b)
            dv = math.dist(before, after)
            if ev.kind != "goal" and dv < lim.min_speed_change:
                problems.append(f"{ev.kind}@{f}: ball {b} speed change {dv:.2f}")
            if ev.kind == "rebound":
                nx, ny = _NORMALS[ev.location]
                if before[0] * nx + before[1] * ny < lim.min_approach:
                    problems.append(f"rebound@{f}: ball {b} barely heading into {ev.location}")
            if ev.kind == "goal" and math.hypot(*before) < lim.min_approach:
                problems.append(f"goal@{f}: ball {b} crawled in")
    return problems


def build_suite(n: int = 50, seed: int = 0, frames: int = 150, limits: SuiteLimits | None = None,
                max_tries: int = 10_000) -> list[Scenario]:
    """``n`` screened scenarios; deterministic in ``seed``."""
    out = []
    ss = np.random.SeedSequence(seed)
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"only {len(out)} of {n} scenarios passed screening")
        child = int(ss.spawn(1)[0].generate_state(1)[0])
        sc = random_scenario(child, frames)
        worlds, events = sc.run()
        if events and not screen(worlds, events, limits):
            out.append(sc)
    return out
