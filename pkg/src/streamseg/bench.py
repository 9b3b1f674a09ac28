"""Parameter sweep over (K, M, D, retention) on one seeded scenario."""
from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path

from .billiards import Scenario
from .errors import ConfigError
from .events import score_events
from .pipeline import PipelineConfig, run
from .propagation import PropagationConfig
from .scenarios import random_scenario

BENCH_COLUMNS = ["K", "M", "D", "retention", "frames", "frames_propagated_total", "propagation_calls",
                 "peak_resident_frames", "floor_resident_frames", "peak_bytes",
                 "f1_goal", "f1_collision", "f1_rebound", "f1_all", "skip_reason"]


def _axis(grid, key, default):
    v = grid.get(key, default)
    return v if isinstance(v, list) else [v]


def _fmt(v):
    return "inf" if v is None else v


def load_grid(path) -> dict:
    try:
        grid = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(grid, dict):
        raise ConfigError("grid file must hold an object")
    return grid


def bench(grid: dict, scenario: Scenario | None = None) -> list[dict]:
    """One row per grid cell; invalid cells carry a ``skip_reason``.

    Grid keys: ``K``, ``M``, ``D``, ``retention`` (lists; null means
    unbounded), ``frames``, ``seed`` and optionally ``scenario`` (a path).
    """
    frames = int(grid.get("frames", 200))
    if scenario is None:
        if grid.get("scenario"):
            scenario = Scenario.load(grid["scenario"])
            scenario.frames = frames
        else:
            scenario = random_scenario(int(grid.get("seed", 0)), frames)
    _, truth = scenario.run()
    rows = []
    cells = itertools.product(_axis(grid, "K", 10), _axis(grid, "M", 20),
                              _axis(grid, "D", 5), _axis(grid, "retention", None))
    for K, M, D, R in cells:
        row = {"K": K, "M": _fmt(M), "D": D, "retention": _fmt(R), "frames": frames}
        pc = PropagationConfig(buffer_size=K, max_frames_to_track=M, detection_interval=D, retention=R)
        try:
            pc.validate()
        except ConfigError as exc:
            row["skip_reason"] = str(exc)
            rows.append(row)
            continue
        result = run(PipelineConfig(propagation=pc), scenario)
        if result.error is not None:
            row["skip_reason"] = f"run failed: {result.error}"
            rows.append(row)
            continue
        scores = score_events(result.events, truth)
        row.update(
            frames_propagated_total=result.stats.frames_propagated_total,
            propagation_calls=result.stats.propagation_calls,
            peak_resident_frames=result.engine.peak_resident,
            floor_resident_frames=result.engine.floor_resident,
            peak_bytes=result.engine.peak_bytes,
            f1_goal=round(scores["goal"].f1, 4),
            f1_collision=round(scores["collision"].f1, 4),
            f1_rebound=round(scores["rebound"].f1, 4),
            f1_all=round(scores["all"].f1, 4),
            skip_reason="",
        )
        rows.append(row)
    return rows


def write_bench(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, restval="")
        w.writeheader()
        w.writerows(rows)
