"""Command line entry point.

Exit codes: 0 success, 2 bad configuration or input, 3 failure during a run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import bench, load_grid, write_bench
from .billiards import Scenario, write_events_jsonl
from .errors import ConfigError, PreloadFormatError, StreamSegError
from .events import read_events_jsonl
from .memory_bank import dump_preload
from .pipeline import PipelineConfig, run
from .report import plot_bench
from .scenarios import random_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
_UNSET = object()  # 'inf' parses to None, so absence needs its own marker


def _int_or_none(text: str):
    return None if text.lower() in ("none", "inf", "null") else int(text)


def _frame_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="stream a scenario through segmentation and event detection")
    s.add_argument("--scenario", required=True)
    s.add_argument("--config", help="JSON pipeline config; flags below override it")
    s.add_argument("--preload", help="preload memory bank to seed the run")
    s.add_argument("--out-events", help="event log, JSON lines")
    s.add_argument("--out-memory-report", help="per-propagation memory CSV")
    s.add_argument("--out-figure", help="PNG plot of the memory report")
    s.add_argument("--export-preload", help="write a preload bank from this run")
    s.add_argument("--preload-frames", type=_frame_list,
                   help="comma separated frames to export (default: last three retained condition frames)")
    s.add_argument("--buffer-size", type=int)
    s.add_argument("--max-frames", type=_int_or_none, default=_UNSET, help="frames per propagation; 'inf' for unbounded")
    s.add_argument("--detection-interval", type=int)
    s.add_argument("--retention", type=_int_or_none, default=_UNSET)
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--dropout", type=float, help="detector dropout probability")
    s.add_argument("--consumer-delay", type=float)
    s.add_argument("--no-detector", action="store_true")

    b = sub.add_parser("bench", help="sweep propagation parameters and write a CSV table")
    b.add_argument("--grid", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--figure", help="PNG summary (default: next to --out)")

    r = sub.add_parser("replay", help="pretty-print an event log, marking corrected entries")
    r.add_argument("--events", required=True)

    e = sub.add_parser("export-events", help="write the physics ground-truth events of a scenario")
    e.add_argument("--scenario", required=True)
    e.add_argument("--out", help="JSON lines file (default: stdout)")
    e.add_argument("--frames", type=int)

    m = sub.add_parser("make-scenario", help="write a random seeded scenario file")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--frames", type=int, default=300)
    m.add_argument("--out", required=True)
    return p


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg.scenario_path = args.scenario
    pc = cfg.propagation
    if args.buffer_size is not None:
        pc.buffer_size = args.buffer_size
    if args.max_frames is not _UNSET:
        pc.max_frames_to_track = args.max_frames
    if args.detection_interval is not None:
        pc.detection_interval = args.detection_interval
    if args.retention is not _UNSET:
        pc.retention = args.retention
    for name in ("preload", "out_events", "out_memory_report", "out_figure"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, "preload_path" if name == "preload" else name, value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.frames is not None:
        cfg.frames = args.frames
    if args.consumer_delay is not None:
        cfg.consumer_delay = args.consumer_delay
    if args.no_detector:
        cfg.detector_enabled = False
    return cfg


def cmd_simulate(args) -> int:
    cfg = _pipeline_config(args)
    scenario = Scenario.load(cfg.scenario_path)
    if args.dropout is not None:
        if not 0.0 <= args.dropout <= 1.0:
            raise ConfigError("--dropout must lie in [0, 1]")
        (cfg.noise or scenario.noise).dropout_prob = args.dropout
    result = run(cfg, scenario)
    summary = result.summary()
    if args.export_preload and result.error is None:
        bank = result.engine.bank
        frames = args.preload_frames
        if frames is None:
            retained = [f for f in sorted(bank.cond_frame_outputs) if f >= 0]
            frames = retained[-3:]
        dump_preload(bank.export_preload(frames), args.export_preload)
        summary["preload_frames"] = frames
    print(json.dumps(summary, indent=2))
    if result.error is not None:
        print(f"run stopped early: {summary['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench(load_grid(args.grid))
    write_bench(rows, args.out)
    figure = args.figure or str(Path(args.out).with_suffix(".png"))
    plot_bench(rows, figure)
    for row in rows:
        if row.get("skip_reason"):
            print(f"skipped K={row['K']} M={row['M']} D={row['D']} R={row['retention']}: {row['skip_reason']}")
    print(f"wrote {len(rows)} rows to {args.out} and {figure}")
    return EXIT_OK


def cmd_replay(args) -> int:
    for ev in read_events_jsonl(args.events):
        where = f" @ {ev.location}" if ev.location else ""
        balls = "+".join(str(b) for b in ev.balls)
        mark = f"  (corrected, revision {ev.revision_counter})" if ev.revision_counter > 1 else ""
        print(f"{ev.frame:6d}  {ev.kind:<9} {balls}{where}{mark}")
    return EXIT_OK


def cmd_export_events(args) -> int:
    scenario = Scenario.load(args.scenario)
    _, events = scenario.run(args.frames)
    write_events_jsonl(events, args.out or sys.stdout)
    return EXIT_OK


def cmd_make_scenario(args) -> int:
    random_scenario(args.seed, args.frames).save(args.out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "replay": cmd_replay,
    "export-events": cmd_export_events,
    "make-scenario": cmd_make_scenario,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PreloadFormatError, FileNotFoundError, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StreamSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
