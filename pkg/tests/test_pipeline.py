import threading

import pytest

from streamseg.billiards import BallState, NoiseConfig, Scenario
from streamseg.errors import ConfigError, NoPromptError
from streamseg.events import score_events
from streamseg.memory_bank import dump_preload, init_state, load_preload
from streamseg.pipeline import FramesQueue, PipelineConfig, VideoSegments, run
from streamseg.propagation import PropagationConfig
from streamseg.report import read_csv
from streamseg.scenarios import random_scenario


def config(K=10, M=20, D=5, R=40, **kw):
    return PipelineConfig(PropagationConfig(buffer_size=K, max_frames_to_track=M, detection_interval=D,
                                            retention=R), **kw)


def correction_scenario(dropouts):
    balls = [BallState(1, (300.0, 200.0), (4.0, 0.0)), BallState(2, (334.0, 200.0)),
             BallState(3, (600.0, 100.0), (0.0, -3.0))]
    return Scenario(balls=balls, frames=60, noise=NoiseConfig(forced_dropouts=dropouts))


def clean_teardown(res):
    assert res.threads_alive == 0
    assert res.queue_left == 0 and res.segments_left == 0


def test_noiseless_run_matches_oracle():
    sc = random_scenario(3, 150)
    _, truth = sc.run()
    res = run(config(), sc)
    assert res.error is None
    assert score_events(res.events, truth)["all"].f1 == 1.0
    clean_teardown(res)
    assert sorted(res.consumed) == sorted(res.pushed)


def test_late_detection_corrects_earlier_frame():
    K2 = dict(K=2, D=6, M=20, R=40)
    clean = run(config(**K2), correction_scenario([]))
    late = run(config(**K2), correction_scenario([(0, 2)]))
    hit = [r for r in late.events if r.kind == "collision"]
    assert [(r.frame, r.balls) for r in hit] == [(4, (1, 2))]
    assert hit[0].revision_counter > 1
    assert late.log == clean.log
    clean_teardown(late)


def test_consumer_sees_frames_in_order_with_rising_revisions():
    res = run(config(K=4, M=12, D=3, R=20), random_scenario(5, 80))
    last = {}
    high = -1
    for f, rev in res.consumed:
        assert f <= high + 1
        assert rev > last.get(f, 0)
        last[f] = rev
        high = max(high, f)
    assert high == 79


def test_empty_table():
    res = run(config(), Scenario(balls=[], frames=40))
    assert res.error is None and res.events == []
    assert res.geometry is not None
    clean_teardown(res)


def test_segments_bounded_and_stalled_consumer_applies_backpressure():
    res = run(config(K=5, M=10, D=5, R=20, consumer_delay=0.002), random_scenario(7, 120))
    assert res.error is None
    assert res.segments_peak <= 15
    assert res.backpressure_waits > 0
    assert len(res.consumed) == res.items_pushed
    clean_teardown(res)


def test_release_is_idempotent_and_revision_aware():
    seg = VideoSegments(capacity=2)
    assert seg.publish({0: (1, {}), 1: (1, {})})
    assert not seg.release_consumed(5)
    assert not seg.release_consumed(0, revision=2)
    seg.publish({0: (2, {})})
    assert not seg.release_consumed(0, revision=1)  # superseded
    assert seg.release_consumed(0, revision=2)
    assert not seg.release_consumed(0, revision=2)
    assert len(seg) == 1


def test_publish_waits_for_room():
    seg = VideoSegments(capacity=1)
    seg.publish({0: (1, {})})
    assert not seg.publish({1: (1, {})}, timeout=0.01)
    assert seg.waits == 1
    t = threading.Timer(0.05, seg.release_consumed, (0, 1))
    t.start()
    assert seg.publish({1: (1, {})}, timeout=2)
    t.join()


def test_frames_queue_abort():
    q = FramesQueue(1)
    stop = threading.Event()
    assert q.put(1, stop)
    stop.set()
    assert not q.put(2, stop)
    assert q.waits == 1 and q.pushed == 1


def test_preload_carries_identities(tmp_path):
    first = run(config(), random_scenario(11, 120))
    bank = first.engine.bank
    keep = [f for f in sorted(bank.cond_frame_outputs) if f >= 0][-3:]
    path = tmp_path / "bank.json"
    dump_preload(bank.export_preload(keep), path)

    second = random_scenario(12, 120)
    second.noise = NoiseConfig(dropout_prob=1.0)
    res = run(config(preload_path=str(path)), second)
    assert res.error is None
    _, truth = random_scenario(12, 120).run()
    assert score_events(res.events, truth)["all"].f1 == 1.0
    assert init_state(load_preload(path)).preload_frame_inds == {-3, -2, -1}


def test_without_prompts_the_run_stops_cleanly():
    sc = random_scenario(12, 60)
    sc.noise = NoiseConfig(dropout_prob=1.0)
    empty = init_state()
    res = run(config(), sc, bank=empty)
    assert res.partial and isinstance(res.error, NoPromptError)
    assert res.threads_alive == 0
    with pytest.raises(NoPromptError):
        run(config(), sc, strict=True)


def test_partial_report_is_flagged(tmp_path):
    sc = random_scenario(12, 60)
    sc.noise = NoiseConfig(dropout_prob=1.0)
    out = tmp_path / "mem.csv"
    run(config(out_memory_report=str(out)), sc)
    assert out.read_text().startswith("# partial")


def test_bad_config_rejected_before_start():
    with pytest.raises(ConfigError):
        run(config(K=10, M=5), random_scenario(1, 20))
    with pytest.raises(ConfigError):
        run(config(R=20), random_scenario(1, 20))
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"propagation": {"buffer_size": 0}}).validate()
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        run(config(consumer_delay=-1), random_scenario(1, 20))


def test_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"propagation": {"buffer_size": 4, "max_frames_to_track": 8, "retention": 16}, "frames": 30}')
    cfg = PipelineConfig.load(path)
    assert cfg.propagation.buffer_size == 4 and cfg.frames == 30
    path.write_text("{")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_runs_are_deterministic(tmp_path):
    sc = random_scenario(21, 100)
    sc.noise = NoiseConfig(box_jitter_px=1.0, dropout_prob=0.2, seed=4)
    a = run(config(out_events=str(tmp_path / "a.jsonl"), out_memory_report=str(tmp_path / "a.csv")), sc)
    b = run(config(out_events=str(tmp_path / "b.jsonl"), out_memory_report=str(tmp_path / "b.csv")), sc)
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert read_csv(tmp_path / "a.csv") == read_csv(tmp_path / "b.csv")
    assert a.stats.frames_propagated_total == b.stats.frames_propagated_total
