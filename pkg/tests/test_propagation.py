import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import frame_source, make_detector, oracle_cost, segmenter
from streamseg.errors import ConfigError, DuplicatePromptError, NoPromptError, OrderingError
from streamseg.frame_store import FrameRecord
from streamseg.memory_bank import MemoryBank
from streamseg.propagation import (
    PropagationConfig,
    PropagationEngine,
    PromptBox,
    designate_condition_frames,
)


def engine(K=10, M=20, D=1, R=None, ids=(1,), **kw):
    cfg = PropagationConfig(buffer_size=K, max_frames_to_track=M, detection_interval=D, retention=R)
    return PropagationEngine(cfg, segmenter, make_detector(ids), **kw)


# -- buffering ----------------------------------------------------------------


def test_flush_fires_on_full_buffer():
    e = engine(K=4, M=None)
    assert [e.ingest_frame(FrameRecord(i)) is not None for i in range(4)] == [False, False, False, True]
    assert e.stats.trace == [(3, 4)]


def test_unit_buffer_flushes_every_frame():
    e = engine(K=1, M=None)
    e.run_stream(frame_source(5), 5)
    assert [h for h, _ in e.stats.trace] == [0, 1, 2, 3, 4]


def test_partial_buffer_drained_at_end():
    e = engine(K=4, M=None)
    for i in range(6):
        e.ingest_frame(FrameRecord(i))
    assert e.finish() is not None
    assert e.stats.trace == [(3, 4), (5, 6)]
    assert e.finish() is None


def test_out_of_order_frame():
    e = engine()
    e.ingest_frame(FrameRecord(0))
    with pytest.raises(OrderingError):
        e.ingest_frame(FrameRecord(2))


@pytest.mark.parametrize("idx, D, want", [
    (range(10), 3, [0, 3, 6, 9]),
    (range(10), 1, list(range(10))),
    (range(10), 20, [0]),
    (range(10, 20), 4, [12, 16]),
])
def test_condition_frames_on_global_grid(idx, D, want):
    assert designate_condition_frames(list(idx), D) == want


def test_detector_only_on_condition_frames():
    e = engine(K=10, M=20, D=5)
    e.run_stream(frame_source(30), 30)
    assert e.stats.detector_calls == 6
    assert sorted(e.bank.cond_frame_outputs) == [0, 5, 10, 15, 20, 25]


# -- prompts ----------------------------------------------------------------------


def test_prompts_for_known_ids():
    e = engine(ids=(1, 2, 3))
    e.apply_prompts(0, make_detector((1, 2, 3))(FrameRecord(0)))
    e.apply_prompts(5, make_detector((1, 2, 3))(FrameRecord(5)))
    assert e.bank.registry.obj_ids == [1, 2, 3]
    assert e.bank.entry(5).is_condition


def test_new_id_mid_stream_keeps_history():
    e = engine(K=5, M=10, D=5, R=30)
    e.run_stream(frame_source(20), 20)
    before = set(e.bank.frame_indices)
    e.apply_prompts(20, [PromptBox(1, (0, 0, 4, 4)), PromptBox(7, (50, 50, 60, 60))])
    assert e.bank.registry.obj_ids == [1, 7]
    assert before <= set(e.bank.frame_indices)
    assert all(e.bank.entry(f).rows.shape[0] == 2 for f in before)


def test_duplicate_prompt_rejected():
    e = engine()
    with pytest.raises(DuplicatePromptError):
        e.apply_prompts(0, [PromptBox(9, (0, 0, 1, 1)), PromptBox(9, (2, 2, 3, 3))])


@pytest.mark.parametrize("box, score", [((0, 0, 0, 1), 1.0), ((0, 0, 1, 1), 1.5), ((3, 0, 1, 1), 0.5)])
def test_prompt_box_validation(box, score):
    with pytest.raises(ValueError):
        PromptBox(1, box, score)


# -- propagation ------------------------------------------------------------------


def test_reverse_visit_capped_at_window():
    e = engine(K=10, M=20, record_visits=True)
    e.run_stream(frame_source(40), 40)
    assert e.visits[-1] == list(range(39, 19, -1))
    assert e.stats.trace[-1] == (39, 20)


def test_unbounded_window_covers_history():
    e = engine(K=10, M=None)
    e.run_stream(frame_source(10), 10)
    assert e.stats.trace == [(9, 10)]


def test_no_prompt_anywhere():
    cfg = PropagationConfig(buffer_size=2, max_frames_to_track=4, retention=None)
    e = PropagationEngine(cfg, segmenter, detector=None)
    e.ingest_frame(FrameRecord(0))
    with pytest.raises(NoPromptError):
        e.ingest_frame(FrameRecord(1))


def test_masks_written_back_as_rows():
    e = engine(K=5, M=5, D=5)
    e.run_stream(frame_source(5), 5)
    for f in range(5):
        row = e.bank.entry(f).rows[0]
        assert row[0] == 1.0 and row[3] == 4


# -- cost law ---------------------------------------------------------------------------


def test_cost_unit_buffer_triangular():
    e = engine(K=1, M=None)
    e.run_stream(frame_source(100), 100)
    assert e.stats.frames_propagated_total == oracle_cost(100, 1) == sum(range(1, 101)) == 5050


def test_cost_buffered():
    e = engine(K=10, M=None)
    e.run_stream(frame_source(100), 100)
    assert e.stats.frames_propagated_total == sum(10 * j for j in range(1, 11)) == 550


def test_cost_windowed():
    e = engine(K=10, M=20, D=1, R=40)
    e.run_stream(frame_source(1000), 1000)
    # the first flush has only ten frames behind it
    assert e.stats.frames_propagated_total == oracle_cost(1000, 10, 20) == 1990


def test_empty_stream():
    e = engine()
    stats = e.run_stream(frame_source(0), 0)
    assert (stats.frames_propagated_total, stats.propagation_calls, stats.detector_calls) == (0, 0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 120), st.one_of(st.none(), st.integers(1, 30)))
def test_cost_matches_summation_oracle(K, N, M):
    assume(M is None or M >= K)
    e = engine(K=K, M=M, D=3, R=None if M is None else M + 5)
    e.run_stream(frame_source(N), N)
    assert e.stats.frames_propagated_total == oracle_cost(N, K, M)


@pytest.mark.parametrize("N, K, M, law", [
    (200, 1, None, lambda N, K, M: N * N / 2),
    (400, 10, None, lambda N, K, M: N * N / (2 * K)),
    (400, 10, 20, lambda N, K, M: M / K * N),
])
def test_asymptotic_laws_within_ten_percent(N, K, M, law):
    e = engine(K=K, M=M, R=None if M is None else M + 1)
    e.run_stream(frame_source(N), N)
    expected = law(N, K, M)
    assert abs(e.stats.frames_propagated_total - expected) / expected < 0.10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 12), st.integers(2, 8))
def test_linear_regime(K, extra, steps):
    M = K + extra
    totals = []
    for N in (M + K * i for i in range(steps)):
        N = N - N % K
        e = engine(K=K, M=M, R=M + 1)
        e.run_stream(frame_source(N + 3 * K), N + 3 * K)
        totals.append(e.stats.frames_propagated_total)
    slopes = {b - a for a, b in zip(totals, totals[1:])}
    assert slopes == {M}  # M per K extra frames


# -- schedule properties -------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(0, 15), st.integers(1, 20), st.integers(1, 6), st.integers(0, 90))
def test_schedule_properties(K, extra, slack, D, N):
    M = K + extra
    R = M + slack
    assume(R >= D)  # otherwise every prompt can be evicted before the next one
    e = engine(K=K, M=M, D=D, R=R, record_visits=True)
    e.run_stream(frame_source(N), N)
    released_at = {}
    for call, (head, released) in enumerate(e.release_log):
        for f in released:
            released_at[f] = call
    for call, visited in enumerate(e.visits):
        assert all(a > b for a, b in zip(visited, visited[1:]))
        head = visited[0]
        assert len(visited) <= M
        assert len(visited) >= min(K, head + 1)
        # nothing visited here was released by an earlier call
        assert all(released_at.get(f, call) >= call for f in visited)
    assert e.violations == []
    assert e.peak_resident <= K + R
    counts = [s for _, s in e.stats.trace]
    assert e.stats.frames_propagated_total == sum(counts)


# -- config and violation detector ---------------------------------------------------------------


@pytest.mark.parametrize("kw", [
    dict(buffer_size=0), dict(detection_interval=0), dict(attention_limit=0),
    dict(buffer_size=10, max_frames_to_track=5),
    dict(max_frames_to_track=20, retention=20), dict(max_frames_to_track=20, retention=19),
    dict(max_frames_to_track=None, retention=40), dict(update_window=0),
])
def test_config_rejections(kw):
    with pytest.raises(ConfigError):
        PropagationConfig(**kw).validate()


def test_engine_refuses_bad_config():
    with pytest.raises(ConfigError):
        engine(K=10, M=20, R=19)


def test_violation_detector_fires_without_guard():
    cfg = PropagationConfig(buffer_size=10, max_frames_to_track=20, detection_interval=1, retention=19)
    e = PropagationEngine(cfg, segmenter, make_detector(), check_config=False)
    e.run_stream(frame_source(100), 100)
    assert e.violations
    assert {v.kind for v in e.violations} <= {"evicted-inside-window", "visit-evicted"}


def test_preload_counts_as_resident():
    src = engine(K=5, M=5, D=5, R=10)
    src.run_stream(frame_source(10), 10)
    from streamseg.memory_bank import init_state
    bank = init_state(src.bank.export_preload([5]))
    e = PropagationEngine(PropagationConfig(5, 5, 5, 10), segmenter, None, bank=bank)
    e.run_stream(frame_source(30), 30)
    assert e.resident_frames == 10 + 1
    assert e.peak_resident == 10 + 5 + 1
    assert e.memory_rows[-1]["resident_frames"] == 11
