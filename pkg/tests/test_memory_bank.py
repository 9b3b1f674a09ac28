import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamseg.errors import AlreadyRegisteredError, MissingFrameError, PreloadFormatError, ShapeError
from streamseg.frame_store import FrameRecord, FrameStore
from streamseg.memory_bank import (
    COND,
    FEATURE_DIM,
    NON_COND,
    MemoryBank,
    dump_preload,
    dumps_preload,
    init_state,
    load_preload,
    null_rows,
)


def rows(n, value=1.0):
    r = null_rows(n)
    r[:, 0] = value
    return r


def bank_with(ids, frames, cond=()):
    bank = MemoryBank()
    for i in ids:
        bank.register_object(i)
    for f in frames:
        bank.write_frame_output(f, f in cond, rows(len(ids)))
    return bank


def check_invariants(bank: MemoryBank):
    assert not set(bank.cond_frame_outputs) & set(bank.non_cond_frame_outputs)
    assert bank.consolidated_frame_inds <= set(bank.cond_frame_outputs) | bank.preload_frame_inds
    assert list(bank.per_obj_outputs) == bank.registry.obj_ids
    assert sorted(bank.registry.slot_of.values()) == list(range(len(bank.registry)))
    for e in list(bank.cond_frame_outputs.values()) + list(bank.non_cond_frame_outputs.values()):
        assert e.rows.shape == (e.registry_size_at_update, FEATURE_DIM)


# -- registry -----------------------------------------------------------------


def test_register_into_empty():
    bank = MemoryBank()
    bank.register_object(9)
    assert bank.registry.obj_ids == [9]


def test_register_appends_without_moving_slots():
    bank = bank_with([9, 17], [])
    bank.register_object(3)
    assert bank.registry.obj_ids == [9, 17, 3]
    assert bank.registry.slot_of == {9: 0, 17: 1, 3: 2}
    assert bank.per_obj_outputs[3] == {COND: {}, NON_COND: {}}


def test_register_duplicate():
    bank = bank_with([9], [])
    with pytest.raises(AlreadyRegisteredError):
        bank.register_object(9)


# -- windowed back-update -----------------------------------------------------


def test_update_window_touches_recent_frames_only():
    bank = bank_with([1], range(20))
    bank.register_object(2)
    updated = bank.update_memory_for_new_ids(19, 4)
    assert updated == [16, 17, 18, 19]
    for f in range(20):
        assert bank.is_current(bank.entry(f)) == (f >= 16)
    # new rows are null memory, old rows untouched
    assert np.all(bank.entry(19).rows[1] == 0)
    assert bank.entry(19).rows[0, 0] == 1.0
    assert bank.entry(3).rows.shape == (1, FEATURE_DIM)
    check_invariants(bank)


def test_update_window_includes_preload():
    payload = bank_with([1], [0, 5]).export_preload([0, 5])
    bank = init_state(payload)
    for f in range(20):
        bank.write_frame_output(f, False, rows(1))
    bank.register_object(2)
    updated = bank.update_memory_for_new_ids(19, 4)
    assert set(updated) == {-2, -1, 16, 17, 18, 19}
    assert all(bank.is_current(bank.entry(p)) for p in bank.preload_frame_inds)


def test_update_window_wider_than_history():
    bank = bank_with([1], range(20))
    bank.register_object(2)
    assert bank.update_memory_for_new_ids(19, 100) == list(range(20))
    assert bank.update_memory_for_new_ids(19, None) == list(range(20))


# -- attention ------------------------------------------------------------------


def test_attention_most_recent():
    bank = bank_with([1], range(20))
    assert bank.select_attention_frames(20, 5) == [15, 16, 17, 18, 19]


def test_attention_skips_stale_shapes():
    bank = bank_with([1], range(20))
    bank.register_object(2)
    bank.update_memory_for_new_ids(19, 4)
    assert bank.select_attention_frames(20, 8) == [16, 17, 18, 19]


def test_attention_always_includes_preload_conditions():
    bank = init_state(bank_with([1], [7]).export_preload([7]))
    for f in range(20):
        bank.write_frame_output(f, False, rows(1))
    got = bank.select_attention_frames(20, 2)
    assert got == [-1, 18, 19]


def test_attention_limit_validated():
    with pytest.raises(ValueError):
        MemoryBank().select_attention_frames(3, 0)


def test_attention_cond_through_adds_newer_prompts():
    bank = bank_with([1], range(10), cond={0, 5, 9})
    assert bank.select_attention_frames(3, 2) == [1, 2]
    assert bank.select_attention_frames(3, 2, cond_through=9) == [1, 2, 5, 9]
    assert bank.select_attention_frames(3, 2, cond_through=6) == [1, 2, 5]


# -- writes -----------------------------------------------------------------------


def test_promotion_to_condition():
    bank = bank_with([1], [])
    bank.write_frame_output(5, False, rows(1))
    bank.write_frame_output(5, True, rows(1))
    assert 5 in bank.cond_frame_outputs
    assert 5 not in bank.non_cond_frame_outputs
    assert 5 in bank.consolidated_frame_inds
    assert 5 not in bank.per_obj_outputs[1][NON_COND]
    assert 5 in bank.per_obj_outputs[1][COND]


def test_condition_is_sticky():
    bank = bank_with([1], [])
    bank.write_frame_output(5, True, rows(1))
    bank.write_frame_output(5, False, rows(1, 2.0))
    assert bank.entry(5).is_condition
    assert bank.entry(5).rows[0, 0] == 2.0


def test_write_shape_mismatch():
    bank = bank_with([1, 2, 3], [])
    with pytest.raises(ShapeError):
        bank.write_frame_output(0, False, rows(2))


def test_write_to_evicted_index_accepted():
    bank = bank_with([1], range(30))
    bank.release_old_frames(29, 10)
    assert 3 not in bank
    bank.write_frame_output(3, False, rows(1))
    assert 3 in bank


# -- eviction -----------------------------------------------------------------------


def test_release_cutoff():
    bank = bank_with([1], range(101))
    bank.release_old_frames(100, 20)
    assert min(bank.frame_indices) > 79
    # exactly `retention` frames stay resident: 81..100
    assert bank.frame_indices == list(range(81, 101))


def test_release_keeps_preload_in_bank_and_store():
    bank = init_state(bank_with([1], [3, 4]).export_preload([3, 4]))
    store = FrameStore()
    store.append_frames([FrameRecord(i) for i in range(101)])
    for f in range(101):
        bank.write_frame_output(f, False, rows(1))
    bank.release_old_frames(100, 20, store)
    assert bank.preload_frame_inds == {-2, -1}
    assert -2 in bank and -1 in bank
    assert store.images_idx == list(range(81, 101))


def test_release_early_is_noop():
    bank = bank_with([1], range(6))
    assert bank.release_old_frames(5, 20) == []
    assert bank.frame_indices == list(range(6))


def test_release_drops_everywhere():
    bank = bank_with([1, 2], range(10), cond={2, 4})
    bank.release_old_frames(9, 5)
    for f in range(5):
        assert f not in bank.cond_frame_outputs and f not in bank.non_cond_frame_outputs
        assert f not in bank.consolidated_frame_inds
        for per_obj in bank.per_obj_outputs.values():
            assert f not in per_obj[COND] and f not in per_obj[NON_COND]
    check_invariants(bank)


# -- preload ------------------------------------------------------------------------


def test_init_without_preload():
    bank = init_state()
    assert len(bank) == 0 and len(bank.registry) == 0


def test_init_with_preload_counts():
    payload = bank_with([4, 8], range(12), cond={0, 5, 10}).export_preload([0, 5, 10])
    bank = init_state(payload)
    assert len(bank.preload_frame_inds) == 3
    assert len(bank.registry) == 2
    assert bank.preload_frame_inds == {-3, -2, -1}
    assert [bank.preload_source[f] for f in (-3, -2, -1)] == [0, 5, 10]
    check_invariants(bank)


def test_preload_duplicate_ids_rejected():
    payload = bank_with([4, 8], [0]).export_preload([0])
    payload["registry"] = [4, 4]
    with pytest.raises(PreloadFormatError):
        init_state(payload)


@pytest.mark.parametrize("mutate", [
    lambda p: p.update(format="other"),
    lambda p: p.update(version=99),
    lambda p: p["entries"][0].update(rows=[[1.0, 2.0]]),
    lambda p: p["entries"].append(dict(p["entries"][0])),
    lambda p: p.update(entries="nope"),
])
def test_preload_malformed(mutate):
    payload = bank_with([4, 8], [0]).export_preload([0])
    mutate(payload)
    with pytest.raises(PreloadFormatError):
        init_state(payload)


def test_preload_round_trip_is_exact(tmp_path):
    src = bank_with([4, 8], range(12), cond={0, 5, 10})
    src.entry(5).rows[1] = (1.0, 0.1, 1 / 3, 7.25)
    payload = src.export_preload([0, 5, 10])
    path = tmp_path / "bank.json"
    dump_preload(payload, path)
    loaded = load_preload(path)
    again = init_state(loaded).export_preload([-3, -2, -1])
    assert dumps_preload(again) == path.read_text()
    assert init_state(loaded).preload_frame_inds == {-3, -2, -1}


def test_export_empty_selection():
    payload = bank_with([4], [0]).export_preload([])
    bank = init_state(payload)
    assert bank.preload_frame_inds == set()
    assert bank.registry.obj_ids == [4]


def test_export_missing_frame():
    with pytest.raises(MissingFrameError):
        bank_with([4], [0]).export_preload([3])


def test_export_pads_stale_rows():
    bank = bank_with([1], range(5))
    bank.register_object(2)
    bank.update_memory_for_new_ids(4, 1)
    payload = bank.export_preload([0])
    assert np.asarray(payload["entries"][0]["rows"]).shape == (2, FEATURE_DIM)


# -- properties ---------------------------------------------------------------------------


actions = st.lists(
    st.one_of(
        st.tuples(st.just("write"), st.integers(0, 60), st.booleans()),
        st.tuples(st.just("register"), st.integers(0, 60), st.integers(1, 30)),
        st.tuples(st.just("release"), st.integers(0, 60), st.integers(1, 30)),
    ),
    max_size=50,
)


@settings(max_examples=150, deadline=None)
@given(actions, st.integers(0, 3))
def test_bank_invariants_under_random_ops(seq, n_preload):
    src = bank_with([100], range(n_preload), cond=set(range(n_preload)))
    bank = init_state(src.export_preload(range(n_preload)))
    preload = set(bank.preload_frame_inds)
    slots = dict(bank.registry.slot_of)
    next_id = 0
    for op, f, arg in seq:
        if op == "write":
            bank.write_frame_output(f, arg, rows(len(bank.registry)))
        elif op == "register":
            bank.register_object(next_id)
            slots[next_id] = len(slots)
            next_id += 1
            bank.update_memory_for_new_ids(f, arg)
        else:
            bank.release_old_frames(f, arg)
        check_invariants(bank)
        assert bank.preload_frame_inds == preload
        assert all(p in bank for p in preload)
        assert bank.registry.slot_of == slots
        for g in bank.select_attention_frames(f, 5, cond_through=f + 10):
            assert bank.is_current(bank.entry(g))


def test_promotion_keeps_one_key():
    bank = bank_with([1], [])
    bank.write_frame_output(5, False, rows(1))
    bank.write_frame_output(5, True, rows(1))
    bank.write_frame_output(5, True, rows(1))
    assert bank.frame_indices == [5]
    assert len(bank) == 1
