import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from sixsim.core import CellCoord, CellKind, CellOption, ScheduleEntry, SlotframeSchedule
from sixsim.pb import (FLAG_FREE, FLAG_OCCUPIED, Candidate, CodecError, PbDaoPayload, PbDioPayload,
                       algorithm1_on_dio, apply_grant, build_dao_payload, build_dio_payload,
                       circular_distance, decode_slot_list, dio_temporary_slots, encode_budgeted,
                       encode_slot_list, expire_temporary, frame_slot_list, max_injected_list_length,
                       parent_on_dao, pick_for_forwarded_dao, queue_pressure_reserve,
                       select_nearest_slots, slots_to_contend, unframe_slot_list)


def schedule(length=100, taken=()):
    s = SlotframeSchedule(length)
    s.add(ScheduleEntry(CellCoord(0, 0), CellOption.SHARED, CellKind.MINIMAL))
    for slot in taken:
        s.add(ScheduleEntry(CellCoord(slot, 2), CellOption.RX, CellKind.AUTONOMOUS_RX))
    return s


# ---------------------------------------------------------------- codec

@pytest.mark.parametrize("length,expected", [(100, 47), (6, 0), (50, 22)])
def test_max_injected_list_length_examples(length, expected):
    assert max_injected_list_length(length) == expected


def test_max_injected_list_length_rejects_short_frames():
    with pytest.raises(ValueError):
        max_injected_list_length(5)


def test_encode_examples():
    assert encode_slot_list([], 10) == bytes([FLAG_FREE])
    assert encode_slot_list([2, 5], 10) == bytes([FLAG_FREE, 2, 5])
    assert encode_slot_list(range(1, 9), 10) == bytes([FLAG_OCCUPIED, 9])
    # tie between lists goes to the free list
    assert encode_slot_list([1, 2], 5) == bytes([FLAG_FREE, 1, 2])


@given(st.integers(10, 256).flatmap(lambda L: st.tuples(st.just(L), st.sets(st.integers(1, L - 1)))))
def test_codec_roundtrip_and_length(args):
    length, free = args
    enc = encode_slot_list(free, length)
    assert decode_slot_list(enc, length) == sorted(free)
    occupied = (length - 1) - len(free)
    assert len(enc) == 1 + min(len(free), occupied)


def test_codec_errors():
    with pytest.raises(CodecError):
        encode_slot_list([0, 3], 10)
    with pytest.raises(CodecError):
        encode_slot_list([3], 300)
    with pytest.raises(CodecError):
        decode_slot_list(b"", 10)
    with pytest.raises(CodecError):
        decode_slot_list(bytes([7, 1]), 10)
    with pytest.raises(CodecError):
        decode_slot_list(bytes([FLAG_FREE, 12]), 10)


def test_wire_framing():
    enc = bytes([FLAG_FREE, 4, 9])
    wire = frame_slot_list(enc)
    assert wire == bytes([FLAG_FREE, 2, 4, 9])
    assert unframe_slot_list(wire + b"\x07") == (enc, 4)
    with pytest.raises(CodecError):
        unframe_slot_list(wire[:3])


def test_dio_payload_wire_roundtrip():
    s = schedule(100, range(1, 60))
    p = build_dio_payload(s, 30, [61, 70, 80], max_ext_bytes=44)
    back = PbDioPayload.from_wire(p.wire(), 100)
    assert back.free_slots == p.free_slots and back.proposed_slots == [61, 70, 80]


def test_dao_payload_wire_roundtrip():
    s = schedule(100, range(20, 90))
    p = build_dao_payload(s, 10, 2, [5, 95], max_ext_bytes=55)
    back = PbDaoPayload.from_wire(p.wire(), 100)
    assert back.child_free_slots == p.child_free_slots
    assert (back.requested_count, back.selected_slots) == (2, [5, 95])
    with pytest.raises(ValueError):
        PbDaoPayload([], 1, [1, 2, 3, 4, 5, 6])


def test_budget_truncates_nearest_first():
    free = list(range(1, 48))  # 47 free slots, 52 occupied
    enc = encode_budgeted(free, 100, current_slot=20, max_ids=44)
    kept = decode_slot_list(enc, 100)
    assert enc[0] == FLAG_FREE and len(kept) == 44
    dropped = set(free) - set(kept)
    worst_kept = max(circular_distance(s, 20, 100) for s in kept)
    assert all(circular_distance(s, 20, 100) >= worst_kept for s in dropped)


def test_budget_passes_short_lists_untouched():
    free = [3, 50, 97]
    assert encode_budgeted(free, 100, 0, 44) == encode_slot_list(free, 100)


@settings(max_examples=200)
@given(st.sets(st.integers(1, 99), max_size=99), st.integers(0, 99))
def test_dio_fits_frame_budget(taken, slot):
    s = schedule(100, taken)
    p = build_dio_payload(s, slot, list(range(7)), max_ext_bytes=44)
    assert len(p.wire()) <= 44
    assert set(p.free_slots) <= set(s.free_slots())


# ---------------------------------------------------------------- nearest slots

def test_nearest_examples():
    assert set(select_nearest_slots([10, 20, 90], 15, 2, 100)) == {10, 20}
    assert select_nearest_slots([90, 95, 10], 5, 1, 100) == [10]
    assert select_nearest_slots([42], 7, 3, 100) == [42]


def test_nearest_tie_prefers_forward():
    assert select_nearest_slots([10, 20], 15, 1, 100) == [20]


@given(st.sets(st.integers(0, 99), min_size=1), st.integers(0, 99), st.integers(0, 10))
def test_nearest_is_optimal(free, cur, nb):
    picked = select_nearest_slots(free, cur, nb, 100)
    assert len(picked) == min(nb, len(free))
    assert len(set(picked)) == len(picked) and set(picked) <= free
    if picked:
        worst = max(circular_distance(s, cur, 100) for s in picked)
        for s in free - set(picked):
            assert circular_distance(s, cur, 100) >= worst


# ---------------------------------------------------------------- parent choice

def test_algorithm1_joining():
    d = algorithm1_on_dio(range(1, 100), [Candidate(0, 256, [10, 40])], current_parent=None,
                          current_parent_rank=None, cells_to_old_parent=0, current_slot=35,
                          slotframe_len=100)
    assert d.switch and d.parent == 0 and d.nb == 1 and d.selected == [40]


def test_algorithm1_caps_at_max_nb():
    d = algorithm1_on_dio(range(1, 100), [Candidate(4, 256, range(1, 100))], current_parent=7,
                          current_parent_rank=768, cells_to_old_parent=7, current_slot=0,
                          slotframe_len=100, max_nb=5)
    assert d.switch and d.nb == 5 and len(d.selected) == 5


def test_algorithm1_stays_without_free_slots():
    d = algorithm1_on_dio([], [Candidate(4, 256, range(1, 100))], current_parent=None,
                          current_parent_rank=None, cells_to_old_parent=0, current_slot=0,
                          slotframe_len=100)
    assert not d.switch


def test_algorithm1_skips_parent_without_common_slots():
    cands = [Candidate(1, 256, [5]), Candidate(2, 512, [30, 31])]
    d = algorithm1_on_dio([30, 31, 60], cands, current_parent=None, current_parent_rank=None,
                          cells_to_old_parent=0, current_slot=0, slotframe_len=100)
    assert d.parent == 2


def test_algorithm1_needs_better_rank_to_switch():
    d = algorithm1_on_dio(range(1, 100), [Candidate(3, 512, range(1, 100))], current_parent=1,
                          current_parent_rank=512, cells_to_old_parent=2, current_slot=0,
                          slotframe_len=100)
    assert not d.switch


@given(st.sets(st.integers(1, 99)), st.lists(st.tuples(st.integers(1, 9), st.integers(1, 6),
                                                        st.sets(st.integers(1, 99))),
                                              max_size=5, unique_by=lambda t: t[0]),
       st.integers(0, 99), st.one_of(st.none(), st.integers(1, 9)), st.integers(0, 8))
def test_algorithm1_switch_soundness(child, raw, cur, parent, cells):
    cands = [Candidate(i, r * 256, sorted(f)) for i, r, f in raw]
    prank = None if parent is None else 3 * 256
    d = algorithm1_on_dio(child, cands, current_parent=parent, current_parent_rank=prank,
                          cells_to_old_parent=cells, current_slot=cur, slotframe_len=100)
    if d.switch:
        chosen = next(c for c in cands if c.id == d.parent)
        common = set(child) & set(chosen.free_slots)
        assert common and set(d.selected) <= common
        assert 1 <= len(d.selected) <= 5
        if prank is not None:
            assert chosen.rank < prank


# ---------------------------------------------------------------- reservations

def test_parent_on_dao_grants_free_selection():
    parent = schedule(100, [50])
    assert parent_on_dao(parent, 9, [10, 20, 30], channel=4, asn=0) == [10, 20, 30]
    assert all(parent.get(s).option is CellOption.RX and parent.get(s).neighbor == 9 for s in (10, 20, 30))


def test_parent_on_dao_skips_occupied():
    parent = schedule(100, [20])
    assert parent_on_dao(parent, 9, [10, 20, 30], channel=4, asn=0) == [10, 30]


@given(st.sets(st.integers(1, 99)), st.lists(st.integers(1, 99), max_size=8))
def test_grants_are_valid(taken, selected):
    parent = schedule(100, taken)
    free_before = set(parent.free_slots())
    granted = parent_on_dao(parent, 3, selected, 1, 0)
    assert set(granted) <= free_before and len(granted) <= 5
    assert len(set(granted)) == len(granted)


def test_forwarded_dao_picks_own_slots():
    assert pick_for_forwarded_dao([5, 40, 41], [40, 41, 90], 39, 1, 100) == [40]


def test_apply_grant_installs_tx():
    child = schedule(100, [30])
    assert apply_grant(child, 0, [10, 30], 5, 0) == [10]
    assert child.get(10).option is CellOption.TX and child.get(10).neighbor == 0


def test_temporary_dio_slots_lifecycle():
    s = schedule(100, [1])  # slot 1 stands in for the permanent DIO Rx slot
    live = dio_temporary_slots(s, random.Random(0), 7, 3, asn=0, expires_at=1000)
    assert len(live) == 7 and 1 not in live
    again = dio_temporary_slots(s, random.Random(1), 7, 3, asn=500, expires_at=1500)
    assert again == live and all(s.get(x).expires_at == 1500 for x in live)
    assert expire_temporary(s, 1499) == 0
    assert expire_temporary(s, 1500) == 7
    assert s.get(1) is not None


def test_temporary_dio_slots_short_schedule():
    s = schedule(10, range(1, 7))
    assert len(dio_temporary_slots(s, random.Random(0), 7, 0, 0, 10)) == 3


def test_slots_to_contend():
    rng = random.Random(0)
    picked = slots_to_contend([3, 9, 14, 20, 33, 47, 80], rng, ratio=3)
    assert len(picked) == 3 and set(picked) <= {3, 9, 14, 20, 33, 47, 80}
    assert slots_to_contend([], rng) == []
    assert slots_to_contend([5], rng) == [5]


def test_disjoint_three_subsets_of_seven():
    # two senders each taking 3 of 7 slots avoid each other with probability C(4,3)/C(7,3)
    subsets = list(itertools.combinations(range(7), 3))
    disjoint = sum(1 for a in subsets for b in subsets if not set(a) & set(b))
    assert disjoint / len(subsets) ** 2 == pytest.approx(4 / 35)


@pytest.mark.parametrize("free,last,now,fires", [(2, None, 1000, True), (2, 900, 1000, False),
                                                 (5, None, 1000, False), (2, 800, 1000, True),
                                                 (0, 799, 1000, True)])
def test_queue_pressure(free, last, now, fires):
    assert queue_pressure_reserve(free, now, last, has_parent=True, threshold=2,
                                  cooldown_slots=200) is fires


def test_queue_pressure_needs_parent():
    assert not queue_pressure_reserve(0, 10, None, has_parent=False)
