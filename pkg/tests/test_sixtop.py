import random

import pytest
from hypothesis import given, settings, strategies as st

from sixsim.core import CellCoord, CellKind, CellOption, ScheduleEntry, SlotframeSchedule
from sixsim.sixtop import (Command, InsufficientCells, MsfCounters, SixPTransaction, TxnKind, TxnState,
                           complete_add, confirm_three_step, expire_locks, extend_locks,
                           finish_three_step, first_attempt_success_probability, initiate_add,
                           msf_adapt, release_locks, respond_add)


def schedule_with(length=100, taken=()):
    s = SlotframeSchedule(length)
    s.add(ScheduleEntry(CellCoord(0, 0), CellOption.SHARED, CellKind.MINIMAL))
    for slot in taken:
        s.add(ScheduleEntry(CellCoord(slot, 3), CellOption.RX, CellKind.AUTONOMOUS_RX))
    return s


def only_free(length, free):
    return schedule_with(length, [x for x in range(1, length) if x not in set(free)])


def locked(s):
    return [e for e in s if e.kind is CellKind.LOCKED]


def add(req, k=5, kind=TxnKind.TWO_STEP, num=1, seed=0, asn=0, lock=300):
    return initiate_add(req, 1, 2, num, kind, k=k, rng=random.Random(seed), asn=asn, lock_slots=lock,
                        nb_channels=16)


def test_two_step_locks_k_cells():
    req = only_free(100, range(1, 41))
    txn = add(req)
    assert len(locked(req)) == 5 and len(txn.proposed_cells) == 5
    assert all(e.lock_deadline == 300 and e.neighbor == 2 for e in locked(req))
    assert txn.state is TxnState.AWAITING_RESPONSE


def test_insufficient_cells_takes_no_lock():
    req = only_free(100, [4, 5, 6])
    with pytest.raises(InsufficientCells):
        add(req)
    assert not locked(req)


def test_three_step_requester_locks_nothing():
    req, resp = only_free(100, range(1, 60)), only_free(100, range(30, 99))
    txn = add(req, kind=TxnKind.THREE_STEP)
    assert not locked(req)
    proposal = respond_add(resp, txn, random.Random(1), 0, k=5)
    assert len(locked(resp)) == 5 and txn.state is TxnState.AWAITING_CONFIRMATION
    grant = confirm_three_step(req, txn, proposal, random.Random(2), 10)
    finish_three_step(resp, txn, grant, 20)
    assert not locked(resp) and txn.state is TxnState.DONE
    for c in grant:
        assert req.get(c.slot_offset).option is CellOption.TX
        assert resp.get(c.slot_offset).option is CellOption.RX


def test_grant_is_subset_of_intersection():
    req = schedule_with()
    txn = SixPTransaction(1, 2, TxnKind.TWO_STEP, Command.ADD, 5, lock_deadline=300,
                          proposed_cells=[CellCoord(s, 1) for s in (3, 7, 20, 41, 66)])
    resp = only_free(100, [7, 41, 90])
    grant = respond_add(resp, txn, random.Random(0), 0)
    assert {c.slot_offset for c in grant} <= {7, 41}
    assert {c.slot_offset for c in grant} == {7, 41}  # num_cells 5 takes all usable


def test_zero_overlap_and_single_grant():
    txn = SixPTransaction(1, 2, TxnKind.TWO_STEP, Command.ADD, 1, lock_deadline=300,
                          proposed_cells=[CellCoord(s, 1) for s in (3, 7, 20)])
    assert respond_add(only_free(100, [50, 60]), txn, random.Random(0), 0) == []
    txn.granted = []
    assert len(respond_add(only_free(100, [3, 7, 20, 50]), txn, random.Random(0), 0)) == 1


def test_complete_add_unlocks_rest():
    req, resp = only_free(100, range(1, 99)), only_free(100, range(1, 99))
    txn = add(req, num=2)
    grant = respond_add(resp, txn, random.Random(3), 5)
    installed = complete_add(req, txn, grant, 6)
    assert installed == grant and len(grant) == 2
    assert not locked(req)
    assert txn.state is TxnState.DONE
    assert release_locks(req, txn) == 0  # idempotent


def test_expire_locks_boundaries():
    req = only_free(100, range(1, 99))
    assert expire_locks(req, 10_000) == 0
    txn = add(req, asn=0, lock=300)
    assert expire_locks(req, 300) == 0  # deadline == asn is still held
    assert expire_locks(req, 301) == 5
    assert txn.state is TxnState.TIMED_OUT and not locked(req)


def test_extend_locks_moves_deadline():
    req = only_free(100, range(1, 99))
    txn = add(req, lock=300)
    extend_locks(req, txn, 900)
    assert txn.lock_deadline == 900
    assert expire_locks(req, 800) == 0 and expire_locks(req, 901) == 5


@pytest.mark.parametrize("used,cells,cmd", [(64, 1, Command.ADD), (0, 1, None), (32, 3, None),
                                            (0, 3, Command.DELETE)])
def test_msf_adapt(used, cells, cmd):
    c = MsfCounters(elapsed=64, used=used)
    assert msf_adapt(c, cells) is cmd
    assert c.elapsed == 0 and c.used == 0


def test_msf_adapt_waits_for_window():
    c = MsfCounters(elapsed=63, used=63)
    assert msf_adapt(c, 1) is None and c.elapsed == 63


def test_psuccess_examples():
    assert first_attempt_success_probability(100, 100, 100, 5) == 1.0
    assert first_attempt_success_probability(0, 70, 100, 5) == 0.0
    assert first_attempt_success_probability(50, 50, 100, 5) == pytest.approx(0.7627, abs=1e-4)


def test_psuccess_rejects_bad_input():
    for args in [(1, 1, 0, 5), (1, 1, 10, 0), (11, 1, 10, 1), (-1, 1, 10, 1)]:
        with pytest.raises(ValueError):
            first_attempt_success_probability(*args)


@given(st.integers(0, 100), st.integers(0, 100), st.integers(1, 20), st.integers(1, 5))
def test_psuccess_monotone(fa, fb, k, step):
    p = first_attempt_success_probability(fa, fb, 100, k)
    assert 0.0 <= p <= 1.0
    assert first_attempt_success_probability(min(fa + step, 100), fb, 100, k) >= p
    assert first_attempt_success_probability(fa, min(fb + step, 100), 100, k) >= p
    assert first_attempt_success_probability(fa, fb, 100, k + step) >= p


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 3), st.integers(5, 10))
def test_lock_safety_random_exchanges(seed, num, k):
    """Interleaved adds, grants and timeouts never leave a slot both locked and negotiated."""
    rng = random.Random(seed)
    req, resp = schedule_with(), schedule_with()
    asn = 0
    for _ in range(12):
        asn += rng.randrange(50, 400)
        expire_locks(req, asn)
        try:
            txn = add(req, k=k, num=num, seed=rng.randrange(1 << 30), asn=asn)
        except InsufficientCells:
            break
        if rng.random() < 0.3:
            continue  # request lost; lock waits for its timeout
        grant = respond_add(resp, txn, rng, asn)
        complete_add(req, txn, grant, asn)
        slots = [e.slot for e in req]
        assert len(slots) == len(set(slots))
        for e in req:
            if e.kind is CellKind.NEGOTIATED:
                assert resp.get(e.slot).kind is CellKind.NEGOTIATED
        assert all(e.txn is not txn for e in locked(req))
