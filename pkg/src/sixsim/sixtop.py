"""6P add/delete transactions with cell locking, and the MSF scheduling policy."""

from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .core import CellCoord, CellKind, CellOption, ScheduleEntry, SlotframeSchedule, free_slots


class InsufficientCells(Exception):
    pass


class TxnKind(enum.Enum):
    TWO_STEP = "TwoStep"
    THREE_STEP = "ThreeStep"


class Command(enum.Enum):
    ADD = "Add"
    DELETE = "Delete"


class TxnState(enum.Enum):
    AWAITING_RESPONSE = "AwaitingResponse"
    AWAITING_CONFIRMATION = "AwaitingConfirmation"
    DONE = "Done"
    TIMED_OUT = "TimedOut"
    FAILED = "Failed"


_seqnums = itertools.count(1)


@dataclass
class SixPTransaction:
    requester: int
    responder: int
    kind: TxnKind
    command: Command
    num_cells: int
    lock_deadline: int
    proposed_cells: List[CellCoord] = field(default_factory=list)
    state: TxnState = TxnState.AWAITING_RESPONSE
    seqnum: int = field(default_factory=lambda: next(_seqnums))
    granted: List[CellCoord] = field(default_factory=list)
    started_asn: int = 0
    purpose: str = "adapt"

    @property
    def live(self) -> bool:
        return self.state in (TxnState.AWAITING_RESPONSE, TxnState.AWAITING_CONFIRMATION)


def first_attempt_success_probability(free_a: float, free_b: float, total: float, k: int) -> float:
    """Chance that at least one of k proposed cells is free at both ends."""
    if total < 1 or k < 1:
        raise ValueError("need total >= 1 and k >= 1")
    if not (0 <= free_a <= total and 0 <= free_b <= total):
        raise ValueError("free counts must lie in [0, total]")
    both = (free_a / total) * (free_b / total)
    return 1.0 - (1.0 - both) ** k


def _lock_cells(schedule: SlotframeSchedule, slots: Sequence[int], channels: Sequence[int],
                neighbor: int, deadline: int, option: CellOption, txn: SixPTransaction,
                asn: int) -> List[CellCoord]:
    cells = []
    for s, ch in zip(slots, channels):
        coord = CellCoord(s, ch)
        schedule.add(ScheduleEntry(coord, option, CellKind.LOCKED, neighbor=neighbor,
                                   lock_deadline=deadline, installed_at=asn, txn=txn))
        cells.append(coord)
    return cells


def propose_cells(schedule: SlotframeSchedule, k: int, rng: random.Random, nb_channels: int,
                  neighbor: int, deadline: int, option: CellOption, txn: SixPTransaction,
                  asn: int) -> List[CellCoord]:
    """Sample k free cells uniformly at random and lock them."""
    free = free_slots(schedule)
    if len(free) < k:
        raise InsufficientCells(f"{len(free)} free slots, {k} needed")
    slots = sorted(rng.sample(free, k))
    channels = [rng.randrange(nb_channels) for _ in slots]
    return _lock_cells(schedule, slots, channels, neighbor, deadline, option, txn, asn)


def initiate_add(requester_schedule: SlotframeSchedule, requester: int, responder: int,
                 num_cells: int, kind: TxnKind, *, k: int, rng: random.Random, asn: int,
                 lock_slots: int, nb_channels: int) -> SixPTransaction:
    """Start an ADD; with the 2-step variant the requester proposes and locks k cells."""
    if num_cells < 1:
        raise ValueError("num_cells must be positive")
    txn = SixPTransaction(requester, responder, kind, Command.ADD, num_cells,
                          lock_deadline=asn + lock_slots, started_asn=asn)
    if kind is TxnKind.TWO_STEP:
        if len(free_slots(requester_schedule)) < max(k, num_cells):
            txn.state = TxnState.FAILED
            raise InsufficientCells("requester lacks free cells to propose")
        txn.proposed_cells = propose_cells(requester_schedule, max(k, num_cells), rng, nb_channels,
                                           responder, txn.lock_deadline, CellOption.TX, txn, asn)
    return txn


def respond_add(responder_schedule: SlotframeSchedule, txn: SixPTransaction, rng: random.Random,
                asn: int, *, k: int = 5, nb_channels: int = 16,
                lock_slots: int = 300) -> List[CellCoord]:
    """Responder side of an ADD.

    2-step: keep the proposed cells that are also free here, grant up to
    num_cells of them at random and install them as Rx cells.  3-step: the
    responder proposes and locks k of its own free cells instead.
    """
    if txn.kind is TxnKind.THREE_STEP:
        txn.proposed_cells = propose_cells(responder_schedule, max(k, txn.num_cells), rng,
                                           nb_channels, txn.requester, asn + lock_slots,
                                           CellOption.RX, txn, asn)
        txn.state = TxnState.AWAITING_CONFIRMATION
        return list(txn.proposed_cells)
    free = set(free_slots(responder_schedule))
    usable = [c for c in txn.proposed_cells if c.slot_offset in free]
    grant = rng.sample(usable, min(txn.num_cells, len(usable)))
    grant.sort(key=lambda c: c.slot_offset)
    for c in grant:
        responder_schedule.add(ScheduleEntry(c, CellOption.RX, CellKind.NEGOTIATED,
                                             neighbor=txn.requester, installed_at=asn))
    txn.granted = grant
    return grant


def confirm_three_step(requester_schedule: SlotframeSchedule, txn: SixPTransaction,
                       proposal: Sequence[CellCoord], rng: random.Random,
                       asn: int) -> List[CellCoord]:
    """Requester picks from the responder's proposal (3-step, second message)."""
    free = set(free_slots(requester_schedule))
    usable = [c for c in proposal if c.slot_offset in free]
    grant = sorted(rng.sample(usable, min(txn.num_cells, len(usable))), key=lambda c: c.slot_offset)
    for c in grant:
        requester_schedule.add(ScheduleEntry(c, CellOption.TX, CellKind.NEGOTIATED,
                                             neighbor=txn.responder, installed_at=asn))
    txn.granted = grant
    txn.state = TxnState.DONE
    return grant


def finish_three_step(responder_schedule: SlotframeSchedule, txn: SixPTransaction,
                      confirmed: Sequence[CellCoord], asn: int) -> None:
    """Responder turns confirmed locks into Rx cells and releases the rest."""
    keep = {c.slot_offset for c in confirmed}
    release_locks(responder_schedule, txn)
    for c in confirmed:
        if c.slot_offset in keep and c.slot_offset not in responder_schedule:
            responder_schedule.add(ScheduleEntry(c, CellOption.RX, CellKind.NEGOTIATED,
                                                 neighbor=txn.requester, installed_at=asn))
    txn.state = TxnState.DONE


def release_locks(schedule: SlotframeSchedule, txn: SixPTransaction) -> int:
    """Drop every lock held for ``txn``; safe to call twice."""
    n = 0
    for c in txn.proposed_cells:
        e = schedule.get(c.slot_offset)
        if e is not None and e.kind is CellKind.LOCKED and e.txn is txn:
            schedule.remove(c.slot_offset)
            n += 1
    return n


def complete_add(requester_schedule: SlotframeSchedule, txn: SixPTransaction,
                 granted: Sequence[CellCoord], asn: int) -> List[CellCoord]:
    """Requester side of a 2-step response: granted locks become Tx cells."""
    release_locks(requester_schedule, txn)
    installed = []
    for c in granted:
        if c.slot_offset not in requester_schedule:
            requester_schedule.add(ScheduleEntry(c, CellOption.TX, CellKind.NEGOTIATED,
                                                 neighbor=txn.responder, installed_at=asn))
            installed.append(c)
    txn.granted = list(installed)
    txn.state = TxnState.DONE
    return installed


def extend_locks(schedule: SlotframeSchedule, txn: SixPTransaction, deadline: int) -> None:
    """Move the transaction timeout (and its cell locks) to ``deadline``."""
    txn.lock_deadline = deadline
    for e in schedule:
        if e.kind is CellKind.LOCKED and e.txn is txn:
            e.lock_deadline = deadline


def expire_locks(schedule: SlotframeSchedule, asn: int) -> int:
    """Free every lock whose deadline is strictly before ``asn``."""
    expired = [e for e in schedule if e.kind is CellKind.LOCKED and e.lock_deadline < asn]
    for e in expired:
        schedule.remove(e.slot)
        txn = e.txn
        if isinstance(txn, SixPTransaction) and txn.live:
            txn.state = TxnState.TIMED_OUT
    return len(expired)


@dataclass
class MsfCounters:
    """Cell usage towards the preferred parent over the current window."""
    elapsed: int = 0
    used: int = 0


def msf_adapt(counters: MsfCounters, negotiated_cells: int, *, window: int = 64,
              hi: float = 0.75, lo: float = 0.25) -> Optional[Command]:
    """Traffic-adaptive decision once a window of cell occurrences has elapsed.

    Returns ADD when the cells are mostly used, DELETE when mostly idle and
    more than one cell exists, else None.  The counters reset at window end.
    """
    if counters.elapsed < window:
        return None
    ratio = counters.used / counters.elapsed if counters.elapsed else 0.0
    counters.elapsed = 0
    counters.used = 0
    if ratio > hi:
        return Command.ADD
    if ratio < lo and negotiated_cells > 1:
        return Command.DELETE
    return None
