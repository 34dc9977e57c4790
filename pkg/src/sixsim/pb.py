"""Cross-layer (PB) scheduling: slot lists in DIO/DAO, slot-aware parent choice,
ACK-granted reservations, temporary DIO slots and early reservation."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Set, Tuple

from .core import CellCoord, CellKind, CellOption, ScheduleEntry, SlotframeSchedule, free_slots

FLAG_FREE = 0x00
FLAG_OCCUPIED = 0x01


class CodecError(ValueError):
    pass


def max_injected_list_length(slotframe_len: int) -> int:
    """Longest slot list a node ever needs to send: every joined node holds
    at least three cells, so the shorter of the free/occupied lists is bounded."""
    if slotframe_len < 6:
        raise ValueError("slotframe length must be at least 6")
    return slotframe_len // 2 - 3


def encode_slot_list(free: Iterable[int], slotframe_len: int) -> bytes:
    """Compact schedule notation: a flag byte followed by whichever list is shorter.

    Slot 0 is always occupied so it never appears in either list.  Ties go to
    the free list.
    """
    if slotframe_len > 256:
        raise CodecError("slot ids are 8-bit")
    fs = sorted(set(free))
    if fs and (fs[0] < 1 or fs[-1] >= slotframe_len):
        raise CodecError("free slot outside [1, L)")
    taken = set(fs)
    occ = [s for s in range(1, slotframe_len) if s not in taken]
    if len(fs) <= len(occ):
        return bytes([FLAG_FREE, *fs])
    return bytes([FLAG_OCCUPIED, *occ])


def decode_slot_list(data: bytes, slotframe_len: int) -> List[int]:
    if not data:
        raise CodecError("empty slot list")
    flag, ids = data[0], list(data[1:])
    if any(not 1 <= s < slotframe_len for s in ids):
        raise CodecError("slot id outside [1, L)")
    if flag == FLAG_FREE:
        return sorted(ids)
    if flag == FLAG_OCCUPIED:
        occ = set(ids)
        return [s for s in range(1, slotframe_len) if s not in occ]
    raise CodecError(f"unknown list flag {flag}")


def frame_slot_list(encoded: bytes) -> bytes:
    """Wire framing: [flag][count][ids]."""
    return bytes([encoded[0], len(encoded) - 1]) + encoded[1:]


def unframe_slot_list(wire: bytes, offset: int = 0) -> Tuple[bytes, int]:
    """Inverse of :func:`frame_slot_list`; returns (encoded, next offset)."""
    if len(wire) < offset + 2:
        raise CodecError("truncated slot list header")
    n = wire[offset + 1]
    end = offset + 2 + n
    if len(wire) < end:
        raise CodecError("truncated slot list")
    return bytes([wire[offset]]) + wire[offset + 2:end], end


def circular_distance(a: int, b: int, length: int) -> int:
    d = abs(a - b) % length
    return min(d, length - d)


def select_nearest_slots(free: Iterable[int], current_slot: int, nb: int,
                         slotframe_len: int) -> List[int]:
    """Up to ``nb`` slots closest to ``current_slot`` in either direction.

    Equal distances prefer the slot ahead of the current one; the result is
    ordered by that ranking.
    """
    def key(s: int):
        d = circular_distance(s, current_slot, slotframe_len)
        ahead = (s - current_slot) % slotframe_len
        return (d, 0 if ahead == d else 1, s)

    return sorted(set(free), key=key)[:max(nb, 0)]


def truncate_free_list(free: Sequence[int], current_slot: int, max_ids: int,
                       slotframe_len: int) -> List[int]:
    """Nearest-first subset of ``free`` that fits ``max_ids`` ids, ascending."""
    if len(free) <= max_ids:
        return sorted(free)
    return sorted(select_nearest_slots(free, current_slot, max_ids, slotframe_len))


def encode_budgeted(free: Sequence[int], slotframe_len: int, current_slot: int,
                    max_ids: int) -> bytes:
    """Compact list that never exceeds ``max_ids`` ids.

    An occupied list cannot be cut without advertising busy slots as free, so
    when it does not fit the free list is truncated nearest-first instead.
    """
    enc = encode_slot_list(free, slotframe_len)
    if len(enc) - 1 <= max_ids:
        return enc
    return bytes([FLAG_FREE, *truncate_free_list(free, current_slot, max_ids, slotframe_len)])


@dataclass
class PbDioPayload:
    free_slots: List[int]
    proposed_slots: List[int] = field(default_factory=list)
    encoded: bytes = b""

    def wire(self) -> bytes:
        return frame_slot_list(self.encoded) + bytes([len(self.proposed_slots), *self.proposed_slots])

    @classmethod
    def from_wire(cls, wire: bytes, slotframe_len: int) -> "PbDioPayload":
        enc, off = unframe_slot_list(wire)
        n = wire[off]
        proposed = list(wire[off + 1:off + 1 + n])
        return cls(decode_slot_list(enc, slotframe_len), proposed, enc)


@dataclass
class PbDaoPayload:
    child_free_slots: List[int]
    requested_count: int
    selected_slots: List[int] = field(default_factory=list)
    encoded: bytes = b""

    def __post_init__(self) -> None:
        if len(self.selected_slots) > 5:
            raise ValueError("at most 5 selected slots")

    def wire(self) -> bytes:
        return (frame_slot_list(self.encoded)
                + bytes([self.requested_count, *self.selected_slots]))

    @classmethod
    def from_wire(cls, wire: bytes, slotframe_len: int) -> "PbDaoPayload":
        enc, off = unframe_slot_list(wire)
        return cls(decode_slot_list(enc, slotframe_len), wire[off], list(wire[off + 1:]), enc)


def build_dio_payload(schedule: SlotframeSchedule, current_slot: int, proposed: Sequence[int],
                      max_ext_bytes: int) -> PbDioPayload:
    """DIO extension reflecting the schedule right now (called at dequeue)."""
    fs = free_slots(schedule)
    max_ids = max_ext_bytes - 3 - len(proposed)
    if max_ids < 0:
        raise ValueError("DIO budget too small for the proposed slots")
    enc = encode_budgeted(fs, schedule.length, current_slot, max_ids)
    return PbDioPayload(decode_slot_list(enc, schedule.length), list(proposed), enc)


def build_dao_payload(schedule: SlotframeSchedule, current_slot: int, requested: int,
                      selected: Sequence[int], max_ext_bytes: int) -> PbDaoPayload:
    fs = free_slots(schedule)
    max_ids = max_ext_bytes - 3 - len(selected)
    enc = encode_budgeted(fs, schedule.length, current_slot, max_ids)
    return PbDaoPayload(decode_slot_list(enc, schedule.length), requested, list(selected), enc)


@dataclass
class Decision:
    switch: bool
    parent: Optional[int] = None
    nb: int = 0
    selected: List[int] = field(default_factory=list)


@dataclass
class Candidate:
    id: int
    rank: int
    free_slots: Sequence[int]


def algorithm1_on_dio(child_free: Iterable[int], candidates: Sequence[Candidate], *,
                      current_parent: Optional[int], current_parent_rank: Optional[int],
                      cells_to_old_parent: int, current_slot: int, slotframe_len: int,
                      min_nb: int = 1, max_nb: int = 5) -> Decision:
    """Slot-aware parent selection.

    Picks the lowest-rank candidate (better than the current parent when
    switching) that shares at least ``min_nb`` free slots with the child, and
    the nearest shared slots to reserve with it.
    """
    own = set(child_free)
    if len(own) < min_nb or not own:
        return Decision(False)
    if current_parent is None:
        nb = min_nb
    else:
        nb = max(min_nb, min(cells_to_old_parent, max_nb))
    for c in sorted(candidates, key=lambda c: (c.rank, c.id)):
        if c.id == current_parent:
            continue
        if current_parent_rank is not None and c.rank >= current_parent_rank:
            break
        common = own.intersection(c.free_slots)
        if len(common) < min_nb:
            continue
        picked = select_nearest_slots(common, current_slot, min(nb, len(common)), slotframe_len)
        return Decision(True, c.id, nb, picked)
    return Decision(False)


def parent_on_dao(parent_schedule: SlotframeSchedule, child: int, selected: Sequence[int],
                  channel: int, asn: int) -> List[int]:
    """Reserve the still-free selected slots as Rx from ``child``; returns the grant."""
    free = set(free_slots(parent_schedule))
    granted = []
    for s in selected[:5]:
        if s in free and s not in granted:
            parent_schedule.add(ScheduleEntry(CellCoord(s, channel), CellOption.RX,
                                              CellKind.NEGOTIATED, neighbor=child, installed_at=asn))
            granted.append(s)
    return granted


def pick_for_forwarded_dao(own_free: Iterable[int], sender_free: Iterable[int], current_slot: int,
                           nb: int, slotframe_len: int, max_nb: int = 5) -> List[int]:
    """A hop receiving a DAO with no selection picks from the sender's list itself."""
    common = set(own_free).intersection(sender_free)
    return select_nearest_slots(common, current_slot, min(nb, max_nb), slotframe_len)


def apply_grant(child_schedule: SlotframeSchedule, parent: int, granted: Sequence[int],
                channel: int, asn: int) -> List[int]:
    """Child side of the ACK: install granted slots as Tx cells to the parent."""
    done = []
    for s in granted:
        if s not in child_schedule:
            child_schedule.add(ScheduleEntry(CellCoord(s, channel), CellOption.TX,
                                             CellKind.NEGOTIATED, neighbor=parent, installed_at=asn))
            done.append(s)
    return done


def dio_temporary_slots(schedule: SlotframeSchedule, rng: random.Random, count: int,
                        channel: int, asn: int, expires_at: int) -> List[int]:
    """Keep ``count`` temporary DIO Rx slots live until ``expires_at``.

    Live ones are extended first; new ones are drawn at random among free slots.
    """
    live = [e for e in schedule if e.kind is CellKind.TEMPORARY_DIO and e.option is CellOption.RX]
    live.sort(key=lambda e: e.slot)
    for e in live[count:]:
        schedule.remove(e.slot)
    keep = live[:count]
    for e in keep:
        e.expires_at = expires_at
    need = count - len(keep)
    if need > 0:
        fs = free_slots(schedule)
        for s in sorted(rng.sample(fs, min(need, len(fs)))):
            schedule.add(ScheduleEntry(CellCoord(s, channel), CellOption.RX, CellKind.TEMPORARY_DIO,
                                       expires_at=expires_at, installed_at=asn))
    return sorted(e.slot for e in schedule if e.kind is CellKind.TEMPORARY_DIO
                  and e.option is CellOption.RX)


def slots_to_contend(proposed: Sequence[int], rng: random.Random, ratio: int = 3) -> List[int]:
    """Subset of a DIO's proposed slots a DAO sender uses (ceil(n / ratio))."""
    if not proposed:
        return []
    k = min(len(proposed), math.ceil(len(proposed) / ratio))
    return sorted(rng.sample(list(proposed), k))


def expire_temporary(schedule: SlotframeSchedule, asn: int) -> int:
    gone = [e.slot for e in schedule if e.kind is CellKind.TEMPORARY_DIO
            and e.expires_at is not None and e.expires_at <= asn]
    for s in gone:
        schedule.remove(s)
    return len(gone)


def queue_pressure_reserve(free_space: int, asn: int, last_request_asn: Optional[int], *,
                           has_parent: bool, threshold: int = 2, cooldown_slots: int = 200) -> bool:
    """Whether a near-full queue should trigger a one-cell request now."""
    if not has_parent or free_space > threshold:
        return False
    return last_request_asn is None or asn - last_request_asn >= cooldown_slots


def free_set(schedule: SlotframeSchedule) -> Set[int]:
    return set(free_slots(schedule))
