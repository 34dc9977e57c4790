"""Time, cell, schedule and node-status primitives shared by every layer."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

log = logging.getLogger(__name__)

DEFAULT_SLOT_DURATION = 0.01
DEFAULT_SLOTFRAME_LENGTH = 100
DEFAULT_NB_CHANNELS = 16

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    return h


def synthetic_mac(node_id: int) -> bytes:
    """64-bit EUI-style address for a simulated node."""
    return bytes([0x02, 0x00, 0x5E, 0x10]) + node_id.to_bytes(4, "big")


def mac_hash_of(node_id: int) -> int:
    return fnv1a_64(synthetic_mac(node_id))


def asn_to_seconds(asn: int, slot_duration: float = DEFAULT_SLOT_DURATION) -> float:
    return asn * slot_duration


def hop_channel(asn: int, channel_offset: int, nb_channels: int) -> int:
    """Physical channel used by a cell at a given absolute slot number."""
    return (asn + channel_offset) % nb_channels


def autonomous_channel(mac_hash: int, nb_channels: int) -> int:
    """Channel offset derived from a node's address (identity transform on the hash)."""
    return mac_hash % nb_channels


def autonomous_slot(mac_hash: int, slotframe_length: int, nb_channels: int) -> int:
    # slot 0 belongs to the minimal cell
    return 1 + (mac_hash // nb_channels) % (slotframe_length - 1)


def occurrences(start: int, stop: int, slot_offset: int, length: int) -> int:
    """Number of ASNs in [start, stop) whose slot offset is ``slot_offset``."""
    if stop <= start:
        return 0
    first = start + ((slot_offset - start) % length)
    if first >= stop:
        return 0
    return (stop - 1 - first) // length + 1


class CellOption(enum.Enum):
    TX = "Tx"
    RX = "Rx"
    SHARED = "TxRxShared"


class CellKind(enum.Enum):
    MINIMAL = "Minimal"
    AUTONOMOUS_RX = "AutonomousRx"
    AUTONOMOUS_TX = "AutonomousTx"
    NEGOTIATED = "Negotiated"
    TEMPORARY_DIO = "TemporaryDio"
    LOCKED = "Locked"


@dataclass(frozen=True)
class CellCoord:
    slot_offset: int
    channel_offset: int

    def check(self, slotframe_length: int, nb_channels: int) -> None:
        if not 0 <= self.slot_offset < slotframe_length:
            raise ValueError(f"slot offset {self.slot_offset} outside [0, {slotframe_length})")
        if not 0 <= self.channel_offset < nb_channels:
            raise ValueError(f"channel offset {self.channel_offset} outside [0, {nb_channels})")


@dataclass
class ScheduleEntry:
    coord: CellCoord
    option: CellOption
    kind: CellKind
    neighbor: Optional[int] = None
    lock_deadline: Optional[int] = None
    expires_at: Optional[int] = None
    # bookkeeping filled in by the owning node
    installed_at: int = 0
    used: int = 0
    txn: object = None

    def __post_init__(self) -> None:
        if self.kind is CellKind.MINIMAL:
            if self.coord != CellCoord(0, 0) or self.option is not CellOption.SHARED:
                raise ValueError("minimal cell must be shared at (0, 0)")
        if self.kind is CellKind.LOCKED and self.lock_deadline is None:
            raise ValueError("locked entry needs a lock deadline")
        if (self.kind is CellKind.NEGOTIATED and self.option is CellOption.TX
                and self.neighbor is None):
            raise ValueError("negotiated Tx entry needs a neighbor")

    @property
    def slot(self) -> int:
        return self.coord.slot_offset

    @property
    def can_listen(self) -> bool:
        return self.kind is not CellKind.LOCKED and self.option is not CellOption.TX

    @property
    def can_send(self) -> bool:
        return self.kind is not CellKind.LOCKED and self.option is not CellOption.RX


class ScheduleConflict(Exception):
    pass


class SlotframeSchedule:
    """One slotframe, at most one entry per slot offset."""

    def __init__(self, length: int = DEFAULT_SLOTFRAME_LENGTH):
        if length <= 0:
            raise ValueError("slotframe length must be positive")
        self.length = length
        self.entries: Dict[int, ScheduleEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, slot: int) -> bool:
        return slot in self.entries

    def __iter__(self) -> Iterator[ScheduleEntry]:
        return iter(self.entries.values())

    def get(self, slot: int) -> Optional[ScheduleEntry]:
        return self.entries.get(slot)

    def add(self, entry: ScheduleEntry) -> ScheduleEntry:
        slot = entry.coord.slot_offset
        if not 0 <= slot < self.length:
            raise ValueError(f"slot offset {slot} outside slotframe")
        if slot in self.entries:
            raise ScheduleConflict(f"slot {slot} already holds {self.entries[slot].kind.value}")
        self.entries[slot] = entry
        return entry

    def remove(self, slot: int) -> Optional[ScheduleEntry]:
        return self.entries.pop(slot, None)

    def occupied_slots(self) -> List[int]:
        return sorted(self.entries)

    def free_slots(self) -> List[int]:
        return free_slots(self)

    def cells_to(self, neighbor: int, kind: CellKind = CellKind.NEGOTIATED,
                 option: CellOption = CellOption.TX) -> List[ScheduleEntry]:
        return [e for e in self.entries.values()
                if e.kind is kind and e.option is option and e.neighbor == neighbor]


def free_slots(schedule: SlotframeSchedule) -> List[int]:
    """Ascending free slot offsets; slot 0 is never reported free."""
    taken = schedule.entries
    return [s for s in range(1, schedule.length) if s not in taken]


class NodeState(enum.Enum):
    PLEDGE = "Pledge"
    SYNCHRONIZED = "Synchronized"
    JOINED = "Joined"


class StatusEvent(enum.Enum):
    EB_THRESHOLD_REACHED = "EbThresholdReached"
    JOIN_COMPLETED = "JoinCompleted"
    PARENT_LINK_LOST = "ParentLinkLost"
    DY_SYNC_EXPIRED = "DySyncExpired"


_TRANSITIONS = {
    (NodeState.PLEDGE, StatusEvent.EB_THRESHOLD_REACHED): NodeState.SYNCHRONIZED,
    (NodeState.SYNCHRONIZED, StatusEvent.JOIN_COMPLETED): NodeState.JOINED,
    (NodeState.JOINED, StatusEvent.PARENT_LINK_LOST): NodeState.SYNCHRONIZED,
    (NodeState.SYNCHRONIZED, StatusEvent.DY_SYNC_EXPIRED): NodeState.PLEDGE,
    (NodeState.JOINED, StatusEvent.DY_SYNC_EXPIRED): NodeState.PLEDGE,
}


@dataclass
class NodeStatus:
    state: NodeState = NodeState.PLEDGE
    last_rx_asn: int = 0
    dy_sync_window: float = 60.0
    dis_join_window: float = 30.0
    illegal_events: int = 0


def advance_status(node: NodeStatus, event: StatusEvent) -> NodeStatus:
    """Move along the node status cycle; illegal pairs leave the state unchanged."""
    nxt = _TRANSITIONS.get((node.state, event))
    if nxt is None:
        log.debug("ignored status event %s in state %s", event.value, node.state.value)
        node.illegal_events += 1
        return node
    node.state = nxt
    return node
