"""TSCH MAC pieces: bounded queue, link ACKs, shared-cell backoff and energy accounting."""

from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional

from .packets import Packet

MAX_ACK_GRANTS = 5


class QueueFull(Exception):
    pass


class TschQueue:
    def __init__(self, capacity: int = 10):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.packets: Deque[Packet] = deque()
        self.txqueue_full = 0

    def __len__(self) -> int:
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def __bool__(self) -> bool:
        return bool(self.packets)

    @property
    def free_space(self) -> int:
        return self.capacity - len(self.packets)

    def enqueue(self, pkt: Packet, asn: int = 0) -> bool:
        if len(self.packets) >= self.capacity:
            self.txqueue_full += 1
            return False
        pkt.enqueued_asn = asn
        self.packets.append(pkt)
        assert len(self.packets) <= self.capacity
        return True

    def remove(self, pkt: Packet) -> None:
        self.packets.remove(pkt)

    def clear(self) -> List[Packet]:
        out = list(self.packets)
        self.packets.clear()
        return out


@dataclass
class LinkAck:
    src: int
    dst: int
    ack_for: int
    granted_slots: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.granted_slots) > MAX_ACK_GRANTS:
            raise ValueError(f"a link ACK carries at most {MAX_ACK_GRANTS} slots")
        for s in self.granted_slots:
            if not 0 <= s < 256:
                raise ValueError("slot ids are 8-bit")

    def encode(self) -> bytes:
        return bytes([len(self.granted_slots), *self.granted_slots])

    @classmethod
    def decode(cls, data: bytes, src: int, dst: int, ack_for: int) -> "LinkAck":
        n = data[0]
        return cls(src, dst, ack_for, list(data[1:1 + n]))


class Outcome(enum.Enum):
    IDLE = "idle"
    DELIVERED = "delivered"
    COLLISION = "collision"


def shared_cell_contention(transmitters: Iterable[int]) -> tuple:
    """(outcome, winner) for one shared cell; delivery is still subject to PDR."""
    tx = list(transmitters)
    if not tx:
        return Outcome.IDLE, None
    if len(tx) == 1:
        return Outcome.DELIVERED, tx[0]
    return Outcome.COLLISION, None


class Backoff:
    """Binary exponential backoff counted in occurrences of the shared cell."""

    def __init__(self, rng: random.Random, min_be: int = 1, max_be: int = 4):
        self.rng = rng
        self.min_be = min_be
        self.max_be = max_be
        self.be = 0
        self.counter = 0

    def ready(self) -> bool:
        return self.counter == 0

    def tick(self) -> None:
        if self.counter > 0:
            self.counter -= 1

    def failure(self) -> None:
        self.be = self.min_be if self.be == 0 else min(self.be + 1, self.max_be)
        self.counter = self.rng.randint(1, 2 ** self.be)

    def success(self) -> None:
        self.be = 0
        self.counter = 0


class EnergyState(enum.Enum):
    SLEEP = "Sleep"
    IDLE_LISTEN = "IdleListen"
    TX_DATA_RX_ACK = "TxDataRxAck"
    RX_DATA_TX_ACK = "RxDataTxAck"
    TX_DATA = "TxData"
    RX_DATA = "RxData"


# microcoulombs per slot; CC2538-class magnitudes, configuration rather than measurement
DEFAULT_CHARGE_TABLE: Dict[EnergyState, float] = {
    EnergyState.SLEEP: 0.1,
    EnergyState.IDLE_LISTEN: 6.4,
    EnergyState.TX_DATA_RX_ACK: 54.5,
    EnergyState.RX_DATA_TX_ACK: 32.6,
    EnergyState.TX_DATA: 49.5,
    EnergyState.RX_DATA: 22.6,
}


def _to_nc(uc: float) -> int:
    return int(round(uc * 1000))


class EnergyLedger:
    """Per-state slot counters plus an online charge accumulator.

    Charges are kept in integer nanocoulombs so the online running total and
    the settled sum of counters agree exactly.
    """

    def __init__(self, charge_table: Optional[Dict[EnergyState, float]] = None):
        table = dict(DEFAULT_CHARGE_TABLE if charge_table is None else charge_table)
        self.charge_table = table
        self._nc = {s: _to_nc(table[s]) for s in EnergyState}
        self.counters: Dict[EnergyState, int] = {s: 0 for s in EnergyState}
        self.online_nc = 0

    def add(self, state: EnergyState, slots: int = 1) -> None:
        if slots < 0:
            raise ValueError("negative slot count")
        self.counters[state] += slots
        self.online_nc += slots * self._nc[state]

    @property
    def total_slots(self) -> int:
        return sum(self.counters.values())

    @property
    def online_charge(self) -> float:
        return self.online_nc / 1000.0

    def settled_nc(self) -> int:
        return sum(self.counters[s] * self._nc[s] for s in EnergyState)


def settle_charge(ledger: EnergyLedger) -> float:
    """Total charge in microcoulombs: sum over states of slots times per-slot charge."""
    return ledger.settled_nc() / 1000.0
