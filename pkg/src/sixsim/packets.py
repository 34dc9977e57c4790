"""Frames exchanged between simulated nodes."""

from __future__ import annotations

import enum
import itertools
from typing import Any, List, Optional


class PacketKind(enum.Enum):
    EB = "EB"
    DIS = "DIS"
    DIO = "DIO"
    DAO = "DAO"
    DAO_ACK = "DAO-ACK"
    SIXP_REQUEST = "6P-REQUEST"
    SIXP_RESPONSE = "6P-RESPONSE"
    SIXP_CONFIRM = "6P-CONFIRM"
    JOIN_REQUEST = "JOIN-REQUEST"
    JOIN_RESPONSE = "JOIN-RESPONSE"
    DATA = "DATA"


CONTROL_KINDS = frozenset(k for k in PacketKind if k is not PacketKind.DATA)
SIXP_KINDS = frozenset({PacketKind.SIXP_REQUEST, PacketKind.SIXP_RESPONSE, PacketKind.SIXP_CONFIRM})
BROADCAST = -1

_uids = itertools.count(1)


class Packet:
    """A frame sitting in a TSCH queue.

    ``dst`` is the link-layer destination: a node id, ``BROADCAST``, or None
    for frames routed upward through the current preferred parent.  Downward
    frames carry an explicit ``route`` of remaining hops.
    """

    __slots__ = ("uid", "kind", "origin", "dst", "route", "created_asn", "enqueued_asn",
                 "size", "payload", "retries", "hops", "reserve")

    def __init__(self, kind: PacketKind, origin: int, dst: Optional[int], *, created_asn: int,
                 size: int, payload: Any = None, route: Optional[List[int]] = None,
                 reserve: bool = False):
        self.uid = next(_uids)
        self.kind = kind
        self.origin = origin
        self.dst = dst
        self.route = route
        self.created_asn = created_asn
        self.enqueued_asn = created_asn
        self.size = size
        self.payload = payload
        self.retries = 0
        self.hops = 0
        # join/switch DAO carrying a cell reservation (cross-layer mode)
        self.reserve = reserve

    @property
    def is_broadcast(self) -> bool:
        return self.dst == BROADCAST

    @property
    def is_data(self) -> bool:
        return self.kind is PacketKind.DATA

    def __repr__(self) -> str:
        return f"Packet({self.kind.value}#{self.uid} {self.origin}->{self.dst})"
