"""Slot-by-slot simulation loop and the per-node protocol logic that runs inside it."""

from __future__ import annotations

import heapq
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import pb as pbmod
from .config import ScenarioConfig, validate
from .core import (CellCoord, CellKind, CellOption, NodeState, NodeStatus, ScheduleEntry,
                   SlotframeSchedule, StatusEvent, advance_status, autonomous_channel,
                   autonomous_slot, free_slots, hop_channel, mac_hash_of, occurrences)
from .mac import Backoff, EnergyLedger, EnergyState, LinkAck, TschQueue
from .packets import BROADCAST, Packet, PacketKind
from .metrics import node_rows, packet_rows
from .radio import Topology, generate_topology, link_uniform
from .rpl import INFINITE_RANK, NeighborEntry, TrickleState, compute_rank_of0, route_down
from .sixtop import (Command, extend_locks, InsufficientCells, MsfCounters, SixPTransaction, TxnKind,
                     TxnState, complete_add, confirm_three_step, expire_locks,
                     finish_three_step, initiate_add, msf_adapt, release_locks, respond_add)

log = logging.getLogger(__name__)

ROOT = 0
NOT_SENT = 1 << 62  # lock deadline of a transaction whose request is still queued
SCAN_KEY = 0xFFFFFFFF  # stands in for the peer id when a pledge picks its scan channel

# timer kinds
T_EB, T_TRICKLE_FIRE, T_TRICKLE_END, T_DAO, T_APP, T_WATCHDOG, T_SIXP_RETRY = range(7)

# rng purposes
R_BACKOFF, R_SIXP, R_APP, R_TIMER, R_PB, R_EB = range(6)

SHARED_KINDS = frozenset({CellKind.MINIMAL, CellKind.AUTONOMOUS_TX, CellKind.TEMPORARY_DIO})


class InvariantViolation(Exception):
    def __init__(self, asn: int, what: str):
        super().__init__(asn, what)
        self.asn = asn
        self.what = what

    def __str__(self) -> str:
        return f"asn {self.asn}: {self.what}"


def node_rng(seed: int, node: int, purpose: int) -> random.Random:
    state = np.random.SeedSequence([seed, node, purpose]).generate_state(2, dtype=np.uint64)
    return random.Random(int(state[0]) << 64 | int(state[1]))


@dataclass
class DaoInfo:
    parent: Optional[int]
    pb: Optional[pbmod.PbDaoPayload] = None


@dataclass
class DioInfo:
    rank: int
    pb: Optional[pbmod.PbDioPayload] = None


@dataclass
class SixPMessage:
    txn: SixPTransaction
    cells: List[CellCoord] = field(default_factory=list)


@dataclass
class PendingReserve:
    parent: int
    nb: int
    joining: bool
    started: int


class TrackedSchedule(SlotframeSchedule):
    """Schedule that keeps the engine's per-slot indexes and idle-listen tally in step."""

    def __init__(self, length: int, node: "Node"):
        super().__init__(length)
        self.node = node

    def add(self, entry: ScheduleEntry) -> ScheduleEntry:
        super().add(entry)
        sim = self.node.sim
        entry.installed_at = sim.now
        entry.used = 0
        slot = entry.coord.slot_offset
        if entry.can_send:
            sim.tx_index[slot].add(self.node.id)
        if entry.can_listen:
            sim.rx_index[slot].add(self.node.id)
        return entry

    def remove(self, slot: int) -> Optional[ScheduleEntry]:
        e = super().remove(slot)
        if e is None:
            return None
        sim = self.node.sim
        if e.can_listen:
            self.node.settle_idle(e, sim.now)
        if slot not in self.node.overlay:
            sim.tx_index[slot].discard(self.node.id)
        sim.rx_index[slot].discard(self.node.id)
        return e


class Tx:
    __slots__ = ("node", "entry", "pkt", "ch", "nh", "delivered", "grant")

    def __init__(self, node, entry, pkt, ch, nh):
        self.node = node
        self.entry = entry
        self.pkt = pkt
        self.ch = ch
        self.nh = nh
        self.delivered = False
        self.grant: Optional[List[int]] = None


class Node:
    def __init__(self, sim: "Simulation", nid: int):
        self.sim = sim
        self.id = nid
        cfg = sim.cfg
        L, C = cfg.slotframe_length, cfg.nb_channels
        self.mac_hash = mac_hash_of(nid)
        self.auto_slot = autonomous_slot(self.mac_hash, L, C)
        self.auto_ch = autonomous_channel(self.mac_hash, C)
        self.status = NodeStatus(dy_sync_window=cfg.dy_sync_s, dis_join_window=cfg.dis_join_s)
        self.schedule = TrackedSchedule(L, self)
        self.queue = TschQueue(cfg.queue_capacity)
        self.ledger = EnergyLedger(cfg.charge_table)
        seed = cfg.rng_seed
        self.rng_sixp = node_rng(seed, nid, R_SIXP)
        self.rng_app = node_rng(seed, nid, R_APP)
        self.rng_timer = node_rng(seed, nid, R_TIMER)
        self.rng_pb = node_rng(seed, nid, R_PB)
        # EBs go out on a fixed per-node grid of slotframes, whatever the join time
        self.eb_phase = node_rng(seed, nid, R_EB).randrange(cfg.eb_period_slotframes)
        self.backoff = Backoff(node_rng(seed, nid, R_BACKOFF), cfg.min_be, cfg.max_be)
        self.rank = INFINITE_RANK
        self.parent: Optional[int] = None
        self.children: set = set()
        self.neighbors: Dict[int, NeighborEntry] = {}
        self.trickle = TrickleState(cfg.slots(cfg.trickle_imin_s), cfg.trickle_doublings, cfg.trickle_k)
        self.trickle_gen = 0
        self.epoch = 0
        self.jepoch = 0
        self.eb_count = 0
        self.proxy: Optional[int] = None
        self.secured = False
        self.txns: Dict[int, SixPTransaction] = {}
        self.msf = MsfCounters()
        self.auto_tx: Dict[int, int] = {}
        # autonomous Tx cells sharing a slot offset with another cell; they win that slot when they have traffic
        self.overlay: Dict[int, ScheduleEntry] = {}
        self.pending: Optional[PendingReserve] = None
        self.last_reserve_asn: Optional[int] = None
        self.last_parent_contact = 0
        self.sync_start: Optional[int] = None
        self.synced_slots = 0
        self.t_sync: Optional[int] = None
        self.t_join: Optional[int] = None
        self.app_started = False
        self.retry_armed = False
        self.wd_gen = 0
        self.stale_since: Dict[int, int] = {}
        self.data_seq = 0
        self.drop_qfull = 0
        self.drop_qfull_data = 0
        self.drop_retry = 0
        self.drop_noroute = 0

    # ------------------------------------------------------------ helpers
    @property
    def state(self) -> NodeState:
        return self.status.state

    @property
    def joined(self) -> bool:
        return self.status.state is NodeState.JOINED

    def next_hop(self, pkt: Packet) -> Optional[int]:
        return pkt.dst if pkt.dst is not None else self.parent

    def tx_cells_to(self, nb: int) -> List[ScheduleEntry]:
        return [e for e in self.schedule.entries.values()
                if e.kind is CellKind.NEGOTIATED and e.option is CellOption.TX and e.neighbor == nb]

    def settle_idle(self, e: ScheduleEntry, upto: int) -> None:
        occ = occurrences(e.installed_at, upto, e.coord.slot_offset, self.schedule.length)
        idle = occ - e.used
        if idle < 0:
            raise InvariantViolation(self.sim.asn, f"node {self.id} slot {e.slot} used more than it occurred")
        self.ledger.add(EnergyState.IDLE_LISTEN, idle)
        e.installed_at = upto
        e.used = 0

    def timer(self, delay: int, kind: int, token: int = 0) -> None:
        self.sim.schedule_timer(self.sim.now + max(delay, 0), self.id, kind, token)

    def neighbor(self, nid: int) -> NeighborEntry:
        n = self.neighbors.get(nid)
        if n is None:
            n = NeighborEntry(nid, link_quality=self.sim.topo.pdr[self.id][nid])
            self.neighbors[nid] = n
        return n

    # ------------------------------------------------------------ queueing
    def send(self, pkt: Packet) -> bool:
        sim = self.sim
        if not self.queue.enqueue(pkt, sim.now):
            self.drop_qfull += 1
            if pkt.is_data:
                self.drop_qfull_data += 1
            sim.dropped(pkt, "qfull")
            return False
        sim.busy.add(self.id)
        if pkt.dst is not None and pkt.dst != BROADCAST and not pkt.is_data:
            self.ensure_auto_tx(pkt.dst)
        if sim.cfg.pb and self.joined and self.parent is not None:
            cfg = sim.cfg
            if pbmod.queue_pressure_reserve(self.queue.free_space, sim.now, self.last_reserve_asn,
                                            has_parent=True, threshold=cfg.queue_threshold,
                                            cooldown_slots=cfg.cooldown_slotframes * cfg.slotframe_length):
                if self.start_add(self.parent, cfg.cells_on_overflow, "pressure"):
                    self.last_reserve_asn = sim.now
        return True

    def has_queued(self, kind: PacketKind, dst) -> bool:
        return any(p.kind is kind and p.dst == dst for p in self.queue.packets)

    def ensure_auto_tx(self, nb: int) -> None:
        if nb in self.auto_tx:
            return
        other = self.sim.nodes[nb]
        slot = other.auto_slot
        entry = ScheduleEntry(CellCoord(slot, other.auto_ch), CellOption.TX, CellKind.AUTONOMOUS_TX, neighbor=nb)
        if slot in self.schedule:
            if slot in self.overlay:
                return  # two neighbors share the slot; this one falls back to the minimal cell
            entry.installed_at = self.sim.now
            self.overlay[slot] = entry
            self.sim.tx_index[slot].add(self.id)
        else:
            self.schedule.add(entry)
        self.auto_tx[nb] = slot

    def release_auto_tx(self, nb: Optional[int]) -> None:
        if nb is None or nb not in self.auto_tx or nb == self.parent:
            return
        if self.pending is not None and self.pending.parent == nb:
            return
        if any(self.next_hop(p) == nb for p in self.queue.packets if not p.is_data):
            return
        slot = self.auto_tx.pop(nb)
        ov = self.overlay.get(slot)
        if ov is not None and ov.neighbor == nb:
            del self.overlay[slot]
            base = self.schedule.get(slot)
            if base is None or not base.can_send:
                self.sim.tx_index[slot].discard(self.id)
        else:
            self.schedule.remove(slot)

    def remove_packet(self, pkt: Packet) -> None:
        self.queue.remove(pkt)
        if not self.queue:
            self.sim.busy.discard(self.id)

    def pick(self, e: ScheduleEntry) -> Optional[Packet]:
        kind = e.kind
        if kind is CellKind.NEGOTIATED:
            nb = e.neighbor
            for p in self.queue.packets:
                if p.dst != BROADCAST and (p.dst if p.dst is not None else self.parent) == nb:
                    return p
        elif kind is CellKind.AUTONOMOUS_TX:
            nb = e.neighbor
            for p in self.queue.packets:
                if p.kind is PacketKind.DATA or p.dst == BROADCAST:
                    continue
                if (p.dst if p.dst is not None else self.parent) == nb:
                    return p
        elif kind is CellKind.TEMPORARY_DIO:
            for p in self.queue.packets:
                if p.reserve and p.origin == self.id and p.dst == e.neighbor:
                    return p
        elif kind is CellKind.MINIMAL:
            for p in self.queue.packets:
                if p.kind is PacketKind.EB:
                    return p  # beacons go first in the minimal cell
            for p in self.queue.packets:
                if p.dst == BROADCAST:
                    return p
                if p.kind is PacketKind.DATA:
                    continue
                nh = p.dst if p.dst is not None else self.parent
                if nh is not None and nh not in self.auto_tx:
                    return p
        return None

    # ------------------------------------------------------------ payload injection at dequeue
    def prepare(self, pkt: Packet, slot: int) -> None:
        sim = self.sim
        cfg = sim.cfg
        if not cfg.pb:
            return
        if pkt.kind is PacketKind.DIO:
            count = (cfg.proposed_slots_per_dio if sim.now < sim.initial_phase_end
                     else cfg.proposed_slots_after_initial)
            expires = sim.now + cfg.dio_cells_duration_slotframes * cfg.slotframe_length
            proposed = pbmod.dio_temporary_slots(self.schedule, self.rng_pb, count, self.auto_ch,
                                                 sim.now, expires)
            payload = pbmod.build_dio_payload(self.schedule, slot, proposed, cfg.dio_ext_budget)
            if cfg.dio_size_msf + len(payload.wire()) > cfg.dio_size_pb:
                raise InvariantViolation(sim.asn, f"node {self.id} DIO exceeds its byte budget")
            pkt.payload = DioInfo(self.rank, payload)
        elif pkt.kind is PacketKind.DAO and pkt.reserve:
            info: DaoInfo = pkt.payload
            if pkt.origin == self.id:
                pend = self.pending
                nb = pend.nb if pend is not None else cfg.min_nb
                adv = self.neighbor(pkt.dst).advertised_free_slots or []
                common = set(free_slots(self.schedule)).intersection(adv)
                selected = pbmod.select_nearest_slots(common, slot, min(nb, cfg.max_nb),
                                                      cfg.slotframe_length)
                requested = nb
            else:
                selected = []
                requested = info.pb.requested_count if info.pb else cfg.min_nb
            payload = pbmod.build_dao_payload(self.schedule, slot, requested, selected,
                                              cfg.dao_ext_budget)
            if cfg.dao_size_msf + len(payload.wire()) > cfg.dao_size_pb:
                raise InvariantViolation(sim.asn, f"node {self.id} DAO exceeds its byte budget")
            info.pb = payload
            if pkt.origin == self.id:
                info.parent = pkt.dst

    # ------------------------------------------------------------ status changes
    def on_sync(self, src: int) -> None:
        sim = self.sim
        advance_status(self.status, StatusEvent.EB_THRESHOLD_REACHED)
        sim.event("sync", self.id, src)
        sim.pledges.discard(self.id)
        self.sync_start = sim.now
        self.status.last_rx_asn = sim.now
        if self.t_sync is None:
            self.t_sync = sim.now
        self.schedule.add(ScheduleEntry(CellCoord(0, 0), CellOption.SHARED, CellKind.MINIMAL))
        self.schedule.add(ScheduleEntry(CellCoord(self.auto_slot, self.auto_ch), CellOption.RX,
                                        CellKind.AUTONOMOUS_RX))
        self.proxy = src
        self.secured = not sim.cfg.secure_joining
        self.join_step()
        self.arm_watchdog()

    def arm_watchdog(self) -> None:
        self.wd_gen += 1
        self.timer(self.sim.cfg_slots_join_timeout, T_WATCHDOG, self.wd_gen)

    def join_step(self) -> None:
        """Next bootstrap message while synchronized but without a parent."""
        sim = self.sim
        if self.state is not NodeState.SYNCHRONIZED:
            return
        target = self.bootstrap_neighbor()
        if target is None:
            return
        if not self.secured:
            if not self.has_queued(PacketKind.JOIN_REQUEST, target):
                self.send(Packet(PacketKind.JOIN_REQUEST, self.id, target, created_asn=sim.now,
                                 size=sim.cfg.sixp_size))
        elif self.parent is None and self.pending is None:
            if not self.has_queued(PacketKind.DIS, target):
                self.send(Packet(PacketKind.DIS, self.id, target, created_asn=sim.now,
                                 size=sim.cfg.dis_size))

    def bootstrap_neighbor(self) -> Optional[int]:
        nodes = self.sim.nodes
        if self.proxy is not None and nodes[self.proxy].joined:
            return self.proxy
        best = None
        for n in self.neighbors.values():
            if nodes[n.id].joined and n.link_quality >= self.sim.cfg.min_parent_quality:
                key = (nodes[n.id].rank, n.id)
                if best is None or key < best[0]:
                    best = (key, n.id)
        if best is not None:
            self.proxy = best[1]
        return self.proxy if self.proxy is not None and nodes[self.proxy].joined else None

    def on_joined(self) -> None:
        sim = self.sim
        cfg = sim.cfg
        advance_status(self.status, StatusEvent.JOIN_COMPLETED)
        sim.event("joined", self.id, self.parent)
        if self.t_join is None:
            self.t_join = sim.now
        self.jepoch += 1
        self.start_trickle()
        self.timer(self.next_eb_asn() - sim.now, T_EB, self.jepoch)
        self.timer(sim.slots_dao, T_DAO, self.jepoch)
        if not self.app_started:
            self.app_started = True
            self.timer(self.rng_app.randrange(sim.slots_app), T_APP, 0)

    def next_eb_asn(self) -> int:
        """First slotframe start strictly after now on this node's EB grid."""
        cfg = self.sim.cfg
        L, P = cfg.slotframe_length, cfg.eb_period_slotframes
        sf = self.sim.now // L + 1
        sf += (self.eb_phase - sf) % P
        return sf * L

    def start_trickle(self) -> None:
        self.trickle_gen += 1
        self.trickle.start_timer(self.sim.now, self.rng_timer)
        self.arm_trickle()

    def arm_trickle(self) -> None:
        tok = self.trickle_gen
        self.sim.schedule_timer(self.trickle.fire_at, self.id, T_TRICKLE_FIRE, tok)
        self.sim.schedule_timer(self.trickle.end_at, self.id, T_TRICKLE_END, tok)

    def reset_trickle(self) -> None:
        if self.joined and self.trickle.reset(self.sim.now, self.rng_timer):
            self.trickle_gen += 1
            self.arm_trickle()

    def set_parent(self, new: Optional[int]) -> None:
        nodes = self.sim.nodes
        old = self.parent
        if old is not None:
            nodes[old].children.discard(self.id)
        self.parent = new
        if new is not None:
            nodes[new].children.add(self.id)
            self.rank = compute_rank_of0(nodes[new].rank, step=self.sim.cfg.rank_step)
            self.last_parent_contact = self.sim.now
            self.ensure_auto_tx(new)
        else:
            self.rank = INFINITE_RANK
        self.release_auto_tx(old)

    def drop_cells_to(self, nb: int) -> List[CellCoord]:
        cells = []
        for e in self.tx_cells_to(nb):
            cells.append(e.coord)
            self.schedule.remove(e.slot)
        return cells

    def abort_txn(self, nb: int) -> None:
        txn = self.txns.pop(nb, None)
        if txn is not None and txn.live:
            release_locks(self.schedule, txn)
            txn.state = TxnState.FAILED
        if txn is not None:
            self.purge_request(txn)

    def purge_request(self, txn: SixPTransaction) -> None:
        # a dead transaction's request must not linger in the queue
        for p in [p for p in self.queue.packets if p.kind is PacketKind.SIXP_REQUEST
                  and p.payload.txn is txn]:
            self.remove_packet(p)

    def lose_parent(self, reason: str) -> None:
        """Parent link declared dead; the whole subtree detaches with us."""
        sim = self.sim
        old = self.parent
        if self.joined:
            advance_status(self.status, StatusEvent.PARENT_LINK_LOST)
            self.jepoch += 1
        sim.event("detach", self.id, reason)
        sim.counters["detach_" + reason] += 1
        if old is not None:
            self.drop_cells_to(old)
            self.abort_txn(old)
        self.pending = None
        self.clear_temporary_tx()
        self.set_parent(None)
        for c in sorted(self.children):
            sim.nodes[c].lose_parent("cascade")
        self.arm_watchdog()

    def desync(self) -> None:
        sim = self.sim
        if self.joined or self.parent is not None:
            self.lose_parent("desync")
        advance_status(self.status, StatusEvent.DY_SYNC_EXPIRED)
        sim.event("desync", self.id, None)
        for p in self.queue.clear():
            if p.is_data:
                self.drop_noroute += 1
                sim.dropped(p, "noroute")
        sim.busy.discard(self.id)
        for txn in list(self.txns.values()):
            if txn.live:
                txn.state = TxnState.FAILED
        self.txns.clear()
        self.overlay.clear()
        for slot in list(self.schedule.entries):
            self.schedule.remove(slot)
        self.auto_tx.clear()
        self.synced_slots += sim.now - self.sync_start
        self.sync_start = None
        self.epoch += 1
        self.wd_gen += 1
        self.secured = False
        self.eb_count = 0
        self.proxy = None
        self.pending = None
        sim.pledges.add(self.id)

    # ------------------------------------------------------------ 6P
    def start_add(self, nb: int, n: int, purpose: str) -> bool:
        sim = self.sim
        cfg = sim.cfg
        cur = self.txns.get(nb)
        if cur is not None and cur.live:
            return False
        kind = TxnKind.THREE_STEP if cfg.sixp_three_step else TxnKind.TWO_STEP
        try:
            txn = initiate_add(self.schedule, self.id, nb, n, kind, k=cfg.sixp_k, rng=self.rng_sixp,
                               asn=sim.now, lock_slots=cfg.lock_slotframes * cfg.slotframe_length,
                               nb_channels=cfg.nb_channels)
        except InsufficientCells:
            sim.counters["sixp_insufficient"] += 1
            self.arm_retry()
            return False
        txn.purpose = purpose
        # the timeout only starts once the request is on the air
        extend_locks(self.schedule, txn, NOT_SENT)
        self.txns[nb] = txn
        sim.counters["sixp_add_" + purpose] += 1
        sim.event("6p", self.id, (nb, "Add", purpose, txn.state.value))
        if not self.send(Packet(PacketKind.SIXP_REQUEST, self.id, nb, created_asn=sim.now,
                                size=cfg.sixp_size, payload=SixPMessage(txn, list(txn.proposed_cells)))):
            release_locks(self.schedule, txn)
            txn.state = TxnState.FAILED
            self.arm_retry()
            return False
        return True

    def start_delete(self, nb: int, cells: List[CellCoord]) -> None:
        sim = self.sim
        if not cells:
            return
        self.abort_txn(nb)
        txn = SixPTransaction(self.id, nb, TxnKind.TWO_STEP, Command.DELETE, len(cells),
                              lock_deadline=NOT_SENT,
                              started_asn=sim.now, purpose="delete")
        self.txns[nb] = txn
        sim.counters["sixp_delete"] += 1
        self.send(Packet(PacketKind.SIXP_REQUEST, self.id, nb, created_asn=sim.now,
                         size=sim.cfg.sixp_size, payload=SixPMessage(txn, list(cells))))

    def arm_retry(self, lo: Optional[int] = None, hi: Optional[int] = None) -> None:
        if self.retry_armed:
            return
        cfg = self.sim.cfg
        lo = cfg.sixp_retry_min_slotframes if lo is None else lo
        hi = cfg.sixp_retry_max_slotframes if hi is None else hi
        self.retry_armed = True
        self.timer(self.rng_sixp.randint(lo, hi) * cfg.slotframe_length, T_SIXP_RETRY, self.epoch)

    def needs_cells(self) -> bool:
        return (self.parent is not None and self.state is not NodeState.PLEDGE
                and not self.tx_cells_to(self.parent))

    def cell_purpose(self) -> str:
        if self.sim.cfg.pb:
            return "fallback" if not self.joined else "recover"
        return "switch" if self.joined else "join"

    def on_sixp_request(self, pkt: Packet, src: int) -> None:
        sim = self.sim
        cfg = sim.cfg
        msg: SixPMessage = pkt.payload
        txn = msg.txn
        if txn.command is Command.DELETE:
            for c in msg.cells:
                e = self.schedule.get(c.slot_offset)
                if e is not None and e.kind is CellKind.NEGOTIATED and e.neighbor == src:
                    self.schedule.remove(c.slot_offset)
            cells: List[CellCoord] = []
        elif not self.joined:
            cells = []
        elif txn.kind is TxnKind.THREE_STEP:
            try:
                cells = respond_add(self.schedule, txn, self.rng_sixp, sim.now, k=cfg.sixp_k,
                                    nb_channels=cfg.nb_channels,
                                    lock_slots=cfg.lock_slotframes * cfg.slotframe_length)
            except InsufficientCells:
                cells = []
        else:
            before = set(free_slots(self.schedule))
            cells = respond_add(self.schedule, txn, self.rng_sixp, sim.now)
            sim.check_grant(self, [c.slot_offset for c in cells], before)
        self.send(Packet(PacketKind.SIXP_RESPONSE, self.id, src, created_asn=sim.now,
                         size=cfg.sixp_size, payload=SixPMessage(txn, cells)))

    def on_sixp_response(self, pkt: Packet, src: int) -> None:
        sim = self.sim
        msg: SixPMessage = pkt.payload
        txn = msg.txn
        mine = self.txns.get(src)
        if mine is not txn or not txn.live:
            if txn.command is Command.ADD and msg.cells and txn.kind is TxnKind.TWO_STEP:
                sim.counters["sixp_late_response"] += 1
                self.start_delete(src, list(msg.cells))
            return
        if txn.command is Command.DELETE:
            txn.state = TxnState.DONE
            del self.txns[src]
            return
        if txn.kind is TxnKind.THREE_STEP:
            granted = confirm_three_step(self.schedule, txn, msg.cells, self.rng_sixp, sim.now)
            self.send(Packet(PacketKind.SIXP_CONFIRM, self.id, src, created_asn=sim.now,
                             size=sim.cfg.sixp_size, payload=SixPMessage(txn, list(granted))))
        else:
            granted = complete_add(self.schedule, txn, msg.cells, sim.now)
        sim.event("6p", self.id, (src, "Add", txn.purpose, "Done"))
        del self.txns[src]
        if not granted:
            sim.counters["sixp_empty_grant"] += 1
            if src == self.parent and self.needs_cells():
                self.arm_retry()
            return
        if src == self.parent and self.state is NodeState.SYNCHRONIZED:
            self.on_joined()

    def on_sixp_confirm(self, pkt: Packet, src: int) -> None:
        msg: SixPMessage = pkt.payload
        finish_three_step(self.schedule, msg.txn, msg.cells, self.sim.now)

    def check_timeouts(self) -> None:
        now = self.sim.now
        expire_locks(self.schedule, now)
        for nb, txn in list(self.txns.items()):
            if txn.state is TxnState.TIMED_OUT or (txn.live and txn.lock_deadline < now):
                release_locks(self.schedule, txn)
                txn.state = TxnState.TIMED_OUT
                self.purge_request(txn)
                self.sim.counters["sixp_timeout"] += 1
                self.sim.event("6p", self.id, (nb, txn.command.value, txn.purpose, "TimedOut"))
                del self.txns[nb]
                if nb == self.parent and self.needs_cells():
                    self.arm_retry()

    # ------------------------------------------------------------ cross-layer reservation
    def clear_temporary_tx(self) -> None:
        for e in [e for e in self.schedule if e.kind is CellKind.TEMPORARY_DIO
                  and e.option is CellOption.TX]:
            self.schedule.remove(e.slot)

    def begin_reserve(self, parent: int, nb: int, joining: bool) -> None:
        sim = self.sim
        self.pending = PendingReserve(parent, nb, joining, sim.now)
        sim.counters["pb_reserve_" + ("join" if joining else "switch")] += 1
        info = self.neighbor(parent)
        if info.advertised_proposed_slots and info.proposal_expiry > sim.now:
            own = set(free_slots(self.schedule))
            usable = [s for s in info.advertised_proposed_slots if s in own]
            ch = sim.nodes[parent].auto_ch
            for s in pbmod.slots_to_contend(usable, self.rng_pb, sim.cfg.slot_selection_ratio):
                self.schedule.add(ScheduleEntry(CellCoord(s, ch), CellOption.TX, CellKind.TEMPORARY_DIO,
                                                neighbor=parent, expires_at=info.proposal_expiry))
        self.ensure_auto_tx(parent)
        ok = self.send(Packet(PacketKind.DAO, self.id, parent, created_asn=sim.now,
                              size=sim.cfg.dao_size_pb, payload=DaoInfo(parent), reserve=True))
        if not ok:
            self.pending = None
            self.clear_temporary_tx()

    def reserve_done(self, pkt: Packet, dst: int, granted: Optional[List[int]]) -> None:
        sim = self.sim
        pend = self.pending
        if pkt.origin != self.id:
            if granted:
                pbmod.apply_grant(self.schedule, dst, granted, sim.nodes[dst].auto_ch, sim.now)
            return
        if pend is None or pend.parent != dst:
            return
        self.pending = None
        self.clear_temporary_tx()
        ch = sim.nodes[dst].auto_ch
        if granted is None:
            self.release_auto_tx(dst)
            return
        if not granted:
            sim.counters["pb_zero_grant"] += 1
            if pend.joining and sim.nodes[dst].joined:
                self.set_parent(dst)
                self.arm_retry(sim.cfg.fallback_min_slotframes, sim.cfg.fallback_max_slotframes)
            else:
                self.release_auto_tx(dst)
            return
        if pend.joining:
            if not sim.nodes[dst].joined or self.state is not NodeState.SYNCHRONIZED:
                return
            self.set_parent(dst)
            pbmod.apply_grant(self.schedule, dst, granted, ch, sim.now)
            self.on_joined()
            return
        if not self.joined or self.parent is None:
            return
        old = self.parent
        old_cells = self.drop_cells_to(old)
        self.abort_txn(old)
        self.set_parent(dst)
        pbmod.apply_grant(self.schedule, dst, granted, ch, sim.now)
        sim.counters["switch"] += 1
        sim.event("switch", self.id, (old, dst))
        self.start_delete(old, old_cells)
        self.reset_trickle()

    # ------------------------------------------------------------ parent selection
    def candidates(self, below: int) -> List[NeighborEntry]:
        nodes = self.sim.nodes
        q = self.sim.cfg.min_parent_quality
        out = []
        for n in self.neighbors.values():
            other = nodes[n.id]
            # only neighbors whose DIO was heard; their current rank stands in
            # for the advertised one so stale ranks cannot create loops
            if not n.heard_dio or not other.joined or n.link_quality < q:
                continue
            if other.rank >= below:
                continue
            n.rank = other.rank
            out.append(n)
        return out

    def best_candidate(self, below: int) -> Optional[int]:
        best = None
        for n in self.candidates(below):
            key = (n.rank, -n.link_quality, n.id)
            if best is None or key < best[0]:
                best = (key, n.id)
        return best[1] if best else None

    def evaluate_parents(self) -> None:
        sim = self.sim
        if not self.secured or self.state is NodeState.PLEDGE:
            return
        if self.pending is not None:
            if sim.now - self.pending.started < sim.cfg_slots_join_timeout:
                return
            self.pending = None
            self.clear_temporary_tx()
        if sim.cfg.pb:
            self.evaluate_pb()
        else:
            self.evaluate_msf()

    def evaluate_msf(self) -> None:
        sim = self.sim
        if self.state is NodeState.SYNCHRONIZED:
            if self.parent is not None:
                return
            cand = self.best_candidate(INFINITE_RANK)
            if cand is None:
                return
            self.set_parent(cand)
            sim.event("parent", self.id, cand)
            self.start_add(cand, 1, "join")
            self.send_dao()
            return
        if self.parent is None:
            return
        cur_rank = sim.nodes[self.parent].rank
        cand = self.best_candidate(min(cur_rank, self.rank))
        if cand is None or cand == self.parent:
            return
        old = self.parent
        n_old = len(self.tx_cells_to(old))
        old_cells = self.drop_cells_to(old)
        self.abort_txn(old)
        self.set_parent(cand)
        sim.counters["switch"] += 1
        sim.event("switch", self.id, (old, cand))
        self.start_delete(old, old_cells)
        self.start_add(cand, max(1, n_old), "switch")
        self.send_dao()
        self.reset_trickle()

    def evaluate_pb(self) -> None:
        sim = self.sim
        cfg = sim.cfg
        joining = self.state is NodeState.SYNCHRONIZED
        if joining and self.parent is not None:
            return  # fallback path already running
        if not joining and self.parent is None:
            return
        below = INFINITE_RANK if joining else min(sim.nodes[self.parent].rank, self.rank)
        cands = [pbmod.Candidate(n.id, n.rank, n.advertised_free_slots)
                 for n in self.candidates(below) if n.advertised_free_slots is not None]
        if not cands:
            return
        d = pbmod.algorithm1_on_dio(
            free_slots(self.schedule), cands,
            current_parent=None if joining else self.parent,
            current_parent_rank=None if joining else sim.nodes[self.parent].rank,
            cells_to_old_parent=0 if joining else len(self.tx_cells_to(self.parent)),
            current_slot=sim.asn % cfg.slotframe_length, slotframe_len=cfg.slotframe_length,
            min_nb=cfg.min_nb, max_nb=cfg.max_nb)
        if not d.switch:
            return
        sim.event("algo1", self.id, (d.parent, d.nb, tuple(d.selected)))
        self.begin_reserve(d.parent, d.nb, joining)

    def send_dao(self) -> None:
        sim = self.sim
        if self.parent is None:
            return
        size = sim.cfg.dao_size_pb if sim.cfg.pb else sim.cfg.dao_size_msf
        self.send(Packet(PacketKind.DAO, self.id, None, created_asn=sim.now, size=size,
                         payload=DaoInfo(self.parent)))

    # ------------------------------------------------------------ reception
    def on_receive(self, pkt: Packet, src: int, t: Tx) -> None:
        sim = self.sim
        self.status.last_rx_asn = sim.now
        if src == self.parent:
            self.last_parent_contact = sim.now
        kind = pkt.kind
        nbr = self.neighbor(src)
        nbr.last_heard = sim.now
        if kind is PacketKind.DATA:
            self.on_data(pkt)
        elif kind is PacketKind.DIO:
            self.on_dio(pkt, src, nbr)
        elif kind is PacketKind.EB:
            if nbr.rank == INFINITE_RANK:
                nbr.rank = pkt.payload
        elif kind is PacketKind.DAO:
            self.on_dao(pkt, src, t)
        elif kind is PacketKind.DAO_ACK:
            self.on_dao_ack(pkt)
        elif kind is PacketKind.DIS:
            self.on_dis(pkt, src)
        elif kind is PacketKind.JOIN_REQUEST:
            if self.joined:
                self.send(Packet(PacketKind.JOIN_RESPONSE, self.id, src, created_asn=sim.now,
                                 size=sim.cfg.sixp_size))
        elif kind is PacketKind.JOIN_RESPONSE:
            if self.state is NodeState.SYNCHRONIZED and not self.secured:
                self.secured = True
                sim.event("secured", self.id, src)
                self.evaluate_parents()  # DIOs heard before securing already qualify a parent
                self.join_step()
        elif kind is PacketKind.SIXP_REQUEST:
            self.on_sixp_request(pkt, src)
        elif kind is PacketKind.SIXP_RESPONSE:
            self.on_sixp_response(pkt, src)
        elif kind is PacketKind.SIXP_CONFIRM:
            self.on_sixp_confirm(pkt, src)

    def on_data(self, pkt: Packet) -> None:
        sim = self.sim
        if self.id == ROOT:
            sim.delivered(pkt)
            return
        if self.parent is None or not self.joined:
            self.drop_noroute += 1
            sim.dropped(pkt, "noroute")
            return
        pkt.retries = 0
        pkt.hops += 1
        self.send(pkt)

    def on_dio(self, pkt: Packet, src: int, nbr: NeighborEntry) -> None:
        sim = self.sim
        info: DioInfo = pkt.payload
        nbr.rank = info.rank
        nbr.heard_dio = True
        if info.pb is not None:
            nbr.advertised_free_slots = info.pb.free_slots
            nbr.advertised_proposed_slots = info.pb.proposed_slots
            nbr.proposal_expiry = sim.now + sim.cfg.dio_cells_duration_slotframes * sim.cfg.slotframe_length
        if self.joined and pkt.dst == BROADCAST and info.rank >= self.rank:
            self.trickle.hear_consistent()
        self.evaluate_parents()

    def on_dis(self, pkt: Packet, src: int) -> None:
        if not self.joined:
            return
        if pkt.dst == BROADCAST:
            self.reset_trickle()
            return
        if not self.has_queued(PacketKind.DIO, src):
            self.send(self.make_dio(src))

    def make_dio(self, dst: int) -> Packet:
        cfg = self.sim.cfg
        return Packet(PacketKind.DIO, self.id, dst, created_asn=self.sim.now,
                      size=cfg.dio_size_pb if cfg.pb else cfg.dio_size_msf,
                      payload=DioInfo(self.rank))

    def on_dao(self, pkt: Packet, src: int, t: Tx) -> None:
        sim = self.sim
        cfg = sim.cfg
        if not self.joined:
            return
        info: DaoInfo = pkt.payload
        if pkt.origin == self.id:
            # our own DAO came back: the path it took no longer leads to the root
            sim.counters["dao_loop"] += 1
            return
        if pkt.reserve and info.pb is not None:
            slot = sim.asn % cfg.slotframe_length
            selected = info.pb.selected_slots
            if not selected:
                selected = pbmod.pick_for_forwarded_dao(free_slots(self.schedule), info.pb.child_free_slots,
                                                        slot, info.pb.requested_count,
                                                        cfg.slotframe_length, cfg.max_nb)
            before = set(free_slots(self.schedule))
            granted = pbmod.parent_on_dao(self.schedule, src, selected, self.auto_ch, sim.now)
            sim.check_grant(self, granted, before)
            t.grant = granted
            sim.counters["pb_granted_cells"] += len(granted)
            if len(granted) < len(selected):
                sim.counters["pb_partial_grant"] += 1
        if self.id == ROOT:
            if info.parent is not None:
                sim.dao_table[pkt.origin] = info.parent
            route = route_down(sim.dao_table, pkt.origin, ROOT)
            if route:
                self.send(Packet(PacketKind.DAO_ACK, self.id, route[0], created_asn=sim.now,
                                 size=cfg.dao_size_msf, route=route[1:]))
            return
        if self.parent is None:
            self.drop_noroute += 1
            sim.dropped(pkt, "noroute")
            return
        pkt.dst = None
        pkt.retries = 0
        pkt.hops += 1
        self.send(pkt)

    def on_dao_ack(self, pkt: Packet) -> None:
        if pkt.route:
            nxt = pkt.route.pop(0)
            pkt.dst = nxt
            pkt.retries = 0
            self.send(pkt)
        else:
            self.sim.counters["dao_ack_delivered"] += 1

    # ------------------------------------------------------------ transmission outcomes
    def on_tx_done(self, t: Tx, asn: int) -> None:
        sim = self.sim
        pkt = t.pkt
        e = t.entry
        if pkt.dst == BROADCAST:
            self.remove_packet(pkt)
            return
        dst = t.nh
        nbr = self.neighbor(dst)
        if e.kind not in SHARED_KINDS:
            nbr.record(t.delivered)  # shared-cell losses are mostly collisions, not the link
        if t.delivered:
            if e.kind in SHARED_KINDS:
                self.backoff.success()
            if dst == self.parent:
                self.last_parent_contact = sim.now
            self.status.last_rx_asn = sim.now
            if t.grant is not None:
                LinkAck(dst, self.id, pkt.uid, list(t.grant))
            self.remove_packet(pkt)
            if pkt.kind is PacketKind.SIXP_REQUEST and pkt.payload.txn.live:
                # the transaction timeout runs from the moment the request is out
                extend_locks(self.schedule, pkt.payload.txn,
                             sim.now + sim.cfg.lock_slotframes * sim.cfg.slotframe_length)
            if pkt.kind is PacketKind.DAO and pkt.reserve:
                self.reserve_done(pkt, dst, t.grant if t.grant is not None else None)
            self.release_auto_tx(dst)
            return
        if e.kind in SHARED_KINDS:
            self.backoff.failure()
        pkt.retries += 1
        if pkt.retries >= sim.cfg.retry_limit:
            self.remove_packet(pkt)
            self.drop_retry += 1
            sim.dropped(pkt, "retry")
            if pkt.kind is PacketKind.SIXP_REQUEST and self.txns.get(dst) is pkt.payload.txn:
                self.abort_txn(dst)
                if dst == self.parent and self.needs_cells():
                    self.arm_retry()
            if pkt.kind is PacketKind.DAO and pkt.reserve:
                self.reserve_done(pkt, dst, None)
            self.release_auto_tx(dst)
        if (dst == self.parent and self.parent is not None
                and sim.now - self.last_parent_contact > sim.slots_dis_join):
            self.lose_parent("link")

    # ------------------------------------------------------------ timers
    def fire(self, kind: int, token: int) -> None:
        sim = self.sim
        cfg = sim.cfg
        if kind == T_APP:
            self.timer(sim.slots_app, T_APP, 0)
            if self.joined and self.id != ROOT:
                pkt = Packet(PacketKind.DATA, self.id, None, created_asn=sim.now,
                             size=cfg.max_payload_pb if cfg.pb else cfg.max_payload_msf,
                             payload=self.data_seq)
                self.data_seq += 1
                sim.generated[self.id] += 1
                self.send(pkt)
            return
        if kind == T_WATCHDOG:
            if token == self.wd_gen and self.state is NodeState.SYNCHRONIZED:
                self.join_step()
                self.arm_watchdog()
            return
        if kind == T_SIXP_RETRY:
            self.retry_armed = False
            if token == self.epoch and self.needs_cells() and sim.nodes[self.parent].joined:
                self.start_add(self.parent, 1, self.cell_purpose())
            return
        if kind in (T_TRICKLE_FIRE, T_TRICKLE_END):
            if token != self.trickle_gen or not self.joined:
                return
            if kind == T_TRICKLE_FIRE:
                if self.trickle.should_transmit() and not self.has_queued(PacketKind.DIO, BROADCAST):
                    self.send(self.make_dio(BROADCAST))
            else:
                self.trickle.expire(sim.now, self.rng_timer)
                self.arm_trickle()
            return
        if token != self.jepoch or not self.joined:
            return
        if kind == T_EB:
            self.timer(self.next_eb_asn() - sim.now, T_EB, self.jepoch)
            if not self.has_queued(PacketKind.EB, BROADCAST):
                self.send(Packet(PacketKind.EB, self.id, BROADCAST, created_asn=sim.now,
                                 size=cfg.eb_size, payload=self.rank))
        elif kind == T_DAO:
            self.timer(sim.slots_dao, T_DAO, self.jepoch)
            if self.id != ROOT:
                self.send_dao()

    def slotframe_tick(self) -> None:
        sim = self.sim
        cfg = sim.cfg
        if self.state is NodeState.PLEDGE:
            return
        if self.id != ROOT and sim.now - self.status.last_rx_asn > sim.slots_dy_sync:
            self.desync()
            return
        self.check_timeouts()
        pbmod.expire_temporary(self.schedule, sim.now)
        if self.pending is not None and sim.now - self.pending.started > sim.cfg_slots_join_timeout:
            if not any(p.reserve and p.origin == self.id for p in self.queue.packets):
                self.pending = None
                self.clear_temporary_tx()
        # housekeeping: drop Rx cells the peer has not matched for a while
        nodes = sim.nodes
        grace = (cfg.lock_slotframes + 1) * cfg.slotframe_length
        seen = set()
        for e in [e for e in self.schedule.entries.values()
                  if e.kind is CellKind.NEGOTIATED and e.option is CellOption.RX]:
            peer = nodes[e.neighbor].schedule.get(e.slot)
            if peer is not None and peer.neighbor == self.id and peer.kind is CellKind.NEGOTIATED:
                continue
            seen.add(e.slot)
            since = self.stale_since.setdefault(e.slot, sim.now)
            if sim.now - since > grace:
                self.schedule.remove(e.slot)
                sim.counters["stale_rx_removed"] += 1
        for slot in [s for s in self.stale_since if s not in seen]:
            del self.stale_since[slot]
        if self.joined and self.parent is not None:
            cells = self.tx_cells_to(self.parent)
            self.msf.elapsed += len(cells)
            cmd = msf_adapt(self.msf, len(cells), window=cfg.msf_window, hi=cfg.msf_hi, lo=cfg.msf_lo)
            if cmd is Command.ADD:
                self.start_add(self.parent, 1, "adapt")
            elif cmd is Command.DELETE:
                cur = self.txns.get(self.parent)
                if cur is None or not cur.live:
                    victim = max(cells, key=lambda c: c.slot)
                    self.schedule.remove(victim.slot)
                    self.start_delete(self.parent, [victim.coord])
            elif not cells and self.needs_cells():
                self.arm_retry()


@dataclass
class RunResult:
    config: ScenarioConfig
    topology_digest: str
    node_rows: List[dict]
    packet_rows: List[dict]
    counters: Dict[str, int]
    trace: List[tuple]
    generated: Dict[int, int]
    delivered: Dict[int, int]
    total_slots: int

    @property
    def delivered_total(self) -> int:
        return sum(self.delivered.values())


def topology_for(cfg: ScenarioConfig) -> Topology:
    """The topology a run of ``cfg`` uses when none is supplied."""
    return generate_topology(cfg.n_nodes, cfg.area_m, cfg.rng_seed,
                             min_neighbors=cfg.min_neighbors, max_depth=cfg.max_depth)


class Simulation:
    def __init__(self, cfg: ScenarioConfig, topology: Optional[Topology] = None, *,
                 trace: bool = False, check_every: int = 1):
        self.cfg = validate(cfg)
        self.topo = topology or topology_for(cfg)
        if self.topo.n_nodes != cfg.n_nodes:
            raise ValueError("topology size does not match n_nodes")
        L = cfg.slotframe_length
        self.tx_index = [set() for _ in range(L)]
        self.rx_index = [set() for _ in range(L)]
        self.asn = 0
        self.now = 0
        self.heap: List[Tuple[int, int, int, int, int]] = []
        self._seq = 0
        self.busy: set = set()
        self.pledges: set = set()
        self.counters: Counter = Counter()
        self.tracing = trace
        self.trace: List[tuple] = []
        self.check_every = check_every
        self.generated = Counter()
        self.delivered_count = Counter()
        self.drops_by_origin: Dict[int, Counter] = {}
        self.latencies: Dict[int, List[Tuple[int, int]]] = {}
        self.dao_table: Dict[int, int] = {}
        self.slots_app = cfg.slots(cfg.app_period_seconds)
        self.slots_dao = cfg.slots(cfg.dao_period_s)
        self.slots_dy_sync = cfg.slots(cfg.dy_sync_s)
        self.slots_dis_join = cfg.slots(cfg.dis_join_s)
        self.cfg_slots_join_timeout = cfg.slots(cfg.join_timeout_s)
        self.initial_phase_end = cfg.slots(cfg.initial_phase_minutes * 60)
        self.nodes = [Node(self, i) for i in range(cfg.n_nodes)]
        self.pledges = set(range(1, cfg.n_nodes))
        root = self.nodes[ROOT]
        root.on_sync(ROOT)
        root.secured = True
        root.proxy = None
        root.rank = cfg.root_rank
        advance_status(root.status, StatusEvent.JOIN_COMPLETED)
        root.t_join = 0
        root.jepoch += 1
        root.start_trickle()
        root.timer(0, T_EB, root.jepoch)
        root.timer(root.sim.slots_dao, T_DAO, root.jepoch)
        self.counters.clear()
        self.trace.clear()

    # ------------------------------------------------------------ bookkeeping
    def schedule_timer(self, asn: int, node: int, kind: int, token: int) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (asn, self._seq, node, kind, token))

    def event(self, what: str, node: int, detail) -> None:
        if self.tracing:
            self.trace.append((self.now, what, node, detail))

    def dropped(self, pkt: Packet, reason: str) -> None:
        self.counters[f"drop_{reason}_{'data' if pkt.is_data else 'ctrl'}"] += 1
        self.counters[f"dropkind_{reason}_{pkt.kind.value}"] += 1
        if pkt.is_data:
            self.drops_by_origin.setdefault(pkt.origin, Counter())[reason] += 1

    def delivered(self, pkt: Packet) -> None:
        lat = self.now - pkt.created_asn
        if lat < 1:
            raise InvariantViolation(self.asn, f"packet {pkt.uid} delivered before it was created")
        self.delivered_count[pkt.origin] += 1
        self.latencies.setdefault(pkt.origin, []).append((pkt.payload, lat))

    def check_grant(self, node: Node, granted, free_before) -> None:
        for s in granted:
            if s not in free_before:
                raise InvariantViolation(self.asn, f"node {node.id} granted occupied slot {s}")
        if len(set(granted)) != len(granted):
            raise InvariantViolation(self.asn, f"node {node.id} granted a slot twice")

    # ------------------------------------------------------------ main loop
    def run(self) -> RunResult:
        cfg = self.cfg
        L = cfg.slotframe_length
        total = cfg.total_slots
        nodes = self.nodes
        heap = self.heap
        for asn in range(total):
            self.asn = asn
            self.now = asn
            while heap and heap[0][0] <= asn:
                _, _, nid, kind, token = heapq.heappop(heap)
                nodes[nid].fire(kind, token)
            if asn % L == 0:
                for n in nodes:
                    n.slotframe_tick()
                if (asn // L) % self.check_every == 0:
                    self.check_invariants()
            self.now = asn + 1
            self.execute_slot(asn)
        self.asn = total
        self.now = total
        return self.finish()

    def execute_slot(self, asn: int) -> None:
        cfg = self.cfg
        slot = asn % cfg.slotframe_length
        txi = self.tx_index[slot]
        if not txi:
            return
        busy = self.busy
        cands = sorted(txi & busy) if len(busy) < len(txi) else sorted(n for n in txi if n in busy)
        if not cands:
            return
        nodes = self.nodes
        C = cfg.nb_channels
        txs: List[Tx] = []
        for nid in cands:
            node = nodes[nid]
            if node.status.state is NodeState.PLEDGE:
                raise InvariantViolation(asn, f"pledge {nid} holds a transmit cell")
            e = node.overlay.get(slot)
            pkt = node.pick(e) if e is not None else None
            if pkt is None:
                e = node.schedule.get(slot)
                if e is None:
                    continue
                pkt = node.pick(e)
                if pkt is None:
                    continue
            if e.kind in SHARED_KINDS and node.backoff.counter > 0:
                node.backoff.tick()
                continue
            if e.kind is CellKind.AUTONOMOUS_TX and e is node.overlay.get(slot):
                base = node.schedule.get(slot)
                if base is not None and base.can_listen:
                    base.used += 1  # radio busy transmitting, so no idle listen on the shared cell
            node.prepare(pkt, slot)
            nh = BROADCAST if pkt.dst == BROADCAST else node.next_hop(pkt)
            txs.append(Tx(node, e, pkt, (asn + e.coord.channel_offset) % C, nh))
        if not txs:
            return
        pdr = self.topo.pdr
        sending = {t.node.id for t in txs}
        by_ch: Dict[int, List[Tx]] = {}
        for t in txs:
            by_ch.setdefault(t.ch, []).append(t)
        rxi = self.rx_index[slot]
        seed = cfg.rng_seed
        deliveries: List[Tuple[int, Tx]] = []
        for t in txs:
            s = t.node.id
            if t.nh == BROADCAST:
                targets = [r for r in self.topo.audible[s] if r in rxi and r not in sending]
            elif t.nh in rxi and t.nh not in sending:
                targets = [t.nh]
            else:
                targets = []
            same = by_ch[t.ch]
            for r in targets:
                rn = nodes[r]
                re = rn.schedule.entries[slot]
                if (asn + re.coord.channel_offset) % C != t.ch:
                    continue
                if len(same) > 1 and sum(1 for o in same if pdr[o.node.id][r] > 0.0) > 1:
                    continue
                p = pdr[s][r]
                if p < 1.0 and link_uniform(seed, asn, s, r) >= p:
                    continue
                deliveries.append((r, t))
        if slot == 0 and self.pledges:
            self.pledge_listen(asn, txs)
        deliveries.sort(key=lambda d: d[0])
        if self.tracing:
            for t in txs:
                self.trace.append((asn, "tx", t.node.id, (slot, t.ch, t.pkt.kind.value, t.nh,
                                                          t.node.status.state.value, t.pkt.uid)))
            for r, t in deliveries:
                self.trace.append((asn, "rx", r, (slot, t.ch, t.pkt.kind.value, t.node.id)))
        for r, t in deliveries:
            rn = nodes[r]
            rn.schedule.entries[slot].used += 1
            if t.nh == BROADCAST:
                rn.ledger.add(EnergyState.RX_DATA)
            else:
                rn.ledger.add(EnergyState.RX_DATA_TX_ACK)
                t.delivered = True
            rn.on_receive(t.pkt, t.node.id, t)
        for t in txs:
            node = t.node
            t.entry.used += 1
            if t.nh == BROADCAST:
                node.ledger.add(EnergyState.TX_DATA)
            else:
                node.ledger.add(EnergyState.TX_DATA_RX_ACK)
                if t.entry.kind is CellKind.NEGOTIATED and t.nh == node.parent:
                    node.msf.used += 1
            if node.status.state is NodeState.PLEDGE:
                continue  # desynchronized while receiving in this very slot
            node.on_tx_done(t, asn)

    def pledge_listen(self, asn: int, txs: List[Tx]) -> None:
        pdr = self.topo.pdr
        heard: Dict[int, List[Tx]] = {}
        for t in txs:
            if t.entry.kind is not CellKind.MINIMAL:
                continue
            s = t.node.id
            for r in self.topo.audible[s]:
                if r in self.pledges:
                    heard.setdefault(r, []).append(t)
        nb = self.cfg.nb_channels
        seed = self.cfg.rng_seed
        scan = self.cfg.pledge_single_channel_scan
        for r in sorted(heard):
            rn = self.nodes[r]
            if scan and int(link_uniform(seed, asn, r, SCAN_KEY) * nb) != hop_channel(asn, 0, nb):
                continue
            ts = heard[r]
            if len(ts) != 1 or ts[0].pkt.kind is not PacketKind.EB:
                continue
            t = ts[0]
            if link_uniform(seed, asn, t.node.id, r) >= pdr[t.node.id][r]:
                continue
            rn.eb_count += 1
            if rn.eb_count >= self.cfg.eb_threshold:
                rn.neighbor(t.node.id).rank = t.pkt.payload
                rn.on_sync(t.node.id)

    # ------------------------------------------------------------ invariants
    def check_invariants(self) -> None:
        nodes = self.nodes
        n = len(nodes)
        for node in nodes:
            if len(node.queue) > node.queue.capacity:
                raise InvariantViolation(self.asn, f"node {node.id} queue over capacity")
            if node.id == ROOT or not node.joined:
                continue
            p = node.parent
            if p is None:
                raise InvariantViolation(self.asn, f"joined node {node.id} without parent")
            if not nodes[p].joined:
                raise InvariantViolation(self.asn, f"node {node.id} parent {p} not joined")
            if nodes[p].rank >= node.rank:
                raise InvariantViolation(self.asn, f"rank not increasing on {node.id}->{p}")
            cur, steps = node.id, 0
            while cur != ROOT:
                cur = nodes[cur].parent
                steps += 1
                if cur is None or steps > n:
                    raise InvariantViolation(self.asn, f"routing loop from {node.id}")
        if self.cfg.pb:
            for k in ("sixp_add_join", "sixp_add_switch"):
                if self.counters[k]:
                    raise InvariantViolation(self.asn, "cross-layer mode issued a plain 6P ADD for join/switch")

    def finish(self) -> RunResult:
        cfg = self.cfg
        end = self.now
        nodes = self.nodes
        for node in nodes:
            if node.state is not NodeState.PLEDGE:
                for e in node.schedule.entries.values():
                    if e.can_listen:
                        node.settle_idle(e, end)
                node.synced_slots += end - node.sync_start
                node.sync_start = end
            sleep = node.synced_slots - node.ledger.total_slots
            if sleep < 0:
                raise InvariantViolation(end, f"node {node.id} radio busy more slots than synchronized")
            node.ledger.add(EnergyState.SLEEP, sleep)
            if node.ledger.settled_nc() != node.ledger.online_nc:
                raise InvariantViolation(end, f"node {node.id} charge bookkeeping mismatch")
            if node.status.illegal_events:
                raise InvariantViolation(end, f"node {node.id} took an illegal status transition")
        in_queue = Counter()
        for node in nodes:
            for p in node.queue.packets:
                if p.is_data:
                    in_queue[p.origin] += 1
        for node in nodes:
            gen = self.generated[node.id]
            dropped = sum(self.drops_by_origin.get(node.id, Counter()).values())
            if gen != self.delivered_count[node.id] + in_queue[node.id] + dropped:
                raise InvariantViolation(end, f"node {node.id} packet accounting does not close")
        res = RunResult(config=cfg, topology_digest=self.topo.digest(),
                        node_rows=node_rows(self), packet_rows=packet_rows(self),
                        counters=dict(sorted(self.counters.items())), trace=self.trace,
                        generated=dict(self.generated), delivered=dict(self.delivered_count),
                        total_slots=end)
        return res


def run(cfg: ScenarioConfig, topology: Optional[Topology] = None, *, trace: bool = False) -> RunResult:
    return Simulation(cfg, topology, trace=trace).run()
