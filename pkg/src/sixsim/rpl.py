"""RPL building blocks: OF0 rank, Trickle timer, neighbor table and route bookkeeping."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

ROOT_RANK = 256
RANK_STEP = 256
INFINITE_RANK = 0xFFFF


def compute_rank_of0(parent_rank: int, link_quality: Optional[float] = None, *,
                     step: int = RANK_STEP, stretch: bool = False) -> int:
    """Rank advertised by a node whose preferred parent has ``parent_rank``.

    With ``stretch`` the step grows as the link gets worse (up to 3x at PDR 0).
    """
    if parent_rank >= INFINITE_RANK:
        raise ValueError("parent rank must be finite")
    inc = step
    if stretch and link_quality is not None:
        inc = int(round(step * (1 + 2 * (1 - max(0.0, min(1.0, link_quality))))))
    return parent_rank + inc


class TrickleState:
    """Trickle timer in slot units.

    ``fire_at`` is the transmission point inside the current interval and
    ``end_at`` the interval end.  The owner calls :meth:`fire` and
    :meth:`expire` when those instants arrive.
    """

    def __init__(self, i_min: int, doublings: int, k: int = 1):
        if i_min <= 0 or doublings < 0 or k < 1:
            raise ValueError("bad trickle parameters")
        self.i_min = i_min
        self.i_max = i_min * 2 ** doublings
        self.redundancy_k = k
        self.interval = i_min
        self.redundancy_counter = 0
        self.start = 0
        self.fire_at = 0
        self.end_at = 0

    def _begin(self, now: int, rng: random.Random) -> None:
        self.start = now
        self.redundancy_counter = 0
        half = self.interval // 2
        self.fire_at = now + half + rng.randrange(self.interval - half)
        self.end_at = now + self.interval

    def start_timer(self, now: int, rng: random.Random) -> None:
        self.interval = self.i_min
        self._begin(now, rng)

    def hear_consistent(self) -> None:
        self.redundancy_counter += 1

    def should_transmit(self) -> bool:
        return self.redundancy_counter < self.redundancy_k

    def expire(self, now: int, rng: random.Random) -> None:
        self.interval = min(self.interval * 2, self.i_max)
        self._begin(now, rng)

    def reset(self, now: int, rng: random.Random) -> bool:
        """Inconsistency: restart at i_min.  Returns False if already there."""
        if self.interval == self.i_min:
            return False
        self.interval = self.i_min
        self._begin(now, rng)
        return True


@dataclass
class NeighborEntry:
    id: int
    rank: int = INFINITE_RANK
    last_heard: int = 0
    link_quality: float = 0.0
    advertised_free_slots: Optional[List[int]] = None
    advertised_proposed_slots: Optional[List[int]] = None
    proposal_expiry: int = 0
    heard_dio: bool = False

    def record(self, success: bool, alpha: float = 0.1) -> None:
        self.link_quality = (1 - alpha) * self.link_quality + alpha * (1.0 if success else 0.0)


def preferred_parent(candidates: Iterable[NeighborEntry], *, min_quality: float = 0.5,
                     below_rank: int = INFINITE_RANK) -> Optional[NeighborEntry]:
    """OF0 choice: lowest rank, then best link, then lowest id."""
    best = None
    for n in candidates:
        if n.rank >= below_rank or n.link_quality < min_quality:
            continue
        key = (n.rank, -n.link_quality, n.id)
        if best is None or key < best[0]:
            best = (key, n)
    return best[1] if best else None


def should_switch(current_parent_rank: int, candidate_rank: int) -> bool:
    return candidate_rank < current_parent_rank


def dao_due(last_dao_asn: Optional[int], asn: int, period_slots: int) -> bool:
    return last_dao_asn is None or asn - last_dao_asn >= period_slots


def path_to_root(parents: Dict[int, Optional[int]], node: int, root: int = 0) -> Optional[List[int]]:
    """Follow parent pointers; None if the walk dead-ends or loops."""
    path = [node]
    seen = {node}
    cur = node
    while cur != root:
        nxt = parents.get(cur)
        if nxt is None or nxt in seen:
            return None
        path.append(nxt)
        seen.add(nxt)
        cur = nxt
    return path


def route_down(child_parent: Dict[int, int], dst: int, root: int = 0) -> Optional[List[int]]:
    """Hops from the root to ``dst`` using the root's child-to-parent table."""
    up = path_to_root(child_parent, dst, root)
    if up is None:
        return None
    return list(reversed(up))[1:]
