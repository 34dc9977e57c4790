"""Node placement, Pister-hack link model, RSSI to PDR mapping and collision resolution."""

from __future__ import annotations

import csv
import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# waterfall curve of the receiver
PDR_FLOOR_DBM = -97.0
PDR_CEIL_DBM = -87.0


class TopologyError(Exception):
    pass


_M64 = (1 << 64) - 1


def _splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def link_uniform(seed: int, asn: int, a: int, b: int) -> float:
    """Uniform draw in [0, 1) fixed by (seed, asn, a, b).

    Keyed draws keep the fate of a given frame identical across runs that
    differ only in protocol logic, which pairs compared runs tightly.
    """
    h = _splitmix(seed & _M64)
    h = _splitmix(h ^ (asn & _M64))
    h = _splitmix(h ^ ((a & 0xFFFFFFFF) << 32 | (b & 0xFFFFFFFF)))
    return (h >> 11) * (1.0 / (1 << 53))


def friis_rssi(distance_m, tx_power_dbm: float = 0.0, freq_hz: float = 2.4e9,
               gain_tx: float = 1.0, gain_rx: float = 1.0):
    """Free-space received power in dBm (works on scalars and arrays)."""
    wavelength = SPEED_OF_LIGHT / freq_hz
    d = np.maximum(np.asarray(distance_m, dtype=float), 1e-3)
    path_gain = gain_tx * gain_rx * (wavelength / (4 * math.pi * d)) ** 2
    return tx_power_dbm + 10 * np.log10(path_gain)


def pdr_of(rssi_dbm: float) -> float:
    if rssi_dbm <= PDR_FLOOR_DBM:
        return 0.0
    if rssi_dbm >= PDR_CEIL_DBM:
        return 1.0
    return (rssi_dbm - PDR_FLOOR_DBM) / (PDR_CEIL_DBM - PDR_FLOOR_DBM)


def rssi_for_pdr(pdr: float) -> float:
    return PDR_FLOOR_DBM + pdr * (PDR_CEIL_DBM - PDR_FLOOR_DBM)


def resolve_reception(audible_pdrs: Sequence[float], rng: random.Random) -> Optional[int]:
    """Index of the transmission decoded by a receiver, or None.

    Two or more audible transmissions on the receiver's channel collide and
    nothing is decoded; a lone one gets through with its link PDR.
    """
    if len(audible_pdrs) != 1:
        return None
    p = audible_pdrs[0]
    if p >= 1.0 or rng.random() < p:
        return 0
    return None


def resolve_deliveries(transmissions: Sequence[Tuple[int, int]], receivers: Sequence[int],
                       link_pdr, rng: random.Random) -> Dict[int, Optional[int]]:
    """Per-receiver outcome for the transmissions sharing one (slot, channel).

    ``transmissions`` holds (sender, packet_ref) pairs; the result maps each
    receiver to the decoded packet_ref or None (idle, collision or loss).
    """
    out: Dict[int, Optional[int]] = {}
    for r in receivers:
        audible = [(ref, link_pdr(s, r)) for s, ref in transmissions if s != r and link_pdr(s, r) > 0.0]
        idx = resolve_reception([p for _, p in audible], rng)
        out[r] = audible[idx][0] if idx is not None else None
    return out


@dataclass
class Topology:
    positions: List[Tuple[float, float]]
    rssi: List[List[float]]
    root: int = 0
    area: float = 1000.0
    good_pdr: float = 0.5
    pdr: List[List[float]] = field(init=False, repr=False)
    audible: List[List[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.positions)
        self.pdr = [[0.0 if i == j else pdr_of(self.rssi[i][j]) for j in range(n)] for i in range(n)]
        self.audible = [[j for j in range(n) if self.pdr[i][j] > 0.0] for i in range(n)]

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def link_pdr(self, a: int, b: int) -> float:
        return self.pdr[a][b]

    def good_neighbors(self, node: int) -> List[int]:
        return [j for j in self.audible[node] if self.pdr[node][j] > self.good_pdr]

    def hop_depths(self) -> List[Optional[int]]:
        """BFS hop count from the root over good links."""
        depth: List[Optional[int]] = [None] * self.n_nodes
        depth[self.root] = 0
        frontier = [self.root]
        while frontier:
            nxt = []
            for u in frontier:
                for v in self.good_neighbors(u):
                    if depth[v] is None:
                        depth[v] = depth[u] + 1
                        nxt.append(v)
            frontier = nxt
        return depth

    def digest(self) -> str:
        h = hashlib.sha256()
        for x, y in self.positions:
            h.update(f"{x:.6f},{y:.6f};".encode())
        for row in self.rssi:
            h.update(",".join(f"{v:.6f}" for v in row).encode())
        return h.hexdigest()[:16]

    def dump_csv(self, dest) -> None:
        """Node positions, then every audible link once; ``dest`` is a path or text stream."""
        if hasattr(dest, "write"):
            self._write_csv(dest)
        else:
            with open(dest, "w", newline="") as fh:
                self._write_csv(fh)

    def _write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "a", "b", "x_or_rssi", "y_or_pdr"])
        for i, (x, y) in enumerate(self.positions):
            w.writerow(["node", i, "", f"{x:.3f}", f"{y:.3f}"])
        for i in range(self.n_nodes):
            for j in range(i + 1, self.n_nodes):
                if self.pdr[i][j] > 0.0:
                    w.writerow(["link", i, j, f"{self.rssi[i][j]:.2f}", f"{self.pdr[i][j]:.3f}"])


def generate_topology(n_nodes: int, area: float = 1000.0, rng_seed: int = 0, *,
                      min_neighbors: int = 3, good_pdr: float = 0.5, max_depth: Optional[int] = 3,
                      degradation_db: float = 40.0, tx_power_dbm: float = 0.0,
                      max_retries: int = 50, batch: int = 512,
                      candidate_budget: int = 400_000) -> Topology:
    """Random placement under the Pister-hack model.

    Nodes are placed one at a time at uniform random positions; a candidate
    is kept only if it has enough good links (PDR above ``good_pdr``) to the
    nodes already placed and, when ``max_depth`` is set, sits within that many
    good hops of the root.  The whole layout is redrawn if any node ends up
    with fewer than ``min_neighbors`` good links.
    """
    if n_nodes < 2:
        raise TopologyError("need at least two nodes")
    rng = np.random.default_rng(rng_seed)
    good_rssi = rssi_for_pdr(good_pdr)
    for _ in range(max_retries):
        pos = np.zeros((n_nodes, 2))
        rssi = np.full((n_nodes, n_nodes), -math.inf)
        depth = np.zeros(n_nodes, dtype=int)
        pos[0] = (area / 2, area / 2)
        spent = 0
        ok = True
        for k in range(1, n_nodes):
            need = min(min_neighbors, k)
            placed = False
            while spent < candidate_budget:
                cand = rng.uniform(0.0, area, size=(batch, 2))
                spent += batch
                d = np.linalg.norm(cand[:, None, :] - pos[None, :k, :], axis=2)
                r = friis_rssi(d, tx_power_dbm) - rng.uniform(0.0, degradation_db, size=d.shape)
                good = r > good_rssi
                valid = good.sum(axis=1) >= need
                if max_depth is not None:
                    dmin = np.where(good, depth[None, :k], 10**6).min(axis=1)
                    valid &= dmin + 1 <= max_depth
                idx = np.flatnonzero(valid)
                if idx.size:
                    i = idx[0]
                    pos[k] = cand[i]
                    rssi[k, :k] = r[i]
                    rssi[:k, k] = r[i]
                    depth[k] = np.where(good[i], depth[:k], 10**6).min() + 1
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        good_all = rssi > good_rssi
        if (good_all.sum(axis=1) >= min(min_neighbors, n_nodes - 1)).all():
            return Topology(positions=[tuple(p) for p in pos.tolist()],
                            rssi=rssi.tolist(), root=0, area=area, good_pdr=good_pdr)
    raise TopologyError(
        f"could not place {n_nodes} nodes with >= {min_neighbors} good neighbours; "
        "increase density (smaller area) or relax the depth bound")


def topology_from_positions(positions: Sequence[Tuple[float, float]], *, rng_seed: int = 0,
                            degradation_db: float = 0.0, tx_power_dbm: float = 0.0) -> Topology:
    """Fixed layout, mostly for tests and hand-built scenarios."""
    rng = np.random.default_rng(rng_seed)
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    deg = np.triu(rng.uniform(0.0, degradation_db, size=(n, n)), 1) if degradation_db else np.zeros((n, n))
    deg = deg + deg.T
    r = friis_rssi(d, tx_power_dbm) - deg
    np.fill_diagonal(r, -math.inf)
    return Topology(positions=[tuple(p) for p in pos.tolist()], rssi=r.tolist())


def topology_from_pdr(pdr: Sequence[Sequence[float]]) -> Topology:
    """Topology whose links have exactly the given PDRs (symmetric matrix)."""
    n = len(pdr)
    rssi = [[-math.inf] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                p = pdr[i][j]
                rssi[i][j] = -200.0 if p <= 0.0 else rssi_for_pdr(min(p, 1.0))
    return Topology(positions=[(float(i), 0.0) for i in range(n)], rssi=rssi)
