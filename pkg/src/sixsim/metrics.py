"""Per-node and per-packet metrics, lifetime estimate and the CSV files they land in."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from .mac import settle_charge

NODE_FIELDS = ["run", "seed", "mode", "node", "t_sync_s", "t_join_s", "charge_uC", "avg_current_uA",
               "lifetime_y", "tx", "rx", "drop_qfull", "drop_retry", "drop_noroute"]
PACKET_FIELDS = ["run", "seed", "mode", "node", "packet_order", "latency_s", "jitter_s"]
SUMMARY_FIELDS = ["run", "seed", "mode", "n_nodes", "app_period_s", "duration_min", "topology",
                  "joined", "mean_join_s", "median_join_s", "charge_total_uC", "generated",
                  "delivered", "drop_qfull", "drop_qfull_ctrl", "drop_retry", "drop_noroute",
                  "median_latency_s", "mean_jitter_s"]


def lifetime_years(avg_current_ua: float, battery_uah: float) -> Optional[float]:
    """Battery life at a constant draw; None when the current is zero (not estimable)."""
    if avg_current_ua <= 0:
        return None
    return battery_uah / (avg_current_ua * 24 * 365)


def jitter_series(latencies: Sequence[float]) -> List[float]:
    """Absolute change between consecutive latencies of one flow."""
    return [abs(b - a) for a, b in zip(latencies, latencies[1:])]


def fmt(x: Optional[float], digits: int = 6) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}"


def node_rows(sim) -> List[dict]:
    cfg = sim.cfg
    dt = cfg.slot_duration
    rows = []
    for node in sim.nodes:
        if node.id == 0:
            continue
        charge = settle_charge(node.ledger)
        synced_s = node.synced_slots * dt
        current = charge / synced_s if synced_s > 0 else 0.0
        rows.append({
            "run": cfg.run_index, "seed": cfg.rng_seed, "mode": cfg.stack_mode, "node": node.id,
            "t_sync_s": fmt(None if node.t_sync is None else node.t_sync * dt, 2),
            "t_join_s": fmt(None if node.t_join is None else node.t_join * dt, 2),
            "charge_uC": fmt(charge, 3),
            "avg_current_uA": fmt(current if synced_s > 0 else None, 4),
            "lifetime_y": fmt(lifetime_years(current, cfg.battery_uah), 4),
            "tx": sim.generated[node.id],
            "rx": sim.delivered_count[node.id],
            "drop_qfull": node.drop_qfull,
            "drop_retry": node.drop_retry,
            "drop_noroute": node.drop_noroute,
        })
    return rows


def packet_rows(sim) -> List[dict]:
    cfg = sim.cfg
    dt = cfg.slot_duration
    rows = []
    for origin in sorted(sim.latencies):
        seq = sorted(sim.latencies[origin])
        prev = None
        for order, lat in seq:
            rows.append({
                "run": cfg.run_index, "seed": cfg.rng_seed, "mode": cfg.stack_mode, "node": origin,
                "packet_order": order, "latency_s": fmt(lat * dt, 2),
                "jitter_s": "" if prev is None else fmt(abs(lat - prev) * dt, 2),
            })
            prev = lat
    return rows


def _median(xs: List[float]) -> Optional[float]:
    if not xs:
        return None
    s = sorted(xs)
    m = len(s) // 2
    return s[m] if len(s) % 2 else (s[m - 1] + s[m]) / 2


def summary_row(res) -> dict:
    cfg = res.config
    joins = [float(r["t_join_s"]) for r in res.node_rows if r["t_join_s"] != ""]
    lat = [float(r["latency_s"]) for r in res.packet_rows]
    jit = [float(r["jitter_s"]) for r in res.packet_rows if r["jitter_s"] != ""]
    c = res.counters
    return {
        "run": cfg.run_index, "seed": cfg.rng_seed, "mode": cfg.stack_mode, "n_nodes": cfg.n_nodes,
        "app_period_s": fmt(cfg.app_period_seconds, 2), "duration_min": fmt(cfg.duration_minutes, 2),
        "topology": res.topology_digest, "joined": len(joins),
        "mean_join_s": fmt(sum(joins) / len(joins) if joins else None, 3),
        "median_join_s": fmt(_median(joins), 3),
        "charge_total_uC": fmt(sum(float(r["charge_uC"]) for r in res.node_rows), 3),
        "generated": sum(r["tx"] for r in res.node_rows),
        "delivered": sum(r["rx"] for r in res.node_rows),
        "drop_qfull": sum(r["drop_qfull"] for r in res.node_rows),
        "drop_qfull_ctrl": c.get("drop_qfull_ctrl", 0),
        "drop_retry": sum(r["drop_retry"] for r in res.node_rows),
        "drop_noroute": sum(r["drop_noroute"] for r in res.node_rows),
        "median_latency_s": fmt(_median(lat), 3),
        "mean_jitter_s": fmt(sum(jit) / len(jit) if jit else None, 4),
    }


def write_csv(path, fieldnames: Sequence[str], rows: Iterable[Dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_run(res, out_dir) -> Path:
    out = Path(out_dir)
    write_csv(out / "nodes.csv", NODE_FIELDS, res.node_rows)
    write_csv(out / "packets.csv", PACKET_FIELDS, res.packet_rows)
    return out


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
