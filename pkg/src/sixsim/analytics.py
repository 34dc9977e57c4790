"""Closed-form calculators, a Monte-Carlo check of the reservation success formula,
descriptive statistics, paired sign tests and experiment orchestration."""

from __future__ import annotations

import dataclasses
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, ScenarioConfig, _coerce, _FIELDS, validate
from .sixtop import first_attempt_success_probability

# ---------------------------------------------------------------- reservation success


def psuccess_monte_carlo(free_a: int, free_b: int, total: int, k: int, *, trials: int = 1_000_000,
                         seed: int = 0) -> float:
    """Empirical first-attempt success rate.

    Each trial proposes k cells; every proposed cell is drawn uniformly and
    independently at each end and counts as free there when its index falls
    below that end's free count.  A trial succeeds when any proposed cell is
    free at both ends.
    """
    return float(psuccess_monte_carlo_grid([free_a], [free_b], total, [k], trials=trials,
                                           seed=seed)[(free_a, free_b, k)])


def psuccess_monte_carlo_grid(free_a: Sequence[int], free_b: Sequence[int], total: int,
                              ks: Sequence[int], *, trials: int = 1_000_000, seed: int = 0,
                              chunk: int = 250_000) -> Dict[Tuple[int, int, int], float]:
    """Monte-Carlo rates for a whole grid, sharing one set of draws across cells."""
    if total < 1 or total > 65535:
        raise ValueError("total must lie in [1, 65535]")
    kmax = max(ks)
    rng = np.random.default_rng(seed)
    hits = {(a, b, k): 0 for a in free_a for b in free_b for k in ks}
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        ua = rng.integers(0, total, size=(n, kmax), dtype=np.uint16)
        ub = rng.integers(0, total, size=(n, kmax), dtype=np.uint16)
        for a in free_a:
            in_a = ua < a
            for b in free_b:
                both = in_a & (ub < b)
                for k in ks:
                    hits[(a, b, k)] += int(both[:, :k].any(axis=1).sum())
        done += n
    return {key: h / trials for key, h in hits.items()}


def psuccess_grid(free_a: Sequence[int], free_b: Sequence[int], total: int,
                  ks: Sequence[int]) -> Dict[Tuple[int, int, int], float]:
    return {(a, b, k): first_attempt_success_probability(a, b, total, k)
            for a in free_a for b in free_b for k in ks}


def symmetric_free_fraction(target: float, k: int) -> float:
    """Smallest free fraction, equal at both ends, reaching ``target``."""
    if not 0 <= target < 1:
        raise ValueError("target must lie in [0, 1)")
    return math.sqrt(1 - (1 - target) ** (1 / k))


def one_sided_free_fraction(target: float, k: int, partner_fraction: float = 1.0) -> float:
    """Free fraction one end needs when the other end has ``partner_fraction`` free."""
    if not 0 <= target < 1 or not 0 < partner_fraction <= 1:
        raise ValueError("bad target or partner fraction")
    need = (1 - (1 - target) ** (1 / k)) / partner_fraction
    if need > 1:
        raise ValueError("target unreachable with that partner")
    return need


def free_cell_reduction(target: float, k_small: int = 5, k_large: int = 10) -> float:
    """Relative drop in the free cells one end needs when k grows, at equal success."""
    return 1 - one_sided_free_fraction(target, k_large) / one_sided_free_fraction(target, k_small)


# ---------------------------------------------------------------- statistics


@dataclass
class Stats:
    n: int
    mean: float
    median: float
    p5: float
    p95: float


def describe(values: Iterable[float]) -> Stats:
    """Mean, median and 5th/95th percentiles; NaN markers for an empty sample."""
    xs = np.asarray([float(v) for v in values], dtype=float)
    if xs.size == 0:
        nan = float("nan")
        return Stats(0, nan, nan, nan, nan)
    p5, med, p95 = np.percentile(xs, [5, 50, 95])
    return Stats(int(xs.size), float(xs.mean()), float(med), float(p5), float(p95))


def ecdf(values: Iterable[float]) -> List[Tuple[float, float]]:
    """Step points (x, F(x)) of the empirical CDF, one per distinct value."""
    xs = sorted(float(v) for v in values)
    n = len(xs)
    out: List[Tuple[float, float]] = []
    for i, x in enumerate(xs, 1):
        if out and out[-1][0] == x:
            out[-1] = (x, i / n)
        else:
            out.append((x, i / n))
    return out


@dataclass
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float

    @property
    def n(self) -> int:
        return self.wins + self.losses


def sign_test(pairs: Iterable[Tuple[float, float]]) -> SignTest:
    """One-sided paired sign test of ``treated < control``; ties are discarded.

    ``pairs`` holds (treated, control) values.
    """
    wins = losses = ties = 0
    for treated, control in pairs:
        if treated < control:
            wins += 1
        elif treated > control:
            losses += 1
        else:
            ties += 1
    n = wins + losses
    p = sum(math.comb(n, i) for i in range(wins, n + 1)) / 2 ** n if n else 1.0
    return SignTest(wins, losses, ties, p)


# ---------------------------------------------------------------- experiment plans

@dataclass
class ExperimentPlan:
    """Cartesian sweep over modes, sizes and periods with a shared seed range.

    Every (n_nodes, period, seed) cell is run once per mode on the same
    topology, so MSF and PB arms are paired.
    """
    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    modes: List[str] = field(default_factory=lambda: ["MSF", "PB"])
    n_nodes: List[int] = field(default_factory=lambda: [50])
    periods: List[float] = field(default_factory=lambda: [15.0])
    seeds: List[int] = field(default_factory=lambda: [1])

    def configs(self) -> List[ScenarioConfig]:
        out = []
        idx = 0
        for n, period, seed in itertools.product(self.n_nodes, self.periods, self.seeds):
            for mode in self.modes:
                cfg = dataclasses.replace(self.base, stack_mode=mode, n_nodes=n,
                                          app_period_seconds=period, rng_seed=seed, run_index=idx)
                out.append(validate(cfg))
                idx += 1
        return out


def _seed_range(text: str) -> List[int]:
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if hi < lo:
                raise ConfigError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


def parse_plan(text: str) -> ExperimentPlan:
    """Plan file: ``key = value`` lines.

    ``modes``, ``n_nodes`` and ``app_period_seconds`` take comma lists,
    ``seeds`` takes ranges such as ``1-20``; any other key sets a scenario
    field shared by all runs.
    """
    plan = ExperimentPlan()
    base: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        try:
            if key in ("modes", "stack_mode"):
                plan.modes = [m.strip().upper() for m in raw.split(",") if m.strip()]
            elif key == "n_nodes":
                plan.n_nodes = [int(x) for x in raw.split(",")]
            elif key in ("app_period_seconds", "periods"):
                plan.periods = [float(x) for x in raw.split(",")]
            elif key == "seeds":
                plan.seeds = _seed_range(raw)
            elif key in _FIELDS:
                base[key] = _coerce(key, raw)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: cannot parse {raw!r}") from None
    plan.base = dataclasses.replace(ScenarioConfig(), **base)
    plan.configs()  # validates every combination up front
    return plan


def load_plan(path) -> ExperimentPlan:
    return parse_plan(Path(path).read_text())


def thread_cap(default: Optional[int] = None) -> int:
    raw = os.environ.get("SIXSIM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return default or os.cpu_count() or 1


def run_dir_name(cfg: ScenarioConfig) -> str:
    return (f"run{cfg.run_index:04d}_{cfg.stack_mode}_n{cfg.n_nodes}"
            f"_p{cfg.app_period_seconds:g}_s{cfg.rng_seed}")


def _run_one(cfg: ScenarioConfig):
    from .engine import InvariantViolation, run
    try:
        return run(cfg)
    except InvariantViolation as exc:
        raise InvariantViolation(exc.asn, f"{run_dir_name(cfg)}: {exc.what}") from None


def run_configs(configs: Sequence[ScenarioConfig], workers: Optional[int] = None) -> list:
    """Run every scenario, in parallel when allowed; results keep the input order."""
    workers = min(workers or thread_cap(), len(configs)) if configs else 1
    if workers <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, configs))


def check_pairing(rows: Sequence[dict]) -> None:
    """Every PB summary row needs an MSF row with the same seed and topology."""
    key = lambda r: (r["n_nodes"], r["app_period_s"], r["seed"], r["topology"])
    msf = {key(r) for r in rows if r["mode"] == "MSF"}
    for r in rows:
        if r["mode"] == "PB" and key(r) not in msf:
            raise ValueError(f"PB run {r['run']} has no paired MSF run")
