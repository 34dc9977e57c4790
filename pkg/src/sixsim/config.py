"""Scenario configuration: every knob of a run, `key = value` file parsing and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Union

from .mac import DEFAULT_CHARGE_TABLE, EnergyState
from .pb import max_injected_list_length


class ConfigError(ValueError):
    pass


MODES = ("MSF", "PB")


@dataclass
class ScenarioConfig:
    n_nodes: int = 50
    duration_minutes: float = 30.0
    app_period_seconds: float = 15.0
    stack_mode: str = "PB"
    rng_seed: int = 0
    run_index: int = 0

    slotframe_length: int = 100
    slot_duration: float = 0.01
    nb_channels: int = 16
    queue_capacity: int = 10
    secure_joining: bool = True

    # topology
    area_m: float = 1000.0
    min_neighbors: int = 3
    max_depth: int = 3

    # frame sizes in bytes
    max_payload_msf: int = 90
    max_payload_pb: int = 120
    dio_size_msf: int = 76
    dio_size_pb: int = 120
    dao_size_msf: int = 20
    dao_size_pb: int = 75
    eb_size: int = 35
    dis_size: int = 14
    sixp_size: int = 40
    ack_size: int = 25

    # MAC
    eb_period_slotframes: int = 16
    retry_limit: int = 5
    min_be: int = 1
    max_be: int = 4
    charge_sleep: float = DEFAULT_CHARGE_TABLE[EnergyState.SLEEP]
    charge_idle_listen: float = DEFAULT_CHARGE_TABLE[EnergyState.IDLE_LISTEN]
    charge_tx_data_rx_ack: float = DEFAULT_CHARGE_TABLE[EnergyState.TX_DATA_RX_ACK]
    charge_rx_data_tx_ack: float = DEFAULT_CHARGE_TABLE[EnergyState.RX_DATA_TX_ACK]
    charge_tx_data: float = DEFAULT_CHARGE_TABLE[EnergyState.TX_DATA]
    charge_rx_data: float = DEFAULT_CHARGE_TABLE[EnergyState.RX_DATA]
    battery_uah: float = 2_200_000.0

    # 6P / MSF
    sixp_k: int = 5
    sixp_three_step: bool = False
    lock_slotframes: int = 3
    msf_hi: float = 0.75
    msf_lo: float = 0.25
    msf_window: int = 64
    sixp_retry_min_slotframes: int = 1
    sixp_retry_max_slotframes: int = 4

    # RPL and node status
    trickle_imin_s: float = 1.0
    trickle_doublings: int = 8
    trickle_k: int = 1
    dao_period_s: float = 60.0
    rank_step: int = 256
    root_rank: int = 256
    dy_sync_s: float = 60.0
    dis_join_s: float = 30.0
    eb_threshold: int = 1
    # pledges hear EBs on every channel unless this restricts them to one random channel per slotframe
    pledge_single_channel_scan: bool = False
    join_timeout_s: float = 10.0
    min_parent_quality: float = 0.5

    # PB
    proposed_slots_per_dio: int = 7
    proposed_slots_after_initial: int = 3
    dio_cells_duration_slotframes: int = 10
    permanent_dio_slots: int = 1
    slot_selection_ratio: int = 3
    min_nb: int = 1
    max_nb: int = 5
    initial_phase_minutes: float = 45.0
    queue_threshold: int = 2
    cooldown_slotframes: int = 2
    cells_on_overflow: int = 1
    fallback_min_slotframes: int = 1
    fallback_max_slotframes: int = 2

    @property
    def pb(self) -> bool:
        return self.stack_mode == "PB"

    @property
    def total_slots(self) -> int:
        return int(round(self.duration_minutes * 60 / self.slot_duration))

    def slots(self, seconds: float) -> int:
        return max(1, int(round(seconds / self.slot_duration)))

    @property
    def slotframe_seconds(self) -> float:
        return self.slotframe_length * self.slot_duration

    @property
    def charge_table(self) -> Dict[EnergyState, float]:
        return {
            EnergyState.SLEEP: self.charge_sleep,
            EnergyState.IDLE_LISTEN: self.charge_idle_listen,
            EnergyState.TX_DATA_RX_ACK: self.charge_tx_data_rx_ack,
            EnergyState.RX_DATA_TX_ACK: self.charge_rx_data_tx_ack,
            EnergyState.TX_DATA: self.charge_tx_data,
            EnergyState.RX_DATA: self.charge_rx_data,
        }

    @property
    def dio_ext_budget(self) -> int:
        return self.dio_size_pb - self.dio_size_msf

    @property
    def dao_ext_budget(self) -> int:
        return self.dao_size_pb - self.dao_size_msf

    def replace(self, **kw) -> "ScenarioConfig":
        return validate(dataclasses.replace(self, **kw))


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    need(cfg.stack_mode in MODES, f"stack_mode must be one of {MODES}")
    need(cfg.n_nodes >= 2, "n_nodes must be at least 2")
    need(cfg.duration_minutes > 0, "duration_minutes must be positive")
    need(cfg.app_period_seconds > 0, "app_period_seconds must be positive")
    need(6 <= cfg.slotframe_length <= 256, "slotframe_length must lie in [6, 256] (8-bit slot ids)")
    need(cfg.slot_duration > 0, "slot_duration must be positive")
    need(cfg.nb_channels >= 1, "nb_channels must be positive")
    need(cfg.queue_capacity >= 1, "queue_capacity must be positive")
    need(cfg.rng_seed >= 0, "rng_seed must be nonnegative")
    need(cfg.sixp_k >= 1, "sixp_k must be positive")
    need(cfg.lock_slotframes >= 1, "lock_slotframes must be positive")
    need(0 <= cfg.msf_lo < cfg.msf_hi <= 1, "need 0 <= msf_lo < msf_hi <= 1")
    need(cfg.msf_window >= 1, "msf_window must be positive")
    need(1 <= cfg.min_be <= cfg.max_be, "need 1 <= min_be <= max_be")
    need(cfg.retry_limit >= 1, "retry_limit must be positive")
    need(1 <= cfg.min_nb <= cfg.max_nb <= 5, "need 1 <= min_nb <= max_nb <= 5")
    need(cfg.slot_selection_ratio >= 1, "slot_selection_ratio must be positive")
    need(0 <= cfg.proposed_slots_per_dio <= cfg.slotframe_length - 2, "bad proposed_slots_per_dio")
    need(0 <= cfg.proposed_slots_after_initial <= cfg.slotframe_length - 2,
         "bad proposed_slots_after_initial")
    need(cfg.sixp_retry_min_slotframes <= cfg.sixp_retry_max_slotframes, "bad 6P retry window")
    need(cfg.fallback_min_slotframes <= cfg.fallback_max_slotframes, "bad fallback window")
    need(cfg.battery_uah > 0, "battery_uah must be positive")
    need(all(v >= 0 for v in cfg.charge_table.values()), "charges must be nonnegative")
    need(cfg.trickle_imin_s > 0 and cfg.trickle_doublings >= 0 and cfg.trickle_k >= 1,
         "bad trickle parameters")
    need(cfg.eb_threshold >= 1 and cfg.eb_period_slotframes >= 1, "bad EB parameters")
    need(cfg.max_payload_pb >= cfg.dio_size_pb and cfg.max_payload_pb >= cfg.dao_size_pb,
         "PB frames exceed the maximum payload")
    if cfg.pb:
        longest = max_injected_list_length(cfg.slotframe_length)
        # DAO extension: framed list, requested count, selected ids
        need(2 + longest + 1 + cfg.max_nb <= cfg.dao_ext_budget,
             "PB DAO budget cannot carry the longest slot list")
        need(3 + max(cfg.proposed_slots_per_dio, cfg.proposed_slots_after_initial) <= cfg.dio_ext_budget,
             "PB DIO budget cannot carry the proposed slots")
    return cfg


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw.upper() if name == "stack_mode" else raw


def parse_scenario(text: str, base: ScenarioConfig = None) -> ScenarioConfig:
    """Parse `key = value` lines; blank lines and # comments are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return validate(dataclasses.replace(base or ScenarioConfig(), **values))


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text())


def dump_scenario(cfg: ScenarioConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"
