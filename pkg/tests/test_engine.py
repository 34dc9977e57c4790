from collections import Counter, defaultdict

import pytest

from sixsim.config import ScenarioConfig
from sixsim.core import CellCoord, CellKind, CellOption, NodeState, ScheduleEntry
from sixsim.engine import InvariantViolation, Simulation, Tx, run
from sixsim.mac import EnergyState
from sixsim.metrics import NODE_FIELDS, PACKET_FIELDS, write_run
from sixsim.packets import Packet, PacketKind
from sixsim.radio import topology_from_pdr

PAIR = topology_from_pdr([[0, 1], [1, 0]])


def sim(mode="PB", minutes=2.0, topo=PAIR, **kw):
    n = topo.n_nodes if topo is not None else kw.pop("n_nodes")
    cfg = ScenarioConfig(n_nodes=n, stack_mode=mode, duration_minutes=minutes, **kw)
    return Simulation(cfg, topo, trace=True)


def tx_records(s, node=None):
    return [t for t in s.trace if t[1] == "tx" and (node is None or t[2] == node)]


@pytest.mark.parametrize("mode", ["MSF", "PB"])
def test_two_node_leaf_joins(mode):
    s = sim(mode, minutes=0.5)
    res = s.run()
    leaf = res.node_rows[0]
    assert leaf["node"] == 1 and leaf["t_join_s"] != ""
    assert any(t[1] == "joined" and t[2] == 1 for t in s.trace)
    assert float(leaf["t_sync_s"]) <= float(leaf["t_join_s"]) < 30


def test_unicast_energy_states_match_transmissions():
    s = sim("MSF", minutes=3, app_period_seconds=5)
    s.run()
    for nid in (0, 1):
        uni_tx = sum(1 for t in tx_records(s, nid) if t[3][3] != -1)
        bc_tx = sum(1 for t in tx_records(s, nid) if t[3][3] == -1)
        led = s.nodes[nid].ledger.counters
        assert led[EnergyState.TX_DATA_RX_ACK] == uni_tx
        assert led[EnergyState.TX_DATA] == bc_tx
    uni_rx = Counter(t[2] for t in s.trace if t[1] == "rx" and t[3][3] != -1 and
                     any(x[2] == t[3][3] and x[0] == t[0] and x[3][3] == t[2] for x in tx_records(s)))
    assert s.nodes[0].ledger.counters[EnergyState.RX_DATA_TX_ACK] == uni_rx[0] > 0


def test_energy_counters_cover_synced_slots():
    s = sim("PB", minutes=3)
    s.run()
    for node in s.nodes:
        assert node.ledger.total_slots == node.synced_slots
    assert s.nodes[0].synced_slots == s.cfg.total_slots


def test_app_traffic_count():
    s = sim("PB", minutes=2.5, app_period_seconds=5)
    res = s.run()
    t_join = float(res.node_rows[0]["t_join_s"])
    expected = (150 - t_join) / 5
    assert abs(s.generated[1] - expected) <= 1


def test_unjoined_node_generates_nothing():
    topo = topology_from_pdr([[0, 0], [0, 0]])
    s = sim("PB", minutes=1, topo=topo)
    res = s.run()
    assert s.generated[1] == 0 and res.node_rows[0]["t_join_s"] == ""
    assert res.node_rows[0]["avg_current_uA"] == ""


def test_eb_period_after_join():
    s = sim("MSF", minutes=8)
    s.run()
    join = next(t[0] for t in s.trace if t[1] == "joined" and t[2] == 1)
    ebs = [t[0] for t in tx_records(s, 1) if t[3][2] == "EB" and t[0] > join]
    assert len(ebs) >= 10
    period = 16 * 100
    assert all(b - a == period for a, b in zip(ebs, ebs[1:]))
    assert s.nodes[1].eb_phase == (ebs[0] // 100) % 16


def test_root_beacons_first():
    s = sim("PB", minutes=0.1)
    s.run()
    first = tx_records(s)[0]
    assert first[0] == 0 and first[2] == 0 and first[3][2] == "EB"


@pytest.mark.parametrize("three_step,per_txn", [(False, 2), (True, 3)])
def test_sixp_message_counts(three_step, per_txn):
    s = sim("MSF", minutes=2, sixp_three_step=three_step)
    s.run()
    packets = {t[3][5] for t in tx_records(s) if t[3][2].startswith("6P")}
    done = sum(1 for t in s.trace if t[1] == "6p" and t[3][3] == "Done")
    assert done >= 1
    assert len(packets) == per_txn * done


def network_trace(mode, seed=3, n=15, minutes=6):
    cfg = ScenarioConfig(n_nodes=n, stack_mode=mode, duration_minutes=minutes, rng_seed=seed,
                         app_period_seconds=5)
    s = Simulation(cfg, trace=True)
    return s, s.run()


@pytest.fixture(scope="module", params=["MSF", "PB"])
def traced(request):
    return network_trace(request.param)


def test_pledges_never_transmit(traced):
    s, _ = traced
    assert all(t[3][4] != NodeState.PLEDGE.value for t in tx_records(s))


def test_one_radio_action_per_slot(traced):
    s, _ = traced
    busy = defaultdict(Counter)
    for t in s.trace:
        if t[1] in ("tx", "rx"):
            busy[t[0]][t[2]] += 1
    assert all(c <= 1 for per_slot in busy.values() for c in per_slot.values())


def test_joined_only_after_sync(traced):
    s, _ = traced
    state = {}
    for t in s.trace:
        if t[1] in ("sync", "detach"):
            state[t[2]] = "sync"
        elif t[1] == "desync":
            state[t[2]] = None
        elif t[1] == "joined":
            assert state.get(t[2]) == "sync"
            state[t[2]] = "joined"


def test_pb_uses_no_plain_add_for_join(traced):
    s, res = traced
    if s.cfg.pb:
        assert res.counters.get("sixp_add_join", 0) == 0
        assert res.counters.get("sixp_add_switch", 0) == 0


def test_latency_at_least_one_slot(traced):
    _, res = traced
    assert res.packet_rows and all(float(r["latency_s"]) >= 0.01 for r in res.packet_rows)


def test_determinism_byte_identical(tmp_path):
    cfg = ScenarioConfig(n_nodes=12, duration_minutes=3, rng_seed=8, app_period_seconds=5)
    a = write_run(run(cfg), tmp_path / "a")
    b = write_run(run(cfg), tmp_path / "b")
    for name in ("nodes.csv", "packets.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = (a / "nodes.csv").read_text().splitlines()[0]
    assert header == ",".join(NODE_FIELDS)
    assert (a / "packets.csv").read_text().splitlines()[0] == ",".join(PACKET_FIELDS)


def test_topology_size_mismatch():
    with pytest.raises(ValueError):
        Simulation(ScenarioConfig(n_nodes=3), PAIR)


def test_invariant_violation_is_reported():
    s = sim("PB", minutes=0.2)
    s.nodes[1].queue.capacity = 0  # corrupt state: any queued frame now breaks the bound
    s.nodes[1].queue.packets.append(object())
    with pytest.raises(InvariantViolation, match="queue over capacity"):
        s.check_invariants()


def step(s, slots):
    start = s.now
    for asn in range(start, start + slots):
        s.asn = asn
        s.now = asn + 1
        s.execute_slot(asn)


def test_autonomous_tx_overrides_cell_at_same_offset():
    s = sim("MSF", minutes=0.5)
    s.run()
    root, leaf = s.nodes
    slot = leaf.auto_slot
    blocker = root.schedule.add(ScheduleEntry(CellCoord(slot, 3), CellOption.RX, CellKind.NEGOTIATED, neighbor=7))
    root.send(root.make_dio(1))
    assert slot in root.overlay and root.auto_tx[1] == slot
    step(s, 2 * s.cfg.slotframe_length)
    sent = [t for t in tx_records(s, 0) if t[0] >= s.cfg.total_slots and t[3][3] == 1]
    assert sent and sent[0][3][0] == slot
    assert blocker.used >= 1  # the radio was busy, so no idle listen is booked on the Rx cell
    assert slot not in root.overlay and 1 not in root.auto_tx
    assert root.schedule.get(slot) is blocker


def test_shared_cell_losses_leave_link_estimate_alone():
    s = sim("MSF", minutes=0.5)
    s.run()
    leaf = s.nodes[1]
    nbr = leaf.neighbor(0)
    before = nbr.link_quality

    def fail(entry):
        pkt = Packet(PacketKind.DIS, 1, 0, created_asn=s.now, size=14)
        leaf.send(pkt)
        leaf.on_tx_done(Tx(leaf, entry, pkt, 0, 0), s.now)
        leaf.remove_packet(pkt)

    fail(leaf.schedule.get(0))
    assert nbr.link_quality == before
    fail(leaf.tx_cells_to(0)[0])
    assert nbr.link_quality < before


def test_secured_node_uses_dio_heard_earlier():
    s = sim("MSF", minutes=0.5)
    root, leaf = s.nodes
    leaf.on_sync(0)
    assert not leaf.secured
    leaf.on_receive(root.make_dio(1), 0, None)
    assert leaf.parent is None
    leaf.on_receive(Packet(PacketKind.JOIN_RESPONSE, 0, 1, created_asn=0, size=20), 0, None)
    assert leaf.secured and leaf.parent == 0
    assert not leaf.has_queued(PacketKind.DIS, 0)
