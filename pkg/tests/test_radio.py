import io
import random

import pytest
from hypothesis import given, strategies as st

from sixsim.radio import (Topology, TopologyError, friis_rssi, generate_topology, link_uniform, pdr_of,
                          resolve_deliveries, resolve_reception, rssi_for_pdr, topology_from_pdr,
                          topology_from_positions)


@pytest.mark.parametrize("rssi,pdr", [(-100, 0.0), (-80, 1.0), (-92, 0.5), (-97, 0.0), (-87, 1.0)])
def test_pdr_examples(rssi, pdr):
    assert pdr_of(rssi) == pytest.approx(pdr)


@given(st.floats(-150, 0), st.floats(-150, 0))
def test_pdr_monotone_bounded(a, b):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= pdr_of(lo) <= pdr_of(hi) <= 1.0


@given(st.floats(0, 1))
def test_rssi_for_pdr_inverts(p):
    assert pdr_of(rssi_for_pdr(p)) == pytest.approx(p)


def test_friis_reference():
    # 2.4 GHz free space at 100 m loses about 80 dB
    assert float(friis_rssi(100.0)) == pytest.approx(-80.05, abs=0.05)
    assert float(friis_rssi(200.0)) == pytest.approx(float(friis_rssi(100.0)) - 6.02, abs=0.01)


def test_two_close_nodes_are_linked():
    topo = topology_from_positions([(0, 0), (10, 0)])
    assert topo.pdr[0][1] == 1.0 == topo.pdr[1][0]
    assert topo.good_neighbors(0) == [1]


def test_generated_topology_constraints():
    topo = generate_topology(50, 1000.0, 7)
    assert topo.n_nodes == 50
    for i in range(50):
        assert len(topo.good_neighbors(i)) >= 3
        for j in range(50):
            assert topo.rssi[i][j] == topo.rssi[j][i]
    depths = topo.hop_depths()
    assert all(d is not None and d <= 3 for d in depths)
    assert max(depths) >= 2


def test_topology_is_deterministic():
    a, b = generate_topology(30, rng_seed=4), generate_topology(30, rng_seed=4)
    assert a.positions == b.positions and a.rssi == b.rssi and a.digest() == b.digest()
    assert generate_topology(30, rng_seed=5).digest() != a.digest()


def test_impossible_density_raises():
    with pytest.raises(TopologyError):
        generate_topology(20, area=1e6, rng_seed=0, max_retries=2, candidate_budget=2048)
    with pytest.raises(TopologyError):
        generate_topology(1)


def test_dump_csv():
    topo = topology_from_positions([(0, 0), (10, 0), (5000, 0)])
    buf = io.StringIO()
    topo.dump_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "kind,a,b,x_or_rssi,y_or_pdr"
    assert sum(1 for l in lines if l.startswith("node,")) == 3
    assert [l for l in lines if l.startswith("link,")] == [lines[-1]] and lines[-1].startswith("link,0,1,")


def test_reception_rules():
    rng = random.Random(0)
    assert resolve_reception([1.0], rng) == 0
    assert resolve_reception([1.0, 1.0], rng) is None
    assert resolve_reception([], rng) is None
    assert resolve_reception([0.0], rng) is None


def test_bernoulli_delivery_rate():
    rng = random.Random(11)
    n = 100_000
    got = sum(resolve_reception([0.5], rng) == 0 for _ in range(n))
    assert abs(got / n - 0.5) < 0.01


def test_resolve_deliveries_collision_and_range():
    topo = topology_from_pdr([[0, 1, 1, 0], [1, 0, 1, 0], [1, 1, 0, 0], [0, 0, 0, 0]])
    rng = random.Random(0)
    out = resolve_deliveries([(1, "a"), (2, "b")], [0, 3], topo.link_pdr, rng)
    assert out == {0: None, 3: None}
    out = resolve_deliveries([(1, "a")], [0, 2, 3], topo.link_pdr, rng)
    assert out == {0: "a", 2: "a", 3: None}


@given(st.integers(0, 2**40), st.integers(0, 2**30), st.integers(0, 200), st.integers(0, 200))
def test_link_uniform_range_and_determinism(seed, asn, a, b):
    u = link_uniform(seed, asn, a, b)
    assert 0.0 <= u < 1.0 and u == link_uniform(seed, asn, a, b)


def test_link_uniform_is_uniform():
    xs = [link_uniform(3, asn, 1, 2) for asn in range(50_000)]
    assert abs(sum(xs) / len(xs) - 0.5) < 0.01
    assert abs(sum(x < 0.25 for x in xs) / len(xs) - 0.25) < 0.01
