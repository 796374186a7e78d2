import io
import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from helpers import even_config
from qdebruijn import analysis
from qdebruijn.analysis import (
    METRICS_HEADER, METRICS_SCHEMA, NodeView, TopologySnapshot, churn_count,
    degree_bound, degree_stats, diameter, fixpoint_q_map, ideal_topology,
    is_legitimate, is_q_fixpoint, max_gap_bound, metrics_record, probe_hop_stats,
    spacing_stats, unreachable_pairs, write_metrics_csv,
)
from qdebruijn.hashspace import SCALE, hash_id
from qdebruijn.simulator import ScenarioConfig, build_initial_world, even_points


def view(nid, point, right=None, qset=(), q=1):
    return NodeView(nid, point, q, None, right, tuple(qset), {})


def test_line_nearest_and_closest():
    pts = {0: 0, 1: SCALE // 4, 2: SCALE // 2, 3: 3 * SCALE // 4}
    line = analysis._Line(pts)
    assert line.nearest(0, 2) == [1, 2]
    assert line.nearest(2, 3) == [1, 3, 0]  # tie at 1/4 goes to the smaller point
    assert line.closest_to(SCALE // 8) == 0  # equidistant: smaller point wins
    assert line.sorted_ids([3, 0, 2]) == (0, 2, 3)


def test_ideal_topology_even16(even16):
    ideal = ideal_topology(even_points(16), 3, 2, {j: 2 for j in range(16)})
    v = ideal.nodes[5]
    assert (v.left, v.right) == (4, 6)
    assert v.qset == (0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 11, 12)
    assert v.db[(1, 0)] == 2 and v.db[(1, 1)] == 10  # 5/32 rounds to 2/16, 21/32 to 10/16
    assert v.db[(2, 3)] == 13  # (5/16 + 3)/4 = 53/64 -> 13/16
    assert ideal.nodes == even16.snapshot().nodes


def test_ideal_topology_rejects_bad_q():
    with pytest.raises(ValueError):
        ideal_topology({0: 0}, 3, 2, {0: 3})


def test_fixpoint_q_map_even_points():
    pts = even_points(16)
    qm = fixpoint_q_map(pts, 3, 2)
    assert set(qm.values()) == {2}
    assert all(is_q_fixpoint(pts, nid, 2, 3, 2) for nid in pts)
    assert not is_q_fixpoint(pts, 0, 8, 3, 2)


@settings(max_examples=25)
@given(st.lists(st.integers(0, (1 << 64) - 1), min_size=2, max_size=80, unique=True),
       st.sampled_from([2, 3]))
def test_fixpoint_q_map_yields_fixpoints(raw, d):
    pts = {k: x << 64 for k, x in enumerate(raw)}
    qm = fixpoint_q_map(pts, 3, d)
    assert all(is_q_fixpoint(pts, nid, q, 3, d) for nid, q in qm.items())
    snap = ideal_topology(pts, 3, d, qm)
    assert is_legitimate(snap, True)


def test_is_legitimate_reports_diffs(even16):
    snap = even16.snapshot()
    assert is_legitimate(snap)
    even16.nodes[3].right = None
    even16.nodes[4].q = 3
    rep = is_legitimate(even16.snapshot())
    assert not rep
    assert any("right=None" in d for d in rep.diffs)
    assert any("not a power of two" in d for d in rep.diffs)
    assert len(is_legitimate(even16.snapshot(), max_diffs=1).diffs) == 1


def test_is_legitimate_flags_pending_messages(even16):
    even16.fire_timeout(0)
    assert not even16.is_legitimate()
    assert even16.is_legitimate(ignore_channels=True)


def test_is_legitimate_flags_non_fixpoint_q():
    pts = even_points(16)
    snap = ideal_topology(pts, 3, 2, {j: 1 for j in range(16)})
    rep = is_legitimate(snap, True)
    assert any("not a fixpoint" in d for d in rep.diffs)


def test_empty_snapshot_is_legitimate():
    assert is_legitimate(TopologySnapshot({}, 3, 2))


def test_diameter_examples():
    pts = [0, SCALE // 4, SCALE // 2]
    chain = {0: view(0, pts[0], 1), 1: view(1, pts[1], 2), 2: view(2, pts[2])}
    snap = TopologySnapshot(chain, 3, 2)
    assert diameter(snap) is None
    assert unreachable_pairs(snap) == 3
    ring = dict(chain)
    ring[2] = view(2, pts[2], 0)
    assert diameter(TopologySnapshot(ring, 3, 2)) == 2
    assert diameter(TopologySnapshot(ring, 3, 2), limit=1) is None
    assert unreachable_pairs(TopologySnapshot(ring, 3, 2)) == 0
    assert diameter(TopologySnapshot({0: view(0, 0)}, 3, 2)) == 0


@pytest.mark.parametrize("n,d", [(16, 2), (64, 3), (64, 2)])
def test_diameter_of_ideal_even_worlds(n, d):
    w = build_initial_world(even_config(n=n, d=d))
    assert diameter(w.snapshot()) <= d


def test_degree_bound_holds_in_legitimate_worlds(even16):
    assert degree_bound(3, 2) == 18
    stats = degree_stats(even16.snapshot())
    assert stats["violations"] == []
    assert stats["max"] <= 18
    assert stats["per_node"][5] >= 12


def test_degree_stats_flags_overfull_node():
    qset = range(1, 20)
    nodes = {0: view(0, 0, qset=qset)}
    nodes.update({k: view(k, k << 100) for k in qset})
    stats = degree_stats(TopologySnapshot(nodes, 3, 2))
    assert stats["violations"] == [0]


def test_spacing_stats_exact():
    sp = spacing_stats([0, SCALE // 4, SCALE // 2])
    assert sp["mean"] == pytest.approx(1 / 3)
    assert sp["max"] == 0.5
    assert spacing_stats([5])["max"] == 1.0


def test_spacing_of_hashed_ids():
    sp = spacing_stats(hash_id(i) for i in range(4096))
    assert sp["mean"] == pytest.approx(1 / 4096)
    assert sp["max"] <= max_gap_bound(4096)
    assert max_gap_bound(4096) == pytest.approx(4 * math.log(4096) / 4096)


def test_probe_hop_stats():
    st_ = probe_hop_stats(Counter({1: 5, 2: 3, 4: 2}))
    assert st_ == {"total": 10, "within": 8, "fraction": 0.8, "max": 4}
    assert probe_hop_stats({})["fraction"] == 1.0


def test_churn_count():
    assert churn_count({1: (3, 0), 2: (5, 1)}, {1: (7, 1), 2: (5, 1), 3: (9, 9)}) == {1: (4, 1), 2: (0, 0)}


def test_metrics_csv_roundtrip(even16):
    even16.run_phase()
    rec = metrics_record(even16, "even")
    assert rec.legitimate == 1 and rec.diameter <= 2 and rec.q_min == rec.q_max == 2
    assert rec.probe_within3 == 1.0
    buf = io.StringIO()
    write_metrics_csv([rec], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == f"#schema={METRICS_SCHEMA}"
    assert lines[1].split(",") == METRICS_HEADER
    assert lines[2].startswith("even,1,16,1,")


def test_metrics_record_without_diameter():
    w = build_initial_world(ScenarioConfig(n=8, seed=0))
    rec = metrics_record(w, with_diameter=False)
    assert rec.diameter == -1 and rec.legitimate == 0
