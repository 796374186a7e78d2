"""Global-knowledge oracles over topology snapshots.

Nothing here is visible to nodes: these functions build the ideal topology
from the full point set, judge legitimacy, and compute the metrics the
experiments report.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_left
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .hashspace import SCALE
from .protocol import choose_q

Slot = Tuple[int, int]


@dataclass(frozen=True)
class NodeView:
    id: int
    point: int
    q: int
    left: Optional[int]
    right: Optional[int]
    qset: Tuple[int, ...]
    db: Mapping[Slot, int]

    def edges(self) -> List[Tuple[str, int]]:
        """Explicit edges labeled by the variable that holds them."""
        out = []
        if self.left is not None:
            out.append(("left", self.left))
        if self.right is not None:
            out.append(("right", self.right))
        out.extend(("q", w) for w in self.qset)
        out.extend((f"db{i},{j}", w) for (i, j), w in sorted(self.db.items()))
        return out

    def neighbor_ids(self) -> set:
        return {w for _, w in self.edges()} - {self.id}


@dataclass(frozen=True)
class TopologySnapshot:
    nodes: Mapping[int, NodeView]
    c: int
    d: int
    channel_sizes: Mapping[int, int] = field(default_factory=dict)
    phase: int = 0

    @property
    def channels_empty(self) -> bool:
        return not any(self.channel_sizes.values())

    @property
    def q_map(self) -> Dict[int, int]:
        return {k: v.q for k, v in self.nodes.items()}

    @property
    def points(self) -> Dict[int, int]:
        return {k: v.point for k, v in self.nodes.items()}


def snapshot(world) -> TopologySnapshot:
    """Freeze the explicit edges of a simulator world."""
    views = {}
    for nid, s in world.nodes.items():
        views[nid] = NodeView(
            id=nid,
            point=s.me.point,
            q=s.q,
            left=s.left.id if s.left is not None else None,
            right=s.right.id if s.right is not None else None,
            qset=tuple(w.id for w in s.qset),
            db={k: w.id for k, w in s.db.items()},
        )
    sizes = {nid: len(ch) for nid, ch in world.channels.items()}
    return TopologySnapshot(views, world.params.c, world.params.d, sizes, world.phase_count)


# --- ideal topology -------------------------------------------------------

class _Line:
    """Sorted point set with closest-node queries under the module tie order."""

    def __init__(self, points: Mapping[int, int]):
        self.order = sorted(points, key=lambda i: (points[i], i))
        self.pts = [points[i] for i in self.order]
        self.index = {nid: k for k, nid in enumerate(self.order)}

    def closest_to(self, t: int) -> int:
        k = bisect_left(self.pts, t)
        best = None
        for cand in (k - 1, k):
            if 0 <= cand < len(self.pts):
                key = (abs(self.pts[cand] - t), self.pts[cand], self.order[cand])
                if best is None or key < best:
                    best = key
        return best[2]

    def nearest(self, nid: int, count: int) -> List[int]:
        """The ``count`` nodes closest to ``nid`` (excluding it), nearest first."""
        k = self.index[nid]
        p = self.pts[k]
        lo, hi = k - 1, k + 1
        out = []
        while len(out) < count and (lo >= 0 or hi < len(self.pts)):
            left_key = (p - self.pts[lo], self.pts[lo], self.order[lo]) if lo >= 0 else None
            right_key = (self.pts[hi] - p, self.pts[hi], self.order[hi]) if hi < len(self.pts) else None
            if right_key is None or (left_key is not None and left_key < right_key):
                out.append(self.order[lo])
                lo -= 1
            else:
                out.append(self.order[hi])
                hi += 1
        return out

    def sorted_ids(self, ids: Iterable[int]) -> Tuple[int, ...]:
        return tuple(sorted(ids, key=self.index.__getitem__))


def _ideal_view(line: _Line, nid: int, point: int, q: int, c: int) -> NodeView:
    k = line.index[nid]
    left = line.order[k - 1] if k > 0 else None
    right = line.order[k + 1] if k + 1 < len(line.order) else None
    qset = line.sorted_ids(line.nearest(nid, c * 2 * q))
    db = {}
    for i in range(1, q.bit_length() + 1):
        for j in range(1 << i):
            db[(i, j)] = line.closest_to((point + j * SCALE) >> i)
    return NodeView(nid, point, q, left, right, qset, db)


def ideal_topology(points: Mapping[int, int], c: int, d: int,
                   q_map: Mapping[int, int]) -> TopologySnapshot:
    """Ideal target graph for the given positions and q values."""
    for nid, q in q_map.items():
        if q < 1 or q & (q - 1):
            raise ValueError(f"q for node {nid} is not a power of two: {q}")
    line = _Line(points)
    views = {nid: _ideal_view(line, nid, points[nid], q_map[nid], c) for nid in points}
    return TopologySnapshot(views, c, d)


def ideal_q_points(line: _Line, points: Mapping[int, int], nid: int, q: int, c: int) -> List[int]:
    ids = line.sorted_ids(line.nearest(nid, c * 2 * q))
    return [points[w] for w in ids]


def is_q_fixpoint(points: Mapping[int, int], nid: int, q: int, c: int, d: int,
                  line: Optional[_Line] = None) -> bool:
    line = line or _Line(points)
    return choose_q(points[nid], ideal_q_points(line, points, nid, q, c), q, d) == q


def fixpoint_q_map(points: Mapping[int, int], c: int, d: int,
                   max_iter: int = 64) -> Dict[int, int]:
    """Iterate each node's q estimate on its ideal neighborhood from q = 1.

    If a node cycles, the smallest value on the cycle is returned; such a
    node has no fixpoint and :func:`is_legitimate` will flag it.
    """
    line = _Line(points)
    q_map = {}
    for nid in points:
        q, seen = 1, []
        for _ in range(max_iter):
            nq = choose_q(points[nid], ideal_q_points(line, points, nid, q, c), q, d)
            if nq == q:
                break
            if nq in seen:
                q = min(seen[seen.index(nq):] + [q])
                break
            seen.append(q)
            q = nq
        q_map[nid] = q
    return q_map


@dataclass
class LegitimacyReport:
    legitimate: bool
    diffs: List[str]

    def __bool__(self) -> bool:
        return self.legitimate


def is_legitimate(snap: TopologySnapshot, channels_empty: Optional[bool] = None,
                  max_diffs: Optional[int] = None) -> LegitimacyReport:
    """Compare a snapshot to the ideal topology for its own q values.

    Checks that every q is a fixpoint of the estimator on the ideal
    neighborhood, that every explicit edge matches, and that no messages are
    pending. ``max_diffs`` stops early once that many mismatches are found.
    """
    diffs: List[str] = []
    if channels_empty is None:
        channels_empty = snap.channels_empty
    if not channels_empty:
        diffs.append("channels not empty")
    points = snap.points
    if not points:
        return LegitimacyReport(not diffs, diffs)
    line = _Line(points)

    def full():
        return max_diffs is not None and len(diffs) >= max_diffs

    for nid, view in snap.nodes.items():
        if full():
            break
        q = view.q
        if q < 1 or q & (q - 1):
            diffs.append(f"node {nid}: q={q} is not a power of two")
            continue
        ideal = _ideal_view(line, nid, view.point, q, snap.c)
        if view.left != ideal.left:
            diffs.append(f"node {nid}: left={view.left} expected {ideal.left}")
        if view.right != ideal.right:
            diffs.append(f"node {nid}: right={view.right} expected {ideal.right}")
        if tuple(view.qset) != ideal.qset:
            missing = set(ideal.qset) - set(view.qset)
            extra = set(view.qset) - set(ideal.qset)
            diffs.append(f"node {nid}: q-neighborhood missing {sorted(missing)} extra {sorted(extra)}")
        for slot in sorted(set(ideal.db) | set(view.db)):
            have, want = view.db.get(slot), ideal.db.get(slot)
            if have != want:
                diffs.append(f"node {nid}: db{slot}={have} expected {want}")
        if choose_q(view.point, [points[w] for w in ideal.qset], q, snap.d) != q:
            diffs.append(f"node {nid}: q={q} is not a fixpoint")
    return LegitimacyReport(not diffs, diffs)


# --- metrics --------------------------------------------------------------

def diameter(snap: TopologySnapshot, limit: Optional[int] = None) -> Optional[int]:
    """Longest shortest path over explicit directed edges; ``None`` if some
    ordered pair is unreachable (or, with ``limit``, farther than it)."""
    ids = list(snap.nodes)
    n = len(ids)
    if n <= 1:
        return 0
    pos = {nid: k for k, nid in enumerate(ids)}
    adj = [[pos[w] for w in snap.nodes[nid].neighbor_ids() if w in pos] for nid in ids]
    everything = (1 << n) - 1
    reach = [1 << k for k in range(n)]
    steps = 0
    while True:
        if all(r == everything for r in reach):
            return steps
        if limit is not None and steps >= limit:
            return None
        new = []
        for k in range(n):
            acc = reach[k]
            for w in adj[k]:
                acc |= reach[w]
            new.append(acc)
        if new == reach:
            return None
        reach = new
        steps += 1


def unreachable_pairs(snap: TopologySnapshot) -> int:
    ids = list(snap.nodes)
    total = 0
    for src in ids:
        seen = {src}
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for w in snap.nodes[u].neighbor_ids():
                    if w in snap.nodes and w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        total += len(ids) - len(seen)
    return total


def degree_bound(c: int, q: int) -> int:
    return (c + 2) * 2 * q - 2


def degree_stats(snap: TopologySnapshot) -> Dict[str, object]:
    degrees = {nid: len(v.neighbor_ids()) for nid, v in snap.nodes.items()}
    slots = {nid: len(v.qset) + len(v.db) for nid, v in snap.nodes.items()}
    violations = [nid for nid, v in snap.nodes.items()
                  if max(degrees[nid], slots[nid]) > degree_bound(snap.c, v.q)]
    vals = list(degrees.values()) or [0]
    return {
        "max": max(vals),
        "mean": sum(vals) / len(vals),
        "per_node": degrees,
        "slots": slots,
        "violations": violations,
    }


def spacing_stats(points: Iterable[int]) -> Dict[str, float]:
    """Gaps between consecutive positions around the ring, as floats."""
    pts = sorted(points)
    if len(pts) < 2:
        return {"mean": 1.0, "max": 1.0, "n": len(pts)}
    gaps = [b - a for a, b in zip(pts, pts[1:])]
    gaps.append(SCALE - pts[-1] + pts[0])
    return {
        "mean": sum(gaps) / len(gaps) / SCALE,
        "max": max(gaps) / SCALE,
        "n": len(pts),
    }


def probe_hop_stats(hist: Mapping[int, int], limit: int = 3) -> Dict[str, float]:
    total = sum(hist.values())
    within = sum(c for h, c in hist.items() if h <= limit)
    return {
        "total": total,
        "within": within,
        "fraction": within / total if total else 1.0,
        "max": max(hist) if hist else 0,
    }


def churn_count(before: Mapping[int, Tuple[int, int]],
                after: Mapping[int, Tuple[int, int]]) -> Dict[int, Tuple[int, int]]:
    """Per-node (edge writes, q-updates) accrued between two stat captures."""
    return {nid: (after[nid][0] - w, after[nid][1] - u)
            for nid, (w, u) in before.items() if nid in after}


# --- CSV ------------------------------------------------------------------

@dataclass
class MetricsRecord:
    scenario: str
    phase: int
    n: int
    legitimate: int
    diameter: int  # -1 when some pair is unreachable
    max_degree: int
    mean_degree: float
    q_min: int
    q_max: int
    mean_gap: float
    max_gap: float
    probes: int
    probe_within3: float
    writes: int
    q_updates: int


METRICS_SCHEMA = "qdebruijn-metrics/1"
METRICS_HEADER = [f.name for f in fields(MetricsRecord)]


def metrics_record(world, scenario: str = "", with_diameter: bool = True) -> MetricsRecord:
    snap = snapshot(world)
    deg = degree_stats(snap)
    sp = spacing_stats(snap.points.values())
    diam = diameter(snap) if with_diameter else None
    qs = [v.q for v in snap.nodes.values()] or [0]
    hist = Counter(world.probe_hops) + Counter(world.general_probe_hops)
    ph = probe_hop_stats(hist)
    return MetricsRecord(
        scenario=scenario,
        phase=world.phase_count,
        n=len(snap.nodes),
        legitimate=int(bool(is_legitimate(snap, True, max_diffs=1))),
        diameter=-1 if diam is None else diam,
        max_degree=deg["max"],
        mean_degree=round(deg["mean"], 6),
        q_min=min(qs),
        q_max=max(qs),
        mean_gap=sp["mean"],
        max_gap=sp["max"],
        probes=ph["total"],
        probe_within3=round(ph["fraction"], 6),
        writes=sum(s.stats.writes for s in world.nodes.values()),
        q_updates=sum(s.stats.q_updates for s in world.nodes.values()),
    )


def write_metrics_csv(records: Sequence[MetricsRecord], fh) -> None:
    fh.write(f"#schema={METRICS_SCHEMA}\n")
    writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(asdict(rec))


def max_gap_bound(n: int) -> float:
    """W.h.p. ceiling on the longest ring segment among ``n`` hashed points."""
    return 4 * math.log(n) / n
