"""Seeded execution of the asynchronous message-passing model.

Channels are unbounded multisets; the scheduler picks which pending message
to deliver. Two schedulers are provided: phase-synchronous (every node fires
Timeout once, then all channels drain) and an asynchronous one with aging
for bounded-delay fairness. Every random draw comes from ``World.rng``, so a
seed fixes the whole trajectory.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import analysis
from .hashspace import SCALE, HashPoint, hash_id
from .protocol import (
    DBH_DONE, LEFT_DB, RIGHT_DB, Envelope, GeneralProbe, GeneralProbeDone,
    Introduce, Linearize, NodeRef, NodeState, Probe, ProbeDone, ProtocolParams,
    Search, handle, message_refs, node_timeout, on_join,
)
from .routing import SearchResult, handle_search, initiate_search

log = logging.getLogger(__name__)

TOPOLOGIES = ("random_weakly_connected", "sorted_list", "legitimate_gdb", "custom")
SCHEDULERS = ("phase", "async")
DEFAULT_STEP_CEILING = 10 ** 7


class SimulationStalled(RuntimeError):
    """A phase failed to drain within the step ceiling."""


class ConnectivityLost(AssertionError):
    pass


class OverrideHasher:
    """Explicit id -> point table for test fixtures; falls back to hash_id."""

    def __init__(self, table: Mapping[int, int]):
        self.table = dict(table)

    def __call__(self, node_id: int) -> int:
        p = self.table.get(node_id)
        return hash_id(node_id) if p is None else p

    def __eq__(self, other):
        return isinstance(other, OverrideHasher) and other.table == self.table

    def __hash__(self):
        return hash(tuple(sorted(self.table.items())))


@dataclass
class ScenarioConfig:
    n: int = 16
    d: int = 2
    c: int = 3
    seed: int = 0
    topology: str = "random_weakly_connected"
    scheduler: str = "phase"
    async_steps: int = 0
    hash_override: Optional[Dict[int, int]] = None
    extra_edges: Optional[int] = None
    max_phases: int = 5000
    step_ceiling: int = DEFAULT_STEP_CEILING
    churn: List[dict] = field(default_factory=list)

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.c < 3:
            raise ValueError("c must be >= 3")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.hash_override is not None:
            pts = list(self.hash_override.values())
            if len(set(pts)) != len(pts):
                raise ValueError("hash_override points must be distinct")
            if any(not 0 <= p < SCALE for p in pts):
                raise ValueError("hash_override points must lie in [0, 1)")
        for ev in self.churn:
            if set(ev) - {"phase", "join", "leave"}:
                raise ValueError(f"bad churn event {ev!r}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        data = dict(data)
        override = data.pop("hash_override", None)
        if override is not None:
            data["hash_override"] = {
                int(k): HashPoint.from_fraction(Fraction(v)) for k, v in override.items()
            }
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def even_points(n: int) -> Dict[int, int]:
    """Ids 0..n-1 placed at j/n (n a power of two): the ideal fixture."""
    return {j: (j * SCALE) // n for j in range(n)}


class World:
    """Full system state: nodes, channels, scheduler randomness, counters."""

    def __init__(self, params: ProtocolParams, seed: int = 0,
                 step_ceiling: int = DEFAULT_STEP_CEILING):
        self.params = params
        self.rng = random.Random(seed)
        self.nodes: Dict[int, NodeState] = {}
        self.refs: Dict[int, NodeRef] = {}
        self.channels: Dict[int, List[Tuple[int, object]]] = {}
        self.departed: set = set()
        self.phase_count = 0
        self.step_count = 0
        self.step_ceiling = step_ceiling
        self.results: List[SearchResult] = []
        self.probe_hops: Counter = Counter()
        self.general_probe_hops: Counter = Counter()
        self.dropped = 0
        self.event_log: Optional[List[dict]] = None
        self.check_connectivity = False
        self._seq = 0
        self._ready: List[int] = []
        self._ready_pos: Dict[int, int] = {}
        self._heap: List[Tuple[int, int]] = []
        self._last_fire: Dict[int, int] = {}

    # -- construction ------------------------------------------------------

    def add_node(self, node_id: int, point: Optional[int] = None) -> NodeState:
        if node_id in self.nodes:
            raise ValueError(f"node {node_id} already present")
        if point is None:
            point = self.params.hasher(node_id)
        s = NodeState(NodeRef.make(node_id, point), self.params)
        self.nodes[node_id] = s
        self.refs[node_id] = s.me
        self.channels[node_id] = []
        self._last_fire[node_id] = self._seq
        self.departed.discard(node_id)
        return s

    def ref(self, node_id: int) -> NodeRef:
        return self.refs[node_id]

    # -- channels ----------------------------------------------------------

    def pending(self) -> int:
        return sum(len(ch) for ch in self.channels.values())

    def send(self, env: Envelope) -> None:
        nid = env.to.id
        ch = self.channels.get(nid)
        if ch is None:
            self.dropped += 1
            return
        self._seq += 1
        ch.append((self._seq, env.body))
        heapq.heappush(self._heap, (self._seq, nid))
        if len(ch) == 1:
            self._ready_pos[nid] = len(self._ready)
            self._ready.append(nid)

    def _take(self, nid: int, idx: int):
        ch = self.channels[nid]
        item = ch[idx]
        ch[idx] = ch[-1]
        ch.pop()
        if not ch:
            pos = self._ready_pos.pop(nid)
            last = self._ready.pop()
            if last != nid:
                self._ready[pos] = last
                self._ready_pos[last] = pos
        return item

    # -- actions -----------------------------------------------------------

    def fire_timeout(self, nid: int) -> None:
        s = self.nodes[nid]
        if self.departed:
            _purge(s, self.departed)
        self._seq += 1
        self._last_fire[nid] = self._seq
        self._log(nid, "timeout", "Timeout", self._seq)
        for env in node_timeout(s):
            self.send(env)
        self.step_count += 1
        self._after_step()

    def deliver(self, nid: int, idx: int) -> None:
        seq, body = self._take(nid, idx)
        self._log(nid, "deliver", type(body).__name__, seq)
        s = self.nodes[nid]
        if isinstance(body, Search):
            res = handle_search(s, body)
            if isinstance(res, SearchResult):
                self.results.append(res)
            else:
                for env in res:
                    self.send(env)
        else:
            if isinstance(body, ProbeDone):
                self.probe_hops[body.hops] += 1
            elif isinstance(body, GeneralProbeDone):
                self.general_probe_hops[body.hops] += 1
            for env in handle(s, body):
                self.send(env)
        self.step_count += 1
        self._after_step()

    def _after_step(self) -> None:
        if self.check_connectivity and not self.weakly_connected():
            raise ConnectivityLost(f"union graph disconnected at step {self.step_count}")

    def _log(self, actor, action, kind, seq) -> None:
        if self.event_log is not None:
            self.event_log.append({"step": self.step_count, "actor": actor,
                                   "action": action, "kind": kind, "seq": seq})

    # -- schedulers --------------------------------------------------------

    def run_phase(self) -> None:
        """One Timeout per node in random order, then drain every channel."""
        order = list(self.nodes)
        self.rng.shuffle(order)
        for nid in order:
            self.fire_timeout(nid)
        budget = self.step_ceiling
        while self._ready:
            if budget <= 0:
                raise SimulationStalled(
                    f"phase {self.phase_count} still has {self.pending()} messages "
                    f"after {self.step_ceiling} deliveries")
            nid = self._ready[self.rng.randrange(len(self._ready))]
            self.deliver(nid, self.rng.randrange(len(self.channels[nid])))
            budget -= 1
        self.phase_count += 1

    def run_phases(self, count: int) -> None:
        for _ in range(count):
            self.run_phase()

    def run_async(self, steps: int) -> None:
        """Asynchronous schedule with aging.

        Even steps pick uniformly among all pending messages and all n
        Timeout actions. Odd steps serve the oldest item, where a message ages
        from its enqueue and a Timeout from its last firing. A message that
        joins P pending ones (itself included) is thus delivered within
        2 * (P + n) steps.
        """
        for _ in range(steps):
            if not self.nodes:
                return
            if self.step_count % 2:
                self._forced_step()
            else:
                self._random_step()

    def _random_step(self) -> None:
        total = self.pending()
        pick = self.rng.randrange(total + len(self.nodes))
        if pick >= total:
            self.fire_timeout(list(self.nodes)[pick - total])
            return
        for nid, ch in self.channels.items():
            if pick < len(ch):
                self.deliver(nid, pick)
                return
            pick -= len(ch)

    def _forced_step(self) -> None:
        oldest_msg = self._oldest_message()
        nid_t = min(self._last_fire, key=self._last_fire.__getitem__)
        if oldest_msg is not None and oldest_msg[0] < self._last_fire[nid_t]:
            seq, nid = oldest_msg
            idx = next(k for k, (s, _) in enumerate(self.channels[nid]) if s == seq)
            self.deliver(nid, idx)
        else:
            self.fire_timeout(nid_t)

    def _oldest_message(self) -> Optional[Tuple[int, int]]:
        while self._heap:
            seq, nid = self._heap[0]
            ch = self.channels.get(nid)
            if ch is not None and any(s == seq for s, _ in ch):
                return seq, nid
            heapq.heappop(self._heap)
        return None

    def replay(self, records: Iterable[dict]) -> None:
        """Re-run a logged schedule (timeouts and deliveries by sequence)."""
        for rec in records:
            nid = rec["actor"]
            if rec["action"] == "timeout":
                self.fire_timeout(nid)
            else:
                idx = next(k for k, (s, _) in enumerate(self.channels[nid]) if s == rec["seq"])
                self.deliver(nid, idx)

    # -- searches ----------------------------------------------------------

    def search(self, source: int, t: int) -> SearchResult:
        """Route one lookup to completion, delivering only its own messages."""
        env = initiate_search(self.nodes[source], t)
        while True:
            res = handle_search(self.nodes[env.to.id], env.body)
            if isinstance(res, SearchResult):
                return res
            (env,) = res
            if env.to.id not in self.nodes:
                return SearchResult("failure", env.body.trace)

    # -- global checks -----------------------------------------------------

    def weakly_connected(self) -> bool:
        """Is the union of explicit and implicit edges weakly connected?"""
        ids = list(self.nodes)
        if len(ids) <= 1:
            return True
        parent = {nid: nid for nid in ids}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        comps = len(ids)
        for nid, s in self.nodes.items():
            refs = s.neighbors()
            for _, body in self.channels[nid]:
                refs.extend(message_refs(body))
            root = find(nid)
            for r in refs:
                if r.id in parent:
                    other = find(r.id)
                    if other != root:
                        parent[other] = root
                        comps -= 1
        return comps == 1

    def stats(self) -> Dict[int, Tuple[int, int]]:
        return {nid: (s.stats.writes, s.stats.q_updates) for nid, s in self.nodes.items()}

    def snapshot(self) -> "analysis.TopologySnapshot":
        return analysis.snapshot(self)

    def is_legitimate(self, max_diffs: Optional[int] = None,
                      ignore_channels: bool = False) -> "analysis.LegitimacyReport":
        """Explicit edges match the ideal topology (and, by default, no messages pend).

        The async scheduler never empties every channel, so its callers pass
        ``ignore_channels=True``.
        """
        empty = True if ignore_channels else None
        return analysis.is_legitimate(analysis.snapshot(self), empty, max_diffs)

    def export_log(self, fh) -> None:
        for rec in self.event_log or ():
            fh.write(json.dumps(rec) + "\n")


def _purge(s: NodeState, gone: set) -> None:
    """Forget references to departed nodes."""
    if s.left is not None and s.left.id in gone:
        s.left = None
    if s.right is not None and s.right.id in gone:
        s.right = None
    if any(w.id in gone for w in s.qset):
        s.qset = [w for w in s.qset if w.id not in gone]
    for key in [k for k, w in s.db.items() if w.id in gone]:
        del s.db[key]


# --- world builders -------------------------------------------------------

def build_initial_world(cfg: ScenarioConfig) -> World:
    cfg.validate()
    hasher = OverrideHasher(cfg.hash_override) if cfg.hash_override else hash_id
    params = ProtocolParams(cfg.c, cfg.d, hasher)
    w = World(params, cfg.seed, cfg.step_ceiling)
    ids = sorted(cfg.hash_override) if cfg.hash_override else list(range(cfg.n))
    if len(ids) != cfg.n:
        raise ValueError("hash_override must list exactly n ids")
    for nid in ids:
        w.add_node(nid)
    if cfg.topology == "random_weakly_connected":
        _scatter_random_graph(w, ids, cfg.extra_edges)
    elif cfg.topology == "sorted_list":
        _install_sorted_list(w)
    elif cfg.topology == "legitimate_gdb":
        install_legitimate(w)
    return w


def _install_sorted_list(w: World) -> None:
    order = sorted(w.refs.values())
    for a, b in zip(order, order[1:]):
        w.nodes[a.id].right = b
        w.nodes[b.id].left = a


def install_legitimate(w: World, q_map: Optional[Mapping[int, int]] = None) -> None:
    """Overwrite every node's variables with the ideal topology."""
    points = {nid: r.point for nid, r in w.refs.items()}
    if q_map is None:
        q_map = analysis.fixpoint_q_map(points, w.params.c, w.params.d)
    ideal = analysis.ideal_topology(points, w.params.c, w.params.d, q_map)
    for nid, view in ideal.nodes.items():
        s = w.nodes[nid]
        s.q = view.q
        s.left = w.refs[view.left] if view.left is not None else None
        s.right = w.refs[view.right] if view.right is not None else None
        s.qset = [w.refs[x] for x in view.qset]
        s.db = {k: w.refs[x] for k, x in view.db.items()}


def _scatter_random_graph(w: World, ids: Sequence[int], extra: Optional[int]) -> None:
    """Random spanning tree plus extra edges, each stored in a random slot."""
    rng = w.rng
    order = list(ids)
    rng.shuffle(order)
    edges = [(order[k], order[rng.randrange(k)]) for k in range(1, len(order))]
    extra = len(order) if extra is None else extra
    if len(order) > 1:
        for _ in range(rng.randint(0, extra)):
            a, b = rng.sample(order, 2)
            edges.append((a, b))
    for a, b in edges:
        if rng.random() < 0.5:
            a, b = b, a
        _place_edge(w, a, b)


def _place_edge(w: World, holder: int, other: int) -> None:
    s = w.nodes[holder]
    ref = w.refs[other]
    rng = w.rng
    slots = ["linearize_msg", "introduce_msg"]
    if s.left is None:
        slots.append("left")
    if s.right is None:
        slots.append("right")
    if len(s.qset) < s.capacity and ref not in s.qset:
        slots.append("q")
    for j in (0, 1):
        if (1, j) not in s.db:
            slots.append(f"db{j}")
    slot = rng.choice(slots)
    if slot == "left":
        s.left = ref
    elif slot == "right":
        s.right = ref
    elif slot == "q":
        s.qset = sorted(s.qset + [ref])
    elif slot.startswith("db"):
        s.db[(1, int(slot[2]))] = ref
    elif slot == "linearize_msg":
        w.send(Envelope(s.me, Linearize(ref)))
    else:
        w.send(Envelope(s.me, Introduce((ref,), None)))


# --- faults and churn -----------------------------------------------------

def inject_corruption(w: World, count: int) -> None:
    """Insert ``count`` well-formed messages with random contents.

    Every reference points to an existing node.
    """
    rng = w.rng
    ids = list(w.nodes)
    if not ids:
        return

    def rand_ref():
        return w.refs[rng.choice(ids)]

    def rand_point():
        return rng.randrange(1 << 64) << 64

    for _ in range(count):
        kind = rng.randrange(7)
        if kind == 0:
            body = Linearize(rand_ref())
        elif kind == 1:
            refs = tuple(rand_ref() for _ in range(rng.randint(1, 3)))
            body = Introduce(refs, rand_ref() if rng.random() < 0.5 else None)
        elif kind == 2:
            body = Probe(rand_ref(), rand_point(), rng.choice((LEFT_DB, RIGHT_DB, DBH_DONE)))
        elif kind == 3:
            body = ProbeDone(rand_point(), rand_ref())
        elif kind == 4:
            i = rng.randint(1, 6)
            body = GeneralProbe(rand_ref(), rand_point(), i, rng.randrange(1 << i), rng.randint(0, 1))
        elif kind == 5:
            i = rng.randint(1, 6)
            body = GeneralProbeDone(rand_ref(), i, rng.randrange(1 << i))
        else:
            body = Search(rng.choice(ids), rng.randint(-1, 12), rng.randint(0, 3))
        w.send(Envelope(rand_ref(), body))


def apply_churn(w: World, joins: Iterable[int] = (), leaves: Iterable[int] = (),
                points: Optional[Mapping[int, int]] = None) -> None:
    """Join new nodes at random contacts; let at most one node leave.

    A leave is only accepted while the world is legitimate.
    """
    joins, leaves = list(joins), list(leaves)
    if leaves:
        if len(leaves) > 1:
            raise ValueError("only one node may leave at a time")
        if not w.is_legitimate(max_diffs=1, ignore_channels=True):
            raise ValueError("leave rejected: world is not legitimate")
    existing = list(w.nodes)
    for nid in leaves:
        del w.nodes[nid]
        del w.refs[nid]
        del w._last_fire[nid]
        ch = w.channels.pop(nid)
        if ch:
            pos = w._ready_pos.pop(nid)
            last = w._ready.pop()
            if last != nid:
                w._ready[pos] = last
                w._ready_pos[last] = pos
        w.departed.add(nid)
        existing.remove(nid)
    for nid in joins:
        s = w.add_node(nid, None if points is None else points.get(nid))
        if existing:
            contact = w.refs[w.rng.choice(existing)]
            w.send(on_join(s.me, contact))


def run_until(w: World, predicate, max_phases: int) -> Optional[int]:
    """Run phases until ``predicate(w)`` holds; returns phases used or None."""
    start = w.phase_count
    if predicate(w):
        return 0
    while w.phase_count - start < max_phases:
        w.run_phase()
        if predicate(w):
            return w.phase_count - start
    return None


def legit(w: World) -> bool:
    """Explicit edges are legitimate; a phase drains channels anyway."""
    return bool(w.is_legitimate(max_diffs=1, ignore_channels=True))
