"""Per-node state machine of the self-stabilizing de Bruijn protocol.

Every handler takes the node's :class:`NodeState`, updates it in place and
returns the outbound batch as a list of :class:`Envelope`. Actions a node
invokes on itself (local ``Linearize`` calls used for downgrading) run
immediately inside the handler; remote calls become envelopes. Use
:func:`transition` for a copy-on-write version of any handler.

The four sub-protocols:

* BuildList keeps ``left``/``right``, the sorted-list backbone.
* The q-neighborhood keeps ``qset``, the ``c * 2q`` nodes closest to the
  node, and the estimate ``q`` of half the d-th root of n.
* Standard de Bruijn probing keeps ``db[(1, 0)]`` and ``db[(1, 1)]``.
* General de Bruijn probing keeps ``db[(i, j)]`` for ``2 <= i <= log2(2q)``.
"""

from __future__ import annotations

import copy
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

from .hashspace import MASK64, SCALE, hash_id

LEFT_DB = "leftDB"
RIGHT_DB = "rightDB"
DBH_DONE = "dbh_done"
PROBE_MODES = (LEFT_DB, RIGHT_DB, DBH_DONE)


class NodeRef(NamedTuple):
    """Reference to a peer.

    ``key`` packs the position with the id as a tie-breaker, so the natural
    tuple order is the total order on the line used throughout.
    """

    key: int
    id: int
    point: int

    @classmethod
    def make(cls, node_id: int, point: Optional[int] = None) -> "NodeRef":
        if point is None:
            point = hash_id(node_id)
        return cls((int(point) << 64) | (node_id & MASK64), node_id, int(point))

    def __repr__(self) -> str:
        return f"<{self.id}@{self.point / SCALE:.6f}>"


@dataclass(frozen=True)
class ProtocolParams:
    c: int = 3
    d: int = 2
    hasher: Callable[[int], int] = hash_id

    def __post_init__(self):
        if self.c < 3:
            raise ValueError(f"c must be an integer > 2, got {self.c}")
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")


# --- messages -------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Linearize:
    u: NodeRef


@dataclass(frozen=True, slots=True)
class Introduce:
    refs: Tuple[NodeRef, ...]
    sender: Optional[NodeRef]


@dataclass(frozen=True, slots=True)
class Probe:
    sender: NodeRef
    t: int
    mode: str
    hops: int = 1  # metrics only


@dataclass(frozen=True, slots=True)
class ProbeDone:
    t: int
    result: NodeRef
    hops: int = 0


@dataclass(frozen=True, slots=True)
class GeneralProbe:
    sender: NodeRef
    t: int
    i: int
    j: int
    db: int
    hops: int = 1


@dataclass(frozen=True, slots=True)
class GeneralProbeDone:
    result: NodeRef
    i: int
    j: int
    hops: int = 0


@dataclass(frozen=True, slots=True)
class Search:
    t: int
    r: int
    rem_hops: int
    trace: Tuple[NodeRef, ...] = ()
    search_id: int = 0


Message = (Linearize, Introduce, Probe, ProbeDone, GeneralProbe,
           GeneralProbeDone, Search)


class Envelope(NamedTuple):
    to: NodeRef
    body: object


def message_refs(body) -> List[NodeRef]:
    """Node references carried by a message body (its implicit edges)."""
    if isinstance(body, Linearize):
        return [body.u]
    if isinstance(body, Introduce):
        refs = [r for r in body.refs if r is not None]
        if body.sender is not None:
            refs.append(body.sender)
        return refs
    if isinstance(body, (Probe, GeneralProbe)):
        return [body.sender]
    if isinstance(body, (ProbeDone, GeneralProbeDone)):
        return [body.result]
    if isinstance(body, Search):
        return list(body.trace)
    raise TypeError(f"not a protocol message: {body!r}")


# --- node state -----------------------------------------------------------

@dataclass
class NodeStats:
    """Counters for churn analysis; not read by the protocol."""

    writes: int = 0
    q_updates: int = 0


@dataclass
class NodeState:
    me: NodeRef
    params: ProtocolParams = field(default_factory=ProtocolParams)
    left: Optional[NodeRef] = None
    right: Optional[NodeRef] = None
    q: int = 1
    qset: List[NodeRef] = field(default_factory=list)
    db: Dict[Tuple[int, int], NodeRef] = field(default_factory=dict)
    q_cursor: int = 0
    db_cursor: int = 0
    stats: NodeStats = field(default_factory=NodeStats)

    @property
    def capacity(self) -> int:
        return self.params.c * 2 * self.q

    @property
    def top_level(self) -> int:
        """Highest de Bruijn level kept, log2(2q)."""
        return self.q.bit_length()

    def neighbors(self) -> List[NodeRef]:
        """Every stored reference, with repetitions."""
        out = [r for r in (self.left, self.right) if r is not None]
        out.extend(self.qset)
        out.extend(self.db.values())
        return out


def new_node(node_id: int, params: ProtocolParams = ProtocolParams(),
             point: Optional[int] = None) -> NodeState:
    """A fresh node: q = 1, empty variables."""
    return NodeState(NodeRef.make(node_id, point), params)


def target(point: int, i: int, j: int) -> int:
    return (point + j * SCALE) >> i


def _near(t: int):
    return lambda w: (abs(w.point - t), w.key)


# --- BuildList ------------------------------------------------------------

def bl_timeout(s: NodeState, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    r = s.right
    if r is not None:
        if r.key > me.key:
            out.append(Envelope(r, Linearize(me)))
        else:
            s.right = None
            on_linearize(s, r, out)
    l = s.left
    if l is not None:
        if l.key < me.key:
            out.append(Envelope(l, Linearize(me)))
        else:
            s.left = None
            on_linearize(s, l, out)
    return out


def on_linearize(s: NodeState, u: NodeRef, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    if u is None or u.key == me.key:
        return out
    # a wrong-sided slot is treated as empty
    if s.right is not None and s.right.key <= me.key:
        stale, s.right = s.right, None
        on_linearize(s, stale, out)
    if s.left is not None and s.left.key >= me.key:
        stale, s.left = s.left, None
        on_linearize(s, stale, out)
    if u.key > me.key:
        r = s.right
        if r is None:
            s.right = u
            s.stats.writes += 1
        elif u.key < r.key:
            s.right = u
            s.stats.writes += 1
            _delegate(s, r, out)
        elif u.key > r.key:
            _delegate(s, u, out)
    else:
        l = s.left
        if l is None:
            s.left = u
            s.stats.writes += 1
        elif u.key > l.key:
            s.left = u
            s.stats.writes += 1
            _delegate(s, l, out)
        elif u.key < l.key:
            _delegate(s, u, out)
    return out


def _delegate(s: NodeState, u: NodeRef, out: list) -> None:
    """Hand ``u`` to the known node closest to it.

    Candidates are q-neighbors plus list neighbors, never ``u`` itself; the
    list neighbor on ``u``'s side guarantees strict progress toward ``u``.
    """
    best = None
    best_key = None
    up = u.point
    for w in (s.left, s.right, *s.qset):
        if w is None or w.key == u.key or w.key == s.me.key:
            continue
        k = (abs(w.point - up), w.key)
        if best_key is None or k < best_key:
            best, best_key = w, k
    if best is not None:
        out.append(Envelope(best, Linearize(u)))


# --- q-neighborhood -------------------------------------------------------

def qn_timeout(s: NodeState, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    r, l = s.right, s.left
    hi = r.key if r is not None else None
    lo = l.key if l is not None else None
    qs = s.qset
    # members strictly between a list neighbor and self (qset is position-sorted)
    b = bisect_left(qs, (me.key,))
    c = bisect_left(qs, (me.key + 1,))
    a = 0 if lo is None else min(b, bisect_left(qs, (lo + 1,)))
    e = len(qs) if hi is None else max(c, bisect_left(qs, (hi,)))
    inner = qs[a:b] + qs[c:e]
    if inner:
        s.qset = qs[:a] + qs[b:c] + qs[e:]
        inner.sort(key=_near(me.point))
        for w in inner:
            on_linearize(s, w, out)
    for nb in (s.right, s.left):
        if nb is not None and nb not in s.qset:
            insort(s.qset, nb)
            s.stats.writes += 1
    _trim(s, out)
    if s.qset:
        k = s.q_cursor % len(s.qset)
        s.q_cursor = k + 1
        qk = s.qset[k]
        if qk == s.right or qk == s.left:
            intro = me
        else:
            step = -1 if qk.key > me.key else 1
            idx = k + step
            intro = None
            if 0 <= idx < len(s.qset):
                cand = s.qset[idx]
                if (cand.key > me.key) == (qk.key > me.key):
                    intro = cand
            if intro is None:
                intro = me
        out.append(Envelope(qk, Introduce((intro,), me)))
    approximate_q(s, out)
    return out


def _trim(s: NodeState, out: list) -> None:
    """Evict the farthest members beyond capacity into BuildList."""
    excess = len(s.qset) - s.capacity
    if excess <= 0:
        return
    by_distance = sorted(s.qset, key=_near(s.me.point))
    evicted = by_distance[len(by_distance) - excess:]
    s.qset = sorted(by_distance[:len(by_distance) - excess])
    for w in evicted:
        on_linearize(s, w, out)


def on_introduce(s: NodeState, refs, sender: Optional[NodeRef],
                 out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    for u in refs:
        if u is None or u.key == me.key or u in s.qset:
            continue
        insort(s.qset, u)
        s.stats.writes += 1
    _trim(s, out)
    if sender is not None and sender.key != me.key:
        nb = s.right if sender.key < me.key else s.left
        if nb is not None:
            out.append(Envelope(sender, Introduce((nb,), None)))
        elif sender not in s.neighbors():
            # no reply carries the sender's reference, so keep it here
            on_linearize(s, sender, out)
    return out


def window_spans(me_point: int, points: List[int], limit: Optional[int] = None) -> List[int]:
    """``spans[m-1]``: width of self plus the ``m - 1`` nearest ``points``.

    The window for a given ``m`` is the same for every neighborhood that
    contains those nearest members, so the estimate does not depend on q.
    Ties in distance go to the smaller point.
    """
    pts = sorted(points)
    count = len(pts) if limit is None else min(limit - 1, len(pts))
    hi_idx = bisect_left(pts, me_point)
    lo_idx = hi_idx - 1
    lo = hi = me_point
    spans = [0]
    for _ in range(count):
        take_lo = lo_idx >= 0 and (hi_idx >= len(pts)
                                   or me_point - pts[lo_idx] <= pts[hi_idx] - me_point)
        if take_lo:
            lo = pts[lo_idx]
            lo_idx -= 1
        else:
            hi = pts[hi_idx]
            hi_idx += 1
        spans.append(hi - lo)
    return spans


def _span_scores(spans: List[int], limit: int, d: int, candidates) -> List[Tuple[Fraction, int]]:
    scores = []
    for label, m in candidates:
        if m < 1 or m > limit:
            continue
        denom = SCALE * m ** (d - 1)
        # |2^d * span / SCALE - m^-(d-1)| over the common denominator
        score = Fraction(abs((spans[m - 1] << d) * m ** (d - 1) - SCALE), denom)
        scores.append((score, label))
    return scores


def q_scores(me_point: int, points: List[int], q: int, d: int) -> Dict[int, Fraction]:
    """``a_i`` for every candidate exponent ``i`` whose index fits in ``points``."""
    log_q = q.bit_length() - 1
    cands = [(i, q << i if i >= 0 else q >> -i) for i in range(-log_q, 2)]
    spans = window_spans(me_point, points, 2 * q)
    return {i: a for a, i in _span_scores(spans, len(points), d, cands)}


def choose_q(me_point: int, points: List[int], q: int, d: int) -> int:
    """The q one estimator pass picks for a node at ``me_point``.

    Candidates ``m = 2**i * q`` beyond ``len(points)`` are skipped. Ties keep
    the current value, then prefer the smaller change.
    """
    if len(points) < 2:
        return q
    scores = q_scores(me_point, points, q, d)
    if not scores:
        return q
    best = min(scores, key=lambda i: (scores[i], abs(i), i))
    return q << best if best >= 0 else q >> -best


def approximate_q(s: NodeState, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    new_q = choose_q(s.me.point, [w.point for w in s.qset], s.q, s.params.d)
    if new_q != s.q:
        set_q(s, new_q, out)
    return out


def set_q(s: NodeState, new_q: int, out: Optional[list] = None) -> list:
    """Apply a q-update: shrink the neighborhood and drop surplus levels."""
    out = [] if out is None else out
    s.q = new_q
    s.stats.q_updates += 1
    _trim(s, out)
    _drop_levels(s, out)
    return out


def _drop_levels(s: NodeState, out: list) -> None:
    top = s.top_level
    stale = [key for key in s.db if key[0] > top]
    for key in sorted(stale):
        on_linearize(s, s.db.pop(key), out)


def approximate_log_n(s: NodeState) -> int:
    d = s.params.d
    points = [w.point for w in s.qset]
    lo = max(1, s.q // 2)
    hi = min(2 * s.q, len(points))
    if len(points) < lo or lo > hi:
        return ((2 * s.q) ** d).bit_length() - 1
    spans = window_spans(s.me.point, points, hi)
    scores = _span_scores(spans, len(points), d, [(m, m) for m in range(lo, hi + 1)])
    _, k = min(scores)
    return ((2 * k) ** d).bit_length() - 1


# --- standard de Bruijn ---------------------------------------------------

def sdb_timeout(s: NodeState, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    for j, nb in ((1, s.right), (0, s.left)):
        cur = s.db.get((1, j))
        if nb is None and cur is not None:
            on_linearize(s, cur, out)
        wrong = cur is not None and (cur.key < me.key if j else cur.key > me.key)
        if cur is None or wrong:
            if cur is not None:
                on_linearize(s, cur, out)
            s.db[(1, j)] = me
            s.stats.writes += 1
    if s.left is not None:
        out.append(Envelope(s.left, Probe(me, target(me.point, 1, 0), LEFT_DB)))
    if s.right is not None:
        out.append(Envelope(s.right, Probe(me, target(me.point, 1, 1), RIGHT_DB)))
    return out


def _greedy_next(s: NodeState, t: int) -> NodeRef:
    """Closest of ``Q`` and self to ``t`` (``qset`` is sorted by position)."""
    best = s.me
    best_key = (abs(best.point - t), best.key)
    qs = s.qset
    k = bisect_left(qs, (t << 64,))
    for w in qs[max(k - 1, 0):k + 1]:
        key = (abs(w.point - t), w.key)
        if key < best_key:
            best, best_key = w, key
    return best


def on_probe(s: NodeState, sender: NodeRef, t: int, mode: str, hops: int = 1,
             out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    if mode in (LEFT_DB, RIGHT_DB):
        nxt = s.db.get((1, 1 if mode == RIGHT_DB else 0))
        if nxt is None:
            out.append(Envelope(sender, ProbeDone(t, me, hops)))
        else:
            out.append(Envelope(nxt, Probe(sender, t, DBH_DONE, hops + 1)))
    else:
        u = _greedy_next(s, t)
        if u.key != me.key:
            out.append(Envelope(u, Probe(sender, t, DBH_DONE, hops + 1)))
        else:
            out.append(Envelope(sender, ProbeDone(t, me, hops)))
    return out


def _store_db(s: NodeState, slot: Tuple[int, int], result: NodeRef, out: list) -> None:
    cur = s.db.get(slot)
    if cur == result:
        return
    if cur is not None:
        on_linearize(s, cur, out)
    s.db[slot] = result
    s.stats.writes += 1


def on_probe_done(s: NodeState, t: int, result: NodeRef,
                  out: Optional[list] = None) -> list:
    out = [] if out is None else out
    _store_db(s, (1, 1 if t > s.me.point else 0), result, out)
    return out


# --- general de Bruijn ----------------------------------------------------

def general_slots(q: int) -> List[Tuple[int, int]]:
    """Round-robin domain: levels 2..log2(q)+1, every index on each."""
    return [(i, j) for i in range(2, q.bit_length() + 1) for j in range(1 << i)]


def gdb_timeout(s: NodeState, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    _drop_levels(s, out)
    slots = general_slots(s.q)
    for i, j in slots:
        cur = s.db.get((i, j))
        if cur is not None:
            if (s.right is None and cur.key > me.key) or (s.left is None and cur.key < me.key):
                on_linearize(s, cur, out)
            t = target(me.point, i, j)
            wrong = (t < me.point and cur.key > me.key) or (t > me.point and cur.key < me.key)
        if cur is None or wrong:
            if cur is not None:
                on_linearize(s, cur, out)
            s.db[(i, j)] = me
            s.stats.writes += 1
    if slots:
        k = s.db_cursor % len(slots)
        s.db_cursor = k + 1
        i, j = slots[k]
        via = s.db.get((i - 1, j % (1 << (i - 1))))
        if via is not None:
            out.append(Envelope(via, GeneralProbe(me, target(me.point, i, j), i, j, 1)))
    return out


def on_general_probe(s: NodeState, sender: NodeRef, t: int, i: int, j: int, db: int,
                     hops: int = 1, out: Optional[list] = None) -> list:
    out = [] if out is None else out
    me = s.me
    if db == 1:
        half = 1 << (i - 1) if i >= 1 else 1
        nxt = s.db.get((1, 1 if j >= half else 0))
        if nxt is None:
            out.append(Envelope(sender, GeneralProbeDone(me, i, j, hops)))
        else:
            out.append(Envelope(nxt, GeneralProbe(sender, t, i, j, 0, hops + 1)))
    else:
        u = _greedy_next(s, t)
        if u.key != me.key:
            out.append(Envelope(u, GeneralProbe(sender, t, i, j, 0, hops + 1)))
        else:
            out.append(Envelope(sender, GeneralProbeDone(me, i, j, hops)))
    return out


def on_general_probe_done(s: NodeState, result: NodeRef, i: int, j: int,
                          out: Optional[list] = None) -> list:
    out = [] if out is None else out
    if not (1 <= i <= s.top_level and 0 <= j < (1 << i)):
        on_linearize(s, result, out)
        return out
    _store_db(s, (i, j), result, out)
    return out


# --- composite ------------------------------------------------------------

def node_timeout(s: NodeState) -> list:
    out: list = []
    bl_timeout(s, out)
    qn_timeout(s, out)
    sdb_timeout(s, out)
    gdb_timeout(s, out)
    return out


def on_join(new: NodeRef, contact: NodeRef) -> Envelope:
    return Envelope(contact, Linearize(new))


def handle(s: NodeState, body) -> list:
    """Dispatch one non-search message to its handler."""
    if isinstance(body, Linearize):
        return on_linearize(s, body.u)
    if isinstance(body, Introduce):
        return on_introduce(s, body.refs, body.sender)
    if isinstance(body, Probe):
        return on_probe(s, body.sender, body.t, body.mode, body.hops)
    if isinstance(body, ProbeDone):
        return on_probe_done(s, body.t, body.result)
    if isinstance(body, GeneralProbe):
        return on_general_probe(s, body.sender, body.t, body.i, body.j, body.db, body.hops)
    if isinstance(body, GeneralProbeDone):
        return on_general_probe_done(s, body.result, body.i, body.j)
    raise TypeError(f"unhandled message {body!r}")


def transition(s: NodeState, body=None) -> Tuple[NodeState, list]:
    """Pure form: ``(state, message) -> (new state, outbound)``.

    ``body=None`` runs the Timeout action.
    """
    s2 = copy.deepcopy(s)
    out = node_timeout(s2) if body is None else handle(s2, body)
    return s2, out
