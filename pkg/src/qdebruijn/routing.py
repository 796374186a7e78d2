"""Two-phase de Bruijn lookups.

Phase one spends general de Bruijn hops prepending the first ``r0`` bits of
the target's hash, one base-q digit per hop (``d - 1`` hops when q is the
same along the path). Phase two walks the q-neighborhood greedily toward the
target position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

from .hashspace import base_transform, bits_of_point
from .protocol import Envelope, NodeRef, NodeState, Search, target

SUCCESS = "success"
FAILURE = "failure"


@dataclass(frozen=True)
class SearchResult:
    outcome: str
    path: Tuple[NodeRef, ...]
    search_id: int = 0

    @property
    def hops(self) -> int:
        return len(self.path) - 1

    @property
    def ok(self) -> bool:
        return self.outcome == SUCCESS


def initiate_search(s: NodeState, t: int, search_id: int = 0) -> Envelope:
    """Search request for id ``t``, addressed to the initiating node."""
    d = s.params.d
    r0 = (d - 1) * s.top_level
    return Envelope(s.me, Search(t, r0, d - 1, (), search_id))


def on_search(s: NodeState, t: int, r: int, rem_hops: int,
              trace: Tuple[NodeRef, ...] = (), search_id: int = 0
              ) -> Union[List[Envelope], SearchResult]:
    me = s.me
    if not trace or trace[-1] != me:
        trace = trace + (me,)
    if me.id == t:
        return SearchResult(SUCCESS, trace, search_id)
    ht = s.params.hasher(t)
    while True:
        # phase one prepends the bits (r - k, r] of h(t); k is the local
        # log(2q), shortened to r, so mixed q along the path stays aligned
        log_q = (2 * s.q).bit_length() - 1
        if r > 0:
            k = min(log_q, r, 128)
            digit = base_transform(bits_of_point(ht, min(r, 128))[-k:], 1 << k).digits[-1]
            goal = target(me.point, k, digit)
            u = _closest_edge(s, k, goal)
            r, rem_hops = r - k, max(rem_hops - 1, 0)
            if u.key != me.key:
                return [Envelope(u, Search(t, r, rem_hops, trace, search_id))]
            # the hop lands on this node; keep going locally
            continue
        u = _closest_in_q(s, ht)
        if u is not None and abs(u.point - ht) < abs(me.point - ht):
            return [Envelope(u, Search(t, -1, 0, trace, search_id))]
        return SearchResult(FAILURE, trace, search_id)


def _closest_edge(s: NodeState, level: int, goal: int) -> NodeRef:
    cands = [w for (i, _), w in s.db.items() if i == level]
    cands.extend(s.qset)
    cands.extend(w for w in (s.left, s.right) if w is not None)
    cands.append(s.me)
    return min(cands, key=lambda w: (abs(w.point - goal), w.key))


def _closest_in_q(s: NodeState, ht: int) -> Optional[NodeRef]:
    if not s.qset:
        return None
    return min(s.qset, key=lambda w: (abs(w.point - ht), w.key))


def handle_search(s: NodeState, body: Search):
    return on_search(s, body.t, body.r, body.rem_hops, body.trace, body.search_id)
