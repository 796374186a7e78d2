"""Small builders shared by the test modules."""

from fractions import Fraction

from qdebruijn.hashspace import HashPoint
from qdebruijn.protocol import NodeRef, NodeState, ProtocolParams
from qdebruijn.simulator import ScenarioConfig, even_points


def pt(x) -> HashPoint:
    """Exact point from a decimal string or Fraction, e.g. pt('0.625')."""
    return HashPoint.from_fraction(Fraction(x))


def ref_at(node_id: int, x) -> NodeRef:
    return NodeRef.make(node_id, pt(x))


def node_at(node_id: int, x, c: int = 3, d: int = 2, q: int = 1) -> NodeState:
    s = NodeState(ref_at(node_id, x), ProtocolParams(c, d))
    s.q = q
    return s


def even_config(n: int = 16, d: int = 2, c: int = 3, topology: str = "legitimate_gdb",
                seed: int = 0) -> ScenarioConfig:
    """``n`` nodes with id j at position j/n."""
    return ScenarioConfig(n=n, d=d, c=c, seed=seed, topology=topology,
                          hash_override=even_points(n))


def all_refs(s: NodeState, out=()) -> set:
    """Ids a node can reach: stored variables plus outbound envelopes."""
    from qdebruijn.protocol import message_refs
    ids = {r.id for r in s.neighbors()}
    for env in out:
        ids.add(env.to.id)
        ids.update(r.id for r in message_refs(env.body))
    return ids


def at(x) -> int:
    """Position for a decimal like '0.6', rounded down to 64 fraction bits."""
    return int(Fraction(x) * (1 << 64)) << 64


def ref_near(node_id: int, x) -> NodeRef:
    return NodeRef.make(node_id, at(x))


def node_near(node_id: int, x, c: int = 3, d: int = 2, q: int = 1) -> NodeState:
    s = NodeState(ref_near(node_id, x), ProtocolParams(c, d))
    s.q = q
    return s
