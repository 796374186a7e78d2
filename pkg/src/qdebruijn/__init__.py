"""Self-stabilizing q-ary d-dimensional de Bruijn overlay: protocol and simulator."""

from .hashspace import HashPoint, hash_id
from .protocol import NodeRef, NodeState, ProtocolParams
from .routing import SearchResult
from .simulator import ScenarioConfig, World, build_initial_world

__all__ = [
    "HashPoint", "hash_id", "NodeRef", "NodeState", "ProtocolParams",
    "SearchResult", "ScenarioConfig", "World", "build_initial_world",
]
__version__ = "0.1.0"
