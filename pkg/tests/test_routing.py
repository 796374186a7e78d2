import pytest
from hypothesis import given, settings, strategies as st

from helpers import node_at, ref_at
from qdebruijn.hashspace import hash_id
from qdebruijn.protocol import Envelope, NodeRef, NodeState, ProtocolParams, Search
from qdebruijn.routing import FAILURE, SUCCESS, SearchResult, initiate_search, on_search
from qdebruijn.simulator import ScenarioConfig, build_initial_world


@pytest.fixture(scope="module")
def hashed64():
    return build_initial_world(ScenarioConfig(n=64, d=2, c=3, seed=1, topology="legitimate_gdb"))


@pytest.fixture(scope="module")
def hashed64_d3():
    return build_initial_world(ScenarioConfig(n=64, d=3, c=3, seed=1, topology="legitimate_gdb"))


def test_search_result_properties():
    r = SearchResult(SUCCESS, (ref_at(1, "0.25"), ref_at(2, "0.5")))
    assert r.ok and r.hops == 1
    assert not SearchResult(FAILURE, (ref_at(1, "0.25"),)).ok


def test_initiate_search_addresses_self_with_full_budget():
    s = node_at(0, "0.5", d=3, q=2)
    env = initiate_search(s, 7, search_id=4)
    assert env.to == s.me
    assert env.body == Search(7, 2 * s.top_level, 2, (), 4)


def test_search_for_self_succeeds_without_hops():
    s = node_at(3, "0.5")
    res = on_search(s, 3, 0, 1)
    assert res.ok and res.hops == 0 and res.path == (s.me,)


def test_isolated_node_fails_for_other_id():
    s = node_at(3, "0.5")
    res = on_search(s, 99, 0, 0)
    assert res.outcome == FAILURE and res.path == (s.me,)


def test_search_steps_greedily_through_q():
    ht = hash_id(1)
    s = NodeState(NodeRef.make(0, ht ^ (1 << 127)), ProtocolParams())
    near = NodeRef.make(1, ht)
    s.qset = sorted([near, NodeRef.make(2, (ht + (1 << 126)) % (1 << 128))])
    out = on_search(s, 1, -1, 0)
    assert out == [Envelope(near, Search(1, -1, 0, (s.me,), 0))]


def test_phase_one_takes_bits_ending_at_r():
    from qdebruijn.hashspace import bits_of_point, de_bruijn_target
    s = node_at(0, "0.5", q=4)  # log(2q) = 3
    bits = bits_of_point(hash_id(7), 4)
    digit = bits[1] * 4 + bits[2] * 2 + bits[3]
    goal = de_bruijn_target(s.me.point, 3, digit)
    s.db[(3, digit)] = NodeRef.make(9, goal)
    (env,) = on_search(s, 7, 4, 1)
    assert env.to.id == 9 and env.body.r == 1


def test_phase_one_shortens_last_step_to_remaining_bits():
    from qdebruijn.hashspace import bits_of_point, de_bruijn_target
    s = node_at(0, "0.5", q=4)
    bit = bits_of_point(hash_id(7), 1)[0]
    goal = de_bruijn_target(s.me.point, 1, bit)
    s.db[(1, bit)] = NodeRef.make(9, goal)
    (env,) = on_search(s, 7, 1, 0)
    assert env.to.id == 9 and env.body.r == 0


def test_uniform_q_spends_d_minus_one_hops_in_phase_one(even16):
    # EVEN16: from 0.25 toward id 11 (at 11/16), one hop to 9/16 then greedy
    res = even16.search(4, 11)
    assert [r.id for r in res.path] == [4, 9, 11]


def test_every_pair_found_in_even_world(even16):
    for a in even16.nodes:
        for b in even16.nodes:
            res = even16.search(a, b)
            assert res.ok, (a, b, res)
            assert res.path[0].id == a and res.path[-1].id == b


def test_absent_id_fails(even16):
    res = even16.search(0, 10_000)
    assert res.outcome == FAILURE
    assert len({r.id for r in res.path}) == len(res.path)  # no revisits


@settings(max_examples=200)
@given(st.data())
def test_search_succeeds_between_random_pairs(hashed64, data):
    ids = sorted(hashed64.nodes)
    a, b = data.draw(st.sampled_from(ids)), data.draw(st.sampled_from(ids))
    res = hashed64.search(a, b)
    assert res.ok
    assert res.hops <= 2 * 64  # a walk never revisits a node


@settings(max_examples=100)
@given(st.data())
def test_search_succeeds_in_three_dimensions(hashed64_d3, data):
    ids = sorted(hashed64_d3.nodes)
    a, b = data.draw(st.sampled_from(ids)), data.draw(st.sampled_from(ids))
    assert hashed64_d3.search(a, b).ok


def test_search_paths_are_short_in_legitimate_world(hashed64):
    hops = [hashed64.search(a, b).hops for a in range(0, 64, 3) for b in range(64)]
    assert max(hops) <= 12
