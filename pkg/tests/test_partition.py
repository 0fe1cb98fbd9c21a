import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastckpt.partition import PlanError, Topology, WriterStrategy, balance, plan, select_writers

GiB = 2**30


def test_fig4_replica_uses_all_ranks():
    topo = Topology(node_count=2, sockets_per_node=1, ranks_per_node=2)
    assert select_writers(range(4), WriterStrategy.replica(), topo) == [0, 1, 2, 3]


def test_fig4_socket_picks_one_rank_per_node():
    topo = Topology(node_count=2, sockets_per_node=1, ranks_per_node=2)
    assert select_writers(range(4), WriterStrategy.socket(), topo) == [0, 2]


def test_eight_nodes_two_sockets_sixteen_ranks():
    topo = Topology(node_count=8, sockets_per_node=2, ranks_per_node=2)
    writers = select_writers(range(16), WriterStrategy.socket(), topo)
    assert len(writers) == 16
    per_node = [sum(1 for w in writers if topo.node_of(w) == n) for n in range(8)]
    assert per_node == [2] * 8


def test_socket_layout_of_dgx2_like_node():
    topo = Topology(1, 2, 16)
    assert [topo.socket_of(r) for r in (0, 7, 8, 15)] == [0, 0, 1, 1]
    assert select_writers(range(16), WriterStrategy.socket(), topo) == [0, 8]


def test_socket_uneven_split():
    topo = Topology(1, 2, 3)
    assert [topo.socket_of(r) for r in range(3)] == [0, 0, 1]


def test_fixed_round_robin_extension():
    topo = Topology(1, 2, 8)
    assert select_writers(range(8), WriterStrategy.fixed(2), topo) == [0, 4]
    assert select_writers(range(8), WriterStrategy.fixed(3), topo) == [0, 1, 4]
    assert select_writers(range(8), WriterStrategy.fixed(5), topo) == [0, 1, 2, 4, 5]
    assert select_writers(range(8), WriterStrategy.fixed(1), topo) == [0]


def test_fixed_too_many():
    with pytest.raises(PlanError):
        select_writers(range(4), WriterStrategy.fixed(5), Topology(1, 1, 4))


def test_invalid_inputs():
    with pytest.raises(PlanError):
        Topology(1, 4, 2)
    with pytest.raises(PlanError):
        select_writers([], WriterStrategy.replica(), Topology())
    with pytest.raises(PlanError):
        select_writers([0, 0], WriterStrategy.replica(), Topology(1, 1, 2))
    with pytest.raises(PlanError):
        select_writers([5], WriterStrategy.replica(), Topology(1, 1, 2))
    with pytest.raises(PlanError):
        WriterStrategy.fixed(0)
    with pytest.raises(PlanError):
        balance(10, 0)


@pytest.mark.parametrize("text, expected", [("replica", "replica"), ("SOCKET", "socket"), ("fixed:3", "fixed:3")])
def test_strategy_parse(text, expected):
    assert str(WriterStrategy.parse(text)) == expected


@pytest.mark.parametrize("text", ["fixed", "fixed:x", "rack", "socket:2"])
def test_strategy_parse_errors(text):
    with pytest.raises(PlanError):
        WriterStrategy.parse(text)


def test_balance_examples():
    assert balance(10, 3) == [4, 3, 3]
    assert balance(0, 4) == [0, 0, 0, 0]
    assert balance(2**31 + 1, 2) == [2**30 + 1, 2**30]


def test_plan_replica_ten_gib():
    topo = Topology(2, 1, 2)
    p = plan(10 * GiB, range(4), WriterStrategy.replica(), topo)
    assert [(a.offset, a.length) for a in p.assignments] == [(i * 5 * GiB // 2, 5 * GiB // 2) for i in range(4)]


@pytest.mark.parametrize("strategy", [WriterStrategy.replica(), WriterStrategy.socket(), WriterStrategy.fixed(1)])
def test_single_rank_is_baseline(strategy):
    p = plan(12345, [0], strategy, Topology())
    assert [tuple(a) for a in p.assignments] == [(0, 0, 12345)]


def test_plan_is_communication_free():
    args = (987654321, list(range(32)), WriterStrategy.socket(), Topology(4, 2, 8))
    plans = [plan(*args) for _ in range(4)]
    assert all(p == plans[0] for p in plans)
    assert plans[0].to_json() == plans[3].to_json()
    assert plans[0].range_of(8) == (plans[0].assignments[2].offset, plans[0].assignments[3].offset)
    assert plans[0].range_of(1) is None


@st.composite
def planning_inputs(draw):
    nodes = draw(st.integers(1, 8))
    sockets = draw(st.integers(1, 4))
    rpn = draw(st.integers(sockets, 16))
    topo = Topology(nodes, sockets, rpn)
    ranks = draw(st.sets(st.integers(0, topo.world_size - 1), min_size=1))
    kind = draw(st.sampled_from(["replica", "socket", "fixed"]))
    strategy = WriterStrategy.fixed(draw(st.integers(1, len(ranks)))) if kind == "fixed" else WriterStrategy.parse(kind)
    return draw(st.integers(0, 2**40)), sorted(ranks), strategy, topo


@given(planning_inputs())
def test_plan_properties(inputs):
    total, ranks, strategy, topo = inputs
    p = plan(total, ranks, strategy, topo)
    pos = 0
    for a in p.assignments:
        assert a.offset == pos
        pos += a.length
    assert pos == total
    lengths = [a.length for a in p.assignments]
    assert max(lengths) - min(lengths) <= 1
    assert set(p.writers) <= set(ranks)
    if strategy.kind.value == "socket":
        locs = [topo.location(w) for w in p.writers]
        assert len(locs) == len(set(locs))
        assert set(locs) == {topo.location(r) for r in ranks}
