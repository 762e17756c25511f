import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from procbench.behavior import (
    FOLLOWS,
    PARALLEL,
    PRECEDES,
    UNRELATED,
    Dfg,
    EventLog,
    dfg_of_log,
    ef_pairs,
    footprint_of_dfg,
)
from procbench.tree import enumerate_language

from oracles import naive_footprint

ACTS = ["a", "b", "c", "d", "e"]
traces = st.lists(st.sampled_from(ACTS), max_size=7).map(tuple)
edge_sets = st.sets(st.tuples(st.sampled_from(ACTS), st.sampled_from(ACTS)), max_size=15)


def test_ef_pairs_examples():
    assert ef_pairs(("a", "b", "c")) == {("a", "b"), ("a", "c"), ("b", "c")}
    assert ef_pairs(("a",)) == set()
    assert ("register application", "approve application") in ef_pairs(
        ("register application", "review application", "approve application")
    )


@given(traces)
def test_ef_pairs_contains_adjacent_pairs(trace):
    pairs = ef_pairs(trace)
    assert {(trace[i], trace[i + 1]) for i in range(len(trace) - 1)} <= pairs
    if len(set(trace)) == len(trace):
        n = len(trace)
        assert len(pairs) == n * (n - 1) // 2


def test_dfg_examples():
    assert dfg_of_log([("a", "b")]).edges == {("a", "b")}
    assert dfg_of_log([("a", "b"), ("b", "a")]).edges == {("a", "b"), ("b", "a")}


def test_po_dfg(po_tree):
    dfg = dfg_of_log(enumerate_language(po_tree))
    assert ("create PO", "approve PO") in dfg.edges
    assert ("create PO", "reject PO") in dfg.edges
    assert ("reject PO", "create invoice") not in dfg.edges


@given(st.lists(traces, max_size=6), st.randoms())
def test_dfg_permutation_invariant(log, rnd):
    shuffled = list(log)
    rnd.shuffle(shuffled)
    assert dfg_of_log(log) == dfg_of_log(shuffled)


@given(st.lists(traces, max_size=6))
def test_event_log_alphabet(log):
    el = EventLog(log)
    assert el.alphabet == {a for t in log for a in t}
    assert dfg_of_log(el).nodes == el.alphabet


def test_dfg_rejects_dangling_edges():
    with pytest.raises(ValueError):
        Dfg(frozenset({"a"}), frozenset({("a", "b")}))


def test_footprint_examples():
    fp = footprint_of_dfg(Dfg({"a", "b"}, {("a", "b")}), ["a", "b"])
    assert fp[("a", "b")] == PRECEDES and fp[("b", "a")] == FOLLOWS
    assert footprint_of_dfg(Dfg({"a", "b"}, {("a", "b"), ("b", "a")}), ["a", "b"])[("a", "b")] == PARALLEL
    empty = footprint_of_dfg(Dfg({"a", "b"}), ["a", "b"])
    assert {rel for _, rel in empty.off_diagonal()} == {UNRELATED}


def test_footprint_ignores_edges_outside_alphabet():
    fp = footprint_of_dfg(Dfg({"a", "b", "z"}, {("a", "z"), ("z", "b")}), ["a", "b"])
    assert fp[("a", "b")] == UNRELATED
    assert set(fp.alphabet) == {"a", "b"}


@given(edge_sets, st.sets(st.sampled_from(ACTS), min_size=1))
def test_footprint_matches_naive(edges, alphabet):
    nodes = {x for e in edges for x in e} | alphabet
    fp = footprint_of_dfg(Dfg(nodes, edges), alphabet)
    assert dict(fp.cells) == naive_footprint(edges, alphabet)


@given(edge_sets)
def test_footprint_antisymmetry(edges):
    nodes = {x for e in edges for x in e} | set(ACTS)
    fp = footprint_of_dfg(Dfg(nodes, edges), ACTS)
    mirror = {PRECEDES: FOLLOWS, FOLLOWS: PRECEDES, PARALLEL: PARALLEL, UNRELATED: UNRELATED}
    for x, y in itertools.product(ACTS, ACTS):
        assert fp[(y, x)] == mirror[fp[(x, y)]]
    for x in ACTS:
        assert fp[(x, x)] in (PARALLEL, UNRELATED)
