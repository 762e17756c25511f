import random

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from procbench import tree as pt

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

LABEL_ALPHABET = st.text(
    alphabet=st.sampled_from("abcxyz ABC'\\-_()+*,>"),
    min_size=1,
    max_size=8,
).filter(lambda s: s.strip())


def _node(children):
    ops = st.sampled_from([pt.SEQ, pt.XOR, pt.AND])
    nary = st.tuples(ops, st.lists(children, min_size=1, max_size=3)).map(lambda t: pt.ProcessTree(t[0], tuple(t[1])))
    binary = st.tuples(children, children).map(lambda t: pt.loop(*t))
    return nary | binary


# arbitrary trees, labels may repeat and contain quotes or operator characters
any_trees = st.recursive(
    LABEL_ALPHABET.map(pt.leaf) | st.just(pt.tau()),
    _node,
    max_leaves=10,
)


def small_tree(seed: int, max_labels: int = 6, max_depth: int = 4, tau_prob: float = 0.2):
    rng = random.Random(seed)
    n = rng.randint(1, max_labels)
    return pt.random_tree(rng, [f"act {chr(97 + k)}" for k in range(n)], max_depth=max_depth, tau_prob=tau_prob)


generated_trees = st.integers(0, 10**9).map(small_tree)


@pytest.fixture
def po_tree():
    return pt.parse_tree("->( 'create PO', X( 'reject PO', ->( 'approve PO', 'create invoice' ) ) )")
