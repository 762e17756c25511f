"""Process trees: text notation, bounded language enumeration, directly-follows structure.

Grammar (one tree per string)::

    tree := leaf | op '(' tree (',' tree)* ')'
    op   := '->' | 'X' | '+' | '*'
    leaf := quoted-label | 'tau'

Labels are single-quoted; a backslash escapes the next character.
"""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .behavior import Dfg, EventLog, Trace

SEQ = "->"
XOR = "X"
AND = "+"
LOOP = "*"
LEAF = "leaf"
TAU = "tau"
OPERATORS = (SEQ, XOR, AND, LOOP)

DEFAULT_LOOP_REDO_BOUND = 2
DEFAULT_LANGUAGE_CAP = 5000


class TreeSyntaxError(ValueError):
    def __init__(self, message: str, offset: int, expected: Iterable[str]):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        super().__init__(f"{message} at byte {offset}; expected one of {', '.join(self.expected)}")


class TreeArityError(ValueError):
    pass


class LanguageTooLarge(RuntimeError):
    def __init__(self, cap: int):
        self.cap = cap
        super().__init__(f"language exceeds the cap of {cap} traces")


@dataclass(frozen=True)
class ProcessTree:
    op: str
    children: tuple["ProcessTree", ...] = ()
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.op == LEAF:
            if self.label is None or not self.label.strip():
                raise ValueError("activity label must be non-empty")
            if self.children:
                raise TreeArityError("a leaf has no children")
        elif self.op == TAU:
            if self.children:
                raise TreeArityError("tau has no children")
        elif self.op == LOOP:
            if len(self.children) != 2:
                raise TreeArityError(f"loop needs exactly 2 children, got {len(self.children)}")
        elif self.op in (SEQ, XOR, AND):
            if not self.children:
                raise TreeArityError(f"operator {self.op} needs at least one child")
        else:
            raise ValueError(f"unknown node kind {self.op!r}")

    @property
    def is_leaf(self) -> bool:
        return self.op in (LEAF, TAU)

    def alphabet(self) -> frozenset[str]:
        if self.op == LEAF:
            return frozenset([self.label])
        return frozenset().union(*(c.alphabet() for c in self.children)) if self.children else frozenset()

    def __str__(self) -> str:
        return serialize_tree(self)


def leaf(label: str) -> ProcessTree:
    return ProcessTree(LEAF, label=label)


def tau() -> ProcessTree:
    return ProcessTree(TAU)


def seq(*children: ProcessTree) -> ProcessTree:
    return ProcessTree(SEQ, children)


def xor(*children: ProcessTree) -> ProcessTree:
    return ProcessTree(XOR, children)


def par(*children: ProcessTree) -> ProcessTree:
    return ProcessTree(AND, children)


def loop(do: ProcessTree, redo: ProcessTree) -> ProcessTree:
    return ProcessTree(LOOP, (do, redo))


# -- text notation -------------------------------------------------------------

def quote_label(label: str) -> str:
    return "'" + label.replace("\\", "\\\\").replace("'", "\\'") + "'"


def serialize_tree(tree: ProcessTree) -> str:
    if tree.op == LEAF:
        return quote_label(tree.label)
    if tree.op == TAU:
        return "tau"
    return f"{tree.op}( " + ", ".join(serialize_tree(c) for c in tree.children) + " )"


class _Parser:
    _TREE_START = ("'", "tau", "->", "X", "+", "*")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def offset(self, pos: int | None = None) -> int:
        return len(self.text[: self.pos if pos is None else pos].encode("utf-8"))

    def fail(self, message: str, expected, pos: int | None = None):
        raise TreeSyntaxError(message, self.offset(pos), expected)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek_found(self) -> str:
        return "end of input" if self.pos >= len(self.text) else repr(self.text[self.pos])

    def expect(self, token: str):
        self.skip_ws()
        if not self.text.startswith(token, self.pos):
            self.fail(f"unexpected {self.peek_found()}", [token])
        self.pos += len(token)

    def parse(self) -> ProcessTree:
        tree = self.tree()
        self.skip_ws()
        if self.pos != len(self.text):
            self.fail(f"trailing {self.peek_found()}", ["end of input"])
        return tree

    def tree(self) -> ProcessTree:
        self.skip_ws()
        text, pos = self.text, self.pos
        if text.startswith("'", pos):
            return self.quoted()
        if text.startswith("tau", pos) and not _is_word(text, pos + 3):
            self.pos += 3
            return tau()
        for op in OPERATORS:
            if text.startswith(op, pos):
                start = pos
                self.pos += len(op)
                self.expect("(")
                children = [self.tree()]
                while True:
                    self.skip_ws()
                    if self.text.startswith(",", self.pos):
                        self.pos += 1
                        children.append(self.tree())
                    elif self.text.startswith(")", self.pos):
                        self.pos += 1
                        break
                    else:
                        self.fail(f"unexpected {self.peek_found()}", [",", ")"])
                if op == LOOP and len(children) != 2:
                    raise TreeArityError(
                        f"loop at byte {self.offset(start)} needs exactly 2 children, got {len(children)}"
                    )
                return ProcessTree(op, tuple(children))
        self.fail(f"unexpected {self.peek_found()}", self._TREE_START)

    def quoted(self) -> ProcessTree:
        start = self.pos
        self.pos += 1
        chars = []
        while self.pos < len(self.text):
            ch = self.text[self.pos]
            if ch == "\\":
                if self.pos + 1 >= len(self.text):
                    break
                chars.append(self.text[self.pos + 1])
                self.pos += 2
            elif ch == "'":
                self.pos += 1
                label = "".join(chars)
                if not label.strip():
                    self.fail("empty activity label", ["non-empty label"], start)
                return leaf(label)
            else:
                chars.append(ch)
                self.pos += 1
        self.fail("unterminated label", ["'"])


def _is_word(text: str, pos: int) -> bool:
    return pos < len(text) and (text[pos].isalnum() or text[pos] == "_")


def parse_tree(text: str) -> ProcessTree:
    """Parse the process-tree notation; raises TreeSyntaxError or TreeArityError."""
    return _Parser(text).parse()


# -- behaviour -----------------------------------------------------------------

def _interleavings(a: Trace, b: Trace):
    n = len(a) + len(b)
    for slots in itertools.combinations(range(n), len(a)):
        out, ia, ib = [], 0, 0
        slot_set = set(slots)
        for k in range(n):
            if k in slot_set:
                out.append(a[ia])
                ia += 1
            else:
                out.append(b[ib])
                ib += 1
        yield tuple(out)


def _language(tree: ProcessTree, bound: int, cap: int) -> set[Trace]:
    op = tree.op
    if op == LEAF:
        return {(tree.label,)}
    if op == TAU:
        return {()}
    parts = [_language(c, bound, cap) for c in tree.children]
    if op == XOR:
        result = set().union(*parts)
    elif op == SEQ:
        result = {()}
        for part in parts:
            result = _concat(result, part, cap)
    elif op == AND:
        result = {()}
        for part in parts:
            merged = set()
            for s in result:
                for t in part:
                    for x in _interleavings(s, t):
                        merged.add(x)
                        if len(merged) > cap:
                            raise LanguageTooLarge(cap)
            result = merged
    else:
        do, redo = parts
        result = set(do)
        frontier = set(do)
        for _ in range(bound):
            frontier = _concat(_concat(frontier, redo, cap), do, cap)
            result |= frontier
            _check(result, cap)
    _check(result, cap)
    return result


def _concat(left: set, right: set, cap: int) -> set:
    # checked per prefix so an oversized product is abandoned early
    out = set()
    for s in left:
        out.update(s + t for t in right)
        _check(out, cap)
    return out


def _check(traces: set, cap: int):
    if len(traces) > cap:
        raise LanguageTooLarge(cap)


def enumerate_language(
    tree: ProcessTree,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
) -> EventLog:
    """All traces of ``tree`` with each loop redoing at most ``loop_redo_bound`` times, sorted."""
    if loop_redo_bound < 0:
        raise ValueError("loop_redo_bound must be >= 0")
    return EventLog(tuple(sorted(_language(tree, loop_redo_bound, cap))))


def dfg_of_tree(tree: ProcessTree) -> Dfg:
    """Directly-follows relation of the unbounded tree language, computed structurally.

    Used where bounded enumeration would exceed the language cap; for trees
    whose loops do not need more than the configured redo bound to expose
    every adjacency, it coincides with ``dfg_of_log(enumerate_language(tree))``.
    """
    _, _, _, edges = _df_summary(tree)
    return Dfg(tree.alphabet(), frozenset(edges))


def _df_summary(tree: ProcessTree):
    # (nullable, start activities, end activities, edges)
    op = tree.op
    if op == LEAF:
        return False, {tree.label}, {tree.label}, set()
    if op == TAU:
        return True, set(), set(), set()
    subs = [_df_summary(c) for c in tree.children]
    edges = set().union(*(s[3] for s in subs))
    if op == XOR:
        return (
            any(s[0] for s in subs),
            set().union(*(s[1] for s in subs)),
            set().union(*(s[2] for s in subs)),
            edges,
        )
    if op == SEQ:
        for i, (_, _, end_i, _) in enumerate(subs):
            for j in range(i + 1, len(subs)):
                edges |= {(x, y) for x in end_i for y in subs[j][1]}
                if not subs[j][0]:
                    break
        start, end = set(), set()
        for s in subs:
            start |= s[1]
            if not s[0]:
                break
        for s in reversed(subs):
            end |= s[2]
            if not s[0]:
                break
        return all(s[0] for s in subs), start, end, edges
    if op == AND:
        alphabets = [c.alphabet() for c in tree.children]
        for i, a_i in enumerate(alphabets):
            for j, a_j in enumerate(alphabets):
                if i != j:
                    edges |= {(x, y) for x in a_i for y in a_j}
        return (
            all(s[0] for s in subs),
            set().union(*(s[1] for s in subs)),
            set().union(*(s[2] for s in subs)),
            edges,
        )
    (do_null, do_start, do_end, _), (redo_null, redo_start, redo_end, _) = subs
    # do (redo do)*: chains may skip nullable parts.
    edges |= {(x, y) for x in do_end for y in redo_start}
    edges |= {(x, y) for x in redo_end for y in do_start}
    if redo_null:
        edges |= {(x, y) for x in do_end for y in do_start}
    if do_null:
        edges |= {(x, y) for x in redo_end for y in redo_start}
    start = set(do_start) | (redo_start if do_null else set())
    end = set(do_end) | (redo_end if do_null else set())
    return do_null, start, end, edges


# -- random trees ----------------------------------------------------------------

def random_tree(
    rng: random.Random,
    labels: Sequence[str],
    max_depth: int = 4,
    tau_prob: float = 0.1,
) -> ProcessTree:
    """A random tree using each of ``labels`` exactly once, depth at most ``max_depth``."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    labels = list(labels)
    rng.shuffle(labels)
    return _random_subtree(rng, labels, 1, max_depth, tau_prob)


def _random_subtree(rng, labels, depth, max_depth, tau_prob) -> ProcessTree:
    if len(labels) == 1:
        if depth < max_depth and rng.random() < tau_prob:
            # optional or repeatable single activity
            if rng.random() < 0.5:
                return xor(leaf(labels[0]), tau())
            return loop(leaf(labels[0]), tau())
        return leaf(labels[0])
    if depth + 1 >= max_depth:
        op = rng.choice((SEQ, XOR, AND))
        return ProcessTree(op, tuple(leaf(a) for a in labels))
    op = rng.choice((SEQ, SEQ, XOR, AND, LOOP))
    if op == LOOP:
        cut = rng.randint(1, len(labels) - 1)
        do = _random_subtree(rng, labels[:cut], depth + 1, max_depth, tau_prob)
        redo = _random_subtree(rng, labels[cut:], depth + 1, max_depth, tau_prob)
        return loop(do, redo)
    k = rng.randint(2, min(3, len(labels)))
    cuts = sorted(rng.sample(range(1, len(labels)), k - 1))
    groups = [labels[i:j] for i, j in zip([0] + cuts, cuts + [len(labels)])]
    children = [_random_subtree(rng, g, depth + 1, max_depth, tau_prob) for g in groups]
    if op == XOR and depth + 1 < max_depth and rng.random() < tau_prob:
        children.append(tau())
    return ProcessTree(op, tuple(children))
