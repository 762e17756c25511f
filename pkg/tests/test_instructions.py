import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from procbench import instructions as ins
from procbench.evaluation import parse_output
from procbench.instructions import (
    DEFAULT_PROPORTIONS,
    NEG_INV,
    NORMAL,
    POS_INV,
    InstructionInstance,
    InversionUnsupported,
    MissingBank,
    ProportionError,
    compile_instructions,
    invert,
    load_bank,
    select_formulation,
)
from procbench.tasks import ANOMALOUS, ASAD, SDFD, SNAP, SPTD, TASKS, TSAD, VALID, TaskInstance, generate_tasks
from procbench.tree import enumerate_language, leaf, parse_tree, seq

from oracles import accepts, continuations, ef_relation, playout_language
from test_tasks import APPLICATION, toy_corpus


@pytest.fixture(scope="module")
def toy_tasks():
    result = generate_tasks(toy_corpus(), 7)
    return [i for t in TASKS for i in result.instances[t]]


@pytest.fixture(scope="module")
def toy_compiled(toy_tasks):
    return compile_instructions(toy_tasks, rng_seed=7)


# -- banks ---------------------------------------------------------------------------

@pytest.mark.parametrize("task", TASKS)
def test_every_allowed_bank_has_six_standard_templates(task):
    for variant in ins.ALLOWED_VARIANTS[task]:
        bank = load_bank(task, variant)
        standard = [f for f in bank if not f.negative_instruction]
        assert [f.template_id for f in standard] == [1, 2, 3, 4, 5, 6]
        assert all(f.output_constraint and f.output_constraint in f.template for f in bank)


def test_negative_instruction_templates_live_in_snap_normal_bank():
    negatives = [f for f in load_bank(SNAP, NORMAL) if f.negative_instruction]
    assert [f.template_id for f in negatives] == [7, 8]
    for task in TASKS:
        for variant in ins.ALLOWED_VARIANTS[task]:
            if (task, variant) != (SNAP, NORMAL):
                assert not any(f.negative_instruction for f in load_bank(task, variant))


@pytest.mark.parametrize("task,variant", [(SPTD, NEG_INV), (SPTD, POS_INV), (SDFD, POS_INV)])
def test_disallowed_banks(task, variant):
    with pytest.raises(MissingBank):
        load_bank(task, variant)
    with pytest.raises(MissingBank):
        select_formulation(task, variant, random.Random(0))


def test_asad_bank_contains_published_phrasings():
    texts = [f.template for f in load_bank(ASAD, NORMAL)]
    constraints = {f.output_constraint for f in load_bank(ASAD, NORMAL)}
    assert "Provide either True or False as the answer and nothing else." in constraints
    assert any("Is the order (first: {act1}, second: {act2}) acceptable" in t for t in texts)


def test_select_formulation_uniform_and_seeded():
    rng = random.Random(4)
    draws = Counter(select_formulation(TSAD, NORMAL, rng).template_id for _ in range(6000))
    assert set(draws) == {1, 2, 3, 4, 5, 6}
    assert all(abs(c - 1000) < 150 for c in draws.values())
    a = [select_formulation(SNAP, NORMAL, random.Random(9)).template_id for _ in range(5)]
    b = [select_formulation(SNAP, NORMAL, random.Random(9)).template_id for _ in range(5)]
    assert a == b


def test_custom_template_dir(tmp_path):
    (tmp_path / "sptd.normal.txt").write_text("=== 1\nDraw a tree over {activities}.\nconstraint: Tree only.\n")
    bank = load_bank(SPTD, NORMAL, tmp_path)
    assert len(bank) == 1 and bank[0].render({"activities": "'a'"}).startswith("Draw a tree over 'a'.")
    with pytest.raises(MissingBank):
        load_bank(TSAD, NORMAL, tmp_path)
    (tmp_path / "tsad.normal.txt").write_text("=== 1\nno constraint here\n")
    with pytest.raises(ValueError):
        load_bank(TSAD, NORMAL, tmp_path)


# -- inversion ---------------------------------------------------------------------------

def _asad(pair, gold):
    return TaskInstance(ASAD, "app", tuple(sorted(APPLICATION.alphabet())), {"pair": list(pair)}, gold)


def test_asad_positive_inversion_example():
    ctx, out, variant = invert(_asad(("register application", "approve application"), VALID), random.Random(0))
    assert variant == POS_INV
    assert "Given activity: 'register application'" in ctx
    assert out == "approve application"


def test_asad_negative_inversion_example():
    ctx, out, variant = invert(_asad(("approve application", "review application"), ANOMALOUS), random.Random(0))
    assert variant == NEG_INV
    assert "Given activity: 'approve application'" in ctx
    assert out == "review application"


def test_tsad_inversion_follows_source_label():
    lang = enumerate_language(APPLICATION)
    valid = TaskInstance(TSAD, "app", tuple(sorted(APPLICATION.alphabet())), {"trace": list(lang.traces[0])}, VALID)
    bad = TaskInstance(TSAD, "app", valid.activity_set, {"trace": ["approve application"]}, ANOMALOUS)
    assert invert(valid, random.Random(0))[2] == POS_INV
    assert invert(bad, random.Random(0))[2] == NEG_INV


def test_sptd_has_no_inversion():
    inst = TaskInstance(SPTD, "m", ("a",), {}, "'a'")
    with pytest.raises(InversionUnsupported):
        invert(inst, random.Random(0))


def test_sdfd_negative_inversion_lists_missing_relations():
    tree = seq(leaf("a"), leaf("b"))
    inst = TaskInstance(SDFD, "m", ("a", "b"), {}, {"edges": [["a", "b"]]})
    ctx, out, variant = invert(inst, random.Random(0))
    assert variant == NEG_INV
    parsed = parse_output(SDFD, out, inst.activity_set, NEG_INV).value
    assert parsed.edges == {("a", "a"), ("b", "a"), ("b", "b")}
    assert not parsed.edges & {("a", "b")}
    assert tree.alphabet() == {"a", "b"}


def test_snap_inversion_draws_are_even():
    p = {"prefix": ["a"], "complete": False, "not_next": ["a"]}
    inst = TaskInstance(SNAP, "m", ("a", "b"), p, "b")
    rng = random.Random(2024)
    counts = Counter(ins.inversion_variant(inst, rng) for _ in range(10_000))
    assert abs(counts[POS_INV] / 10_000 - 0.5) <= 0.02


def test_snap_negative_inversion_needs_an_impossible_successor():
    p = {"prefix": ["a"], "complete": False, "not_next": []}
    inst = TaskInstance(SNAP, "m", ("a", "b"), p, "b")
    assert not ins.can_invert(inst, NEG_INV)
    for seed in range(20):
        assert invert(inst, random.Random(seed))[2] == POS_INV


# -- compilation ---------------------------------------------------------------------------

def _largest_remainder(n, shares):
    exact = [Fraction(n) * Fraction(s).limit_denominator() / 100 for s in shares]
    base = [int(e) for e in exact]
    left = n - sum(base)
    order = sorted(range(len(shares)), key=lambda k: (-(exact[k] - base[k]), k))
    for k in order[:left]:
        base[k] += 1
    return base


def test_toy_variant_counts_recount(toy_tasks, toy_compiled, tmp_path):
    paths = ins.write_instructions(tmp_path, toy_compiled)
    for task in TASKS:
        rows = ins.read_instructions(paths[task])
        n = sum(1 for i in toy_tasks if i.kind == task)
        counts = Counter(r.variant for r in rows)
        expected = dict(zip(ins.VARIANTS, _largest_remainder(n, DEFAULT_PROPORTIONS[task])))
        assert {v: counts.get(v, 0) for v in ins.VARIANTS} == expected, task


def test_defaults_match_table_proportions():
    assert DEFAULT_PROPORTIONS[ASAD] == (80.0, 10.0, 10.0)
    assert DEFAULT_PROPORTIONS[TSAD] == (80.0, 10.0, 10.0)
    assert DEFAULT_PROPORTIONS[SNAP] == (80.0, 10.0, 10.0)
    assert DEFAULT_PROPORTIONS[SDFD] == (80.0, 20.0, 0.0)
    assert DEFAULT_PROPORTIONS[SPTD] == (100.0, 0.0, 0.0)


@pytest.mark.parametrize(
    "patch",
    [
        {ASAD: (80, 10)},
        {ASAD: (80, 10, 5)},
        {SPTD: (90, 10, 0)},
        {SDFD: (80, 10, 10)},
        {TSAD: (110, -5, -5)},
    ],
)
def test_invalid_proportions(patch):
    with pytest.raises(ProportionError):
        ins.validate_proportions({**DEFAULT_PROPORTIONS, **patch})


def test_unknown_task_in_proportions():
    with pytest.raises(ProportionError):
        ins.validate_proportions({**DEFAULT_PROPORTIONS, "X-TASK": (100, 0, 0)})


def test_outputs_round_trip_through_parser(toy_compiled, toy_tasks):
    gold = {i.instance_id: i for i in toy_tasks}
    for item in toy_compiled:
        parsed = parse_output(item.task, item.output, item.activity_set, item.variant)
        assert parsed.ok, (item.task, item.variant, item.output)
        src = gold[item.instance_id]
        if item.variant == NORMAL and item.is_standard:
            if item.task in (TSAD, ASAD):
                assert parsed.value == (src.gold == VALID)
            elif item.task == SNAP:
                assert parsed.value == src.gold
            elif item.task == SDFD:
                assert parsed.value.edges == {tuple(e) for e in src.gold["edges"]}
            else:
                assert parsed.value == parse_tree(src.gold)


def test_inverted_outputs_are_semantically_right(toy_compiled, toy_tasks):
    trees = dict(toy_corpus())
    src = {i.instance_id: i for i in toy_tasks}
    for item in toy_compiled:
        if item.variant == NORMAL:
            continue
        tree = trees[item.model_id]
        lang = playout_language(tree, 2)
        value = parse_output(item.task, item.output, item.activity_set, item.variant).value
        s = src[item.instance_id]
        if item.task == TSAD:
            assert accepts(tree, value, 2) == (item.variant == POS_INV)
        elif item.task == ASAD:
            pair = (s.payload["pair"][0], value)
            assert (pair in ef_relation(lang)) == (item.variant == POS_INV)
        elif item.task == SNAP and item.variant == NEG_INV:
            assert value not in continuations(lang)[tuple(s.payload["prefix"])]
        elif item.task == SNAP:
            assert list(value) == s.payload["prefix"]
        elif item.task == SDFD:
            assert not value.edges & {tuple(e) for e in s.gold["edges"]}


def test_negative_instruction_outputs_are_missing_activities(toy_compiled, toy_tasks):
    src = {i.instance_id: i for i in toy_tasks}
    negatives = [i for i in toy_compiled if i.template_id > 6]
    assert negatives and all(i.task == SNAP and i.variant == NORMAL for i in negatives)
    for item in negatives:
        s = src[item.instance_id]
        assert item.output in s.payload["prefix"]
        assert not item.is_standard


def test_template_coverage(toy_compiled):
    by_task = {}
    for item in toy_compiled:
        by_task.setdefault((item.task, item.variant), set()).add(item.template_id)
    for task in TASKS:
        assert {1, 2, 3, 4, 5, 6} <= by_task[(task, NORMAL)], task


def test_compilation_is_deterministic(toy_tasks, tmp_path):
    a = compile_instructions(toy_tasks, rng_seed=3)
    b = compile_instructions(list(reversed(toy_tasks)), rng_seed=3)
    pa = ins.write_instructions(tmp_path / "a", a)
    pb = ins.write_instructions(tmp_path / "b", b)
    for task in TASKS:
        assert pa[task].read_bytes() == pb[task].read_bytes()


def test_formulation_and_context_nonempty(toy_compiled):
    for item in toy_compiled:
        assert item.formulation.strip() and item.context.strip()
        assert item.context.startswith("Set of possible activities: ")
        assert "{" not in item.formulation or "}" not in item.formulation
    with pytest.raises(ValueError):
        InstructionInstance("x", TSAD, NORMAL, 1, "m", ("a",), " ", "ctx", "True")


def test_instruction_dict_round_trip(toy_compiled):
    for item in toy_compiled[:50]:
        d = item.to_dict()
        assert set(d["instruction"]) == {"formulation", "context"}
        assert InstructionInstance.from_dict(d) == item


@given(st.integers(0, 5000), st.sampled_from([(80.0, 10.0, 10.0), (80.0, 20.0, 0.0), (100.0, 0.0, 0.0), (33.3, 33.3, 33.4)]))
def test_quotas_are_exact_apportionments(n, shares):
    q = ins.quotas(n, shares)
    assert sum(q) == n
    for c, s in zip(q, shares):
        assert abs(c - n * s / 100) < 1
    assert q == _largest_remainder(n, shares)
