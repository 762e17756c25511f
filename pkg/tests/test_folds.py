import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from procbench import folds
from procbench.folds import (
    TEST,
    TRAIN,
    VALIDATION,
    EmptyPool,
    LeakageError,
    MixingPolicy,
    TooFewModels,
    build_fold,
    check_leakage,
    sample_mixed,
    split_models,
    split_sizes,
)
from procbench.instructions import NEG_INV, NORMAL, POS_INV, InstructionInstance, compile_instructions
from procbench.tasks import ANOMALY, ASAD, DISCOVERY, GROUPS, PREDICTION, SDFD, SNAP, SPTD, TASK_GROUP, TASKS, TSAD
from procbench.tasks import generate_tasks

from test_tasks import toy_corpus


def _synthetic(task, n, model=lambda k: f"m{k % 50:02d}", variant=NORMAL, tag=""):
    return [
        InstructionInstance(f"{task}-{tag}{k:06d}", task, variant, 1, model(k), ("a", "b"), "f", "c", "True")
        for k in range(n)
    ]


@pytest.fixture(scope="module")
def toy_datasets():
    result = generate_tasks(toy_corpus(), 7)
    items = compile_instructions([i for t in TASKS for i in result.instances[t]], rng_seed=7)
    return {t: [i for i in items if i.task == t] for t in TASKS}


# -- splitting ------------------------------------------------------------------------

def _floor_then_distribute(n):
    # written out independently: floors of 70/20/10, leftovers to train then validation
    shares = [n * 70 // 100, n * 20 // 100, n * 10 // 100]
    rest = n - sum(shares)
    order = [0, 1]
    for k in range(rest):
        shares[order[k % 2]] += 1
    return tuple(shares)


def test_split_sizes_examples():
    assert split_sizes(10) == (7, 2, 1)
    assert split_sizes(15_580) == (10_906, 3_116, 1_558)


@given(st.integers(10, 100_000))
def test_split_sizes_match_independent_rule(n):
    sizes = split_sizes(n)
    assert sizes == _floor_then_distribute(n)
    assert sum(sizes) == n
    for got, share in zip(sizes, (0.7, 0.2, 0.1)):
        assert abs(got - share * n) <= 1


def test_split_models_ten():
    ids = [f"m{k}" for k in range(10)]
    counts = Counter(split_models(ids, 1).values())
    assert counts == {TRAIN: 7, VALIDATION: 2, TEST: 1}


def test_split_models_deterministic_and_seeded():
    ids = [f"m{k:03d}" for k in range(100)]
    assert split_models(ids, 5) == split_models(list(reversed(ids)), 5)
    assert split_models(ids, 5) != split_models(ids, 6)


def test_split_models_partition():
    ids = [f"m{k}" for k in range(37)]
    out = split_models(ids, 0)
    assert set(out) == set(ids)
    assert set(out.values()) <= {TRAIN, VALIDATION, TEST}


def test_too_few_models():
    with pytest.raises(TooFewModels):
        split_models([f"m{k}" for k in range(9)], 0)


# -- mixing ---------------------------------------------------------------------------

def test_policy_caps():
    p = MixingPolicy()
    assert p.cap(SNAP, DISCOVERY) == 60_000
    assert p.cap(SNAP, ANOMALY) == 30_000
    assert p.cap(ASAD, DISCOVERY) == 30_000
    with pytest.raises(ValueError):
        MixingPolicy(0)
    with pytest.raises(ValueError):
        MixingPolicy(10, {(DISCOVERY, SNAP): -1})


def test_pool_smaller_than_cap_is_taken_whole():
    pools = {SDFD: _synthetic(SDFD, 40), SPTD: _synthetic(SPTD, 20)}
    out, manifest = sample_mixed(pools, MixingPolicy(30), seed=1, held_out=PREDICTION)
    assert Counter(i.task for i in out) == {SDFD: 30, SPTD: 20}
    assert manifest["tasks"][SPTD]["sampled"] == 20
    assert manifest["total"] == 50
    assert abs(sum(e["share"] for e in manifest["tasks"].values()) - 100) < 0.05


def test_sampling_without_replacement_and_seeded():
    pools = {SNAP: _synthetic(SNAP, 500)}
    a, _ = sample_mixed(pools, MixingPolicy(100), seed=3)
    b, _ = sample_mixed(pools, MixingPolicy(100), seed=3)
    c, _ = sample_mixed(pools, MixingPolicy(100), seed=4)
    assert len({i.instance_id for i in a}) == 100
    assert a == b and a != c


def test_empty_pool_names_task():
    with pytest.raises(EmptyPool, match=SDFD):
        sample_mixed({SDFD: []}, MixingPolicy(), seed=0)


def test_scaled_pools_scale_counts(toy_datasets):
    """Pools at one tenth with caps at one tenth give one tenth of the counts (toy corpus)."""
    full = {t: v[: len(v) // 10 * 10] for t, v in toy_datasets.items() if len(v) >= 10}
    tenth = {t: v[: len(v) // 10] for t, v in full.items()}
    _, big = sample_mixed(full, MixingPolicy(300), seed=0)
    _, small = sample_mixed(tenth, MixingPolicy(30), seed=0)
    assert any(e["sampled"] == e["cap"] for e in big["tasks"].values())
    assert any(e["sampled"] < e["cap"] for e in big["tasks"].values())
    for t in full:
        assert small["tasks"][t]["sampled"] * 10 == big["tasks"][t]["sampled"]


def test_variant_shares_recorded():
    pool = _synthetic(SNAP, 80) + _synthetic(SNAP, 20, variant=POS_INV, tag="p")
    _, manifest = sample_mixed({SNAP: pool}, MixingPolicy(), seed=0)
    entry = manifest["tasks"][SNAP]
    assert entry["variants"] == {NORMAL: 80, NEG_INV: 0, POS_INV: 20}
    assert entry["variant_share_of_total"][POS_INV] == 20.0


# -- folds ---------------------------------------------------------------------------

def test_fold_structure(toy_datasets):
    assignment = split_models({i.model_id for v in toy_datasets.values() for i in v}, 7)
    for group in GROUPS:
        fold = build_fold(group, toy_datasets, assignment, seed=7)
        assert {i.task for i in fold.train}.isdisjoint(GROUPS[group])
        assert {i.task for i in fold.test} <= set(GROUPS[group])
        assert {assignment[i.model_id] for i in fold.train} == {TRAIN}
        assert {assignment[i.model_id] for i in fold.test} <= {TEST}
        assert {assignment[i.model_id] for i in fold.validation} <= {VALIDATION}
        assert all(i.is_standard for i in fold.test + fold.validation)
        m = fold.manifest
        assert m["counts"] == {TRAIN: len(fold.train), VALIDATION: len(fold.validation), TEST: len(fold.test)}
        assert sum(e["sampled"] for e in m["mixing"]["tasks"].values()) == len(fold.train)
        for t, e in m["mixing"]["tasks"].items():
            assert e["sampled"] == sum(1 for i in fold.train if i.task == t)
        assert set(m["train_tasks"]) == {t for t in TASKS if TASK_GROUP[t] != group}


def test_prediction_fold_trains_on_other_four(toy_datasets):
    assignment = split_models({i.model_id for v in toy_datasets.values() for i in v}, 7)
    fold = build_fold(PREDICTION, toy_datasets, assignment, seed=7)
    assert {i.task for i in fold.train} == {ASAD, TSAD, SDFD, SPTD}
    assert {i.task for i in fold.test} == {SNAP}


def test_anomaly_fold_tests_both_sad_tasks(toy_datasets):
    assignment = split_models({i.model_id for v in toy_datasets.values() for i in v}, 7)
    fold = build_fold(ANOMALY, toy_datasets, assignment, seed=7)
    assert {i.task for i in fold.test} == {ASAD, TSAD}


def test_held_out_test_split_is_unsampled(toy_datasets):
    assignment = split_models({i.model_id for v in toy_datasets.values() for i in v}, 7)
    fold = build_fold(ANOMALY, toy_datasets, assignment, MixingPolicy(1), seed=7)
    expected = [i for t in (ASAD, TSAD) for i in toy_datasets[t] if assignment[i.model_id] == TEST and i.is_standard]
    assert sorted(i.instance_id for i in fold.test) == sorted(i.instance_id for i in expected)


def test_fold_requires_assignment_and_datasets(toy_datasets):
    with pytest.raises(ValueError):
        build_fold(ANOMALY, toy_datasets, {}, seed=0)
    with pytest.raises(ValueError):
        build_fold(ANOMALY, {ASAD: toy_datasets[ASAD]}, {}, seed=0)
    with pytest.raises(ValueError):
        build_fold("unknown", toy_datasets, {}, seed=0)


def test_leakage_detection():
    data = {t: _synthetic(t, 20, model=lambda k: "shared") for t in TASKS}
    with pytest.raises(LeakageError):
        # a broken assignment function that sends the same model to train and test
        class Flaky(dict):
            calls = 0

            def __getitem__(self, key):
                Flaky.calls += 1
                return TRAIN if Flaky.calls % 2 else TEST

        build_fold(ANOMALY, data, Flaky(), seed=0)


def test_check_leakage_over_manifests():
    ok = [{"held_out": g, "model_ids": {TRAIN: ["a"], VALIDATION: ["b"], TEST: ["c"]}} for g in GROUPS]
    assert check_leakage(ok) == []
    bad = ok + [{"held_out": "x", "model_ids": {TRAIN: ["c"], VALIDATION: [], TEST: []}}]
    assert check_leakage(bad)


def test_written_folds_are_byte_identical(toy_datasets, tmp_path):
    assignment = split_models({i.model_id for v in toy_datasets.values() for i in v}, 7)
    for root in ("a", "b"):
        for group in GROUPS:
            folds.write_fold(build_fold(group, toy_datasets, assignment, seed=7), tmp_path / root)
    for path in sorted((tmp_path / "a").rglob("*.*")):
        twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
        assert path.read_bytes() == twin.read_bytes()
    manifest = json.loads((tmp_path / "a" / "fold-discovery" / "manifest.json").read_text())
    assert manifest["caps"][SNAP] == 60_000
    reread = folds.read_split(tmp_path / "a" / "fold-discovery", "test")
    assert len(reread) == manifest["counts"][TEST]
