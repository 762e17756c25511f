"""Model-level 70/20/10 splits and leave-one-group-out folds with capped mixing."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from . import jsonl
from .instructions import VARIANTS, InstructionInstance
from .tasks import GROUPS, TASK_GROUP, TASKS, SNAP, DISCOVERY

TRAIN = "train"
VALIDATION = "validation"
TEST = "test"
BUCKETS = (TRAIN, VALIDATION, TEST)

MIN_MODELS = 10


class TooFewModels(ValueError):
    pass


class EmptyPool(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


def split_sizes(n: int) -> tuple[int, int, int]:
    """Floor each 70/20/10 share, then hand the remainder to train, then validation."""
    train, val, test = n * 7 // 10, n * 2 // 10, n // 10
    rest = n - train - val - test
    for k in range(rest):
        if k % 2 == 0:
            train += 1
        else:
            val += 1
    return train, val, test


def split_models(model_ids: Iterable[str], seed: int) -> dict[str, str]:
    ids = sorted(set(model_ids))
    if len(ids) < MIN_MODELS:
        raise TooFewModels(f"need at least {MIN_MODELS} models to split, got {len(ids)}")
    random.Random(f"{seed}:split").shuffle(ids)
    n_train, n_val, _ = split_sizes(len(ids))
    out = {}
    for k, model_id in enumerate(ids):
        out[model_id] = TRAIN if k < n_train else VALIDATION if k < n_train + n_val else TEST
    return dict(sorted(out.items()))


@dataclass(frozen=True)
class MixingPolicy:
    default_cap: int = 30_000
    overrides: Mapping[tuple[str, str], int] = field(
        default_factory=lambda: {(DISCOVERY, SNAP): 60_000}
    )

    def __post_init__(self):
        if self.default_cap <= 0 or any(c <= 0 for c in self.overrides.values()):
            raise ValueError("mixing caps must be positive")

    def cap(self, task: str, held_out: str | None = None) -> int:
        return self.overrides.get((held_out, task), self.default_cap)


def sample_mixed(
    train_pools: Mapping[str, list[InstructionInstance]],
    policy: MixingPolicy,
    seed: int,
    held_out: str | None = None,
) -> tuple[list[InstructionInstance], dict]:
    """Examples-proportional mixing: each task gives min(pool, cap) instances."""
    sampled: list[InstructionInstance] = []
    per_task = {}
    for task in TASKS:
        if task not in train_pools:
            continue
        pool = train_pools[task]
        if not pool:
            raise EmptyPool(f"training pool for {task} is empty")
        cap = policy.cap(task, held_out)
        pool = sorted(pool, key=lambda i: i.instance_id)
        k = min(len(pool), cap)
        chosen = random.Random(f"{seed}:{held_out}:{task}:mix").sample(pool, k)
        sampled.extend(chosen)
        per_task[task] = {"pool": len(pool), "cap": cap, "sampled": k, "variants": _variant_counts(chosen)}
    random.Random(f"{seed}:{held_out}:order").shuffle(sampled)
    total = len(sampled)
    for entry in per_task.values():
        entry["share"] = round(100.0 * entry["sampled"] / total, 2) if total else 0.0
        entry["variant_share_of_total"] = {
            v: round(100.0 * c / total, 2) if total else 0.0 for v, c in entry["variants"].items()
        }
    return sampled, {"total": total, "tasks": per_task}


def _variant_counts(items: Iterable[InstructionInstance]) -> dict[str, int]:
    counts = {v: 0 for v in VARIANTS}
    for it in items:
        counts[it.variant] += 1
    return counts


@dataclass
class Fold:
    held_out: str
    train: list[InstructionInstance]
    validation: list[InstructionInstance]
    test: list[InstructionInstance]
    manifest: dict


def _eval_split(items: Iterable[InstructionInstance]) -> list[InstructionInstance]:
    # inversions and negative instructions are training-only prompt types
    return sorted((i for i in items if i.is_standard), key=lambda i: (TASKS.index(i.task), i.instance_id))


def build_fold(
    held_out: str,
    datasets: Mapping[str, list[InstructionInstance]],
    assignment: Mapping[str, str],
    policy: MixingPolicy | None = None,
    seed: int = 0,
) -> Fold:
    if held_out not in GROUPS:
        raise ValueError(f"unknown group {held_out!r}; expected one of {sorted(GROUPS)}")
    policy = policy or MixingPolicy()
    missing = [t for t in TASKS if t not in datasets]
    if missing:
        raise ValueError(f"missing task datasets: {missing}")

    def bucket(inst: InstructionInstance) -> str:
        try:
            return assignment[inst.model_id]
        except KeyError:
            raise ValueError(f"model {inst.model_id!r} has no split assignment") from None

    pools = {t: [i for i in datasets[t] if bucket(i) == TRAIN] for t in TASKS if TASK_GROUP[t] != held_out}
    train, mix = sample_mixed(pools, policy, seed, held_out)
    held = [i for t in GROUPS[held_out] for i in datasets[t]]
    validation = _eval_split(i for i in held if bucket(i) == VALIDATION)
    test = _eval_split(i for i in held if bucket(i) == TEST)

    leaked = {i.model_id for i in train} & {i.model_id for i in test}
    if leaked:
        raise LeakageError(f"models in both train and test: {sorted(leaked)[:5]}")

    manifest = {
        "held_out": held_out,
        "seed": seed,
        "train_tasks": sorted(pools, key=TASKS.index),
        "test_tasks": list(GROUPS[held_out]),
        "caps": {t: policy.cap(t, held_out) for t in pools},
        "mixing": mix,
        "counts": {TRAIN: len(train), VALIDATION: len(validation), TEST: len(test)},
        "split_counts": {
            name: {t: sum(1 for i in items if i.task == t) for t in GROUPS[held_out]}
            for name, items in ((VALIDATION, validation), (TEST, test))
        },
        "model_ids": {
            TRAIN: sorted({i.model_id for i in train}),
            VALIDATION: sorted({i.model_id for i in validation}),
            TEST: sorted({i.model_id for i in test}),
        },
        "split_policy": "joint model-level buckets shared by all five tasks",
        "evaluation_filter": "validation/test keep normal-variant instances with standard formulations",
    }
    return Fold(held_out, train, validation, test, manifest)


def write_fold(fold: Fold, out_root: str | Path, extra_manifest: Mapping | None = None) -> Path:
    fold_dir = Path(out_root) / f"fold-{fold.held_out}"
    jsonl.write_jsonl(fold_dir / "train.jsonl", (i.to_dict() for i in fold.train))
    jsonl.write_jsonl(fold_dir / "validation.jsonl", (i.to_dict() for i in fold.validation))
    jsonl.write_jsonl(fold_dir / "test.jsonl", (i.to_dict() for i in fold.test))
    manifest = dict(fold.manifest)
    if extra_manifest:
        manifest.update(extra_manifest)
    jsonl.write_json(fold_dir / "manifest.json", manifest)
    return fold_dir


def read_split(fold_dir: str | Path, name: str) -> list[InstructionInstance]:
    return [InstructionInstance.from_dict(d) for d in jsonl.read_jsonl(Path(fold_dir) / f"{name}.jsonl")]


def check_leakage(manifests: Iterable[Mapping]) -> list[str]:
    """Problems found across fold manifests: model ids shared by any train and any test split."""
    manifests = list(manifests)
    problems = []
    for a in manifests:
        for b in manifests:
            shared = set(a["model_ids"][TRAIN]) & set(b["model_ids"][TEST])
            if shared:
                problems.append(
                    f"train of fold-{a['held_out']} and test of fold-{b['held_out']} share {len(shared)} models"
                )
    return problems
