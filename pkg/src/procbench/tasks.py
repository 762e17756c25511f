"""Labeled instances for the five control-flow tasks, derived from process trees."""
from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import jsonl
from .behavior import EventLog, dfg_of_log, ef_pairs
from .tree import (
    DEFAULT_LANGUAGE_CAP,
    DEFAULT_LOOP_REDO_BOUND,
    LanguageTooLarge,
    ProcessTree,
    enumerate_language,
    parse_tree,
    serialize_tree,
)

log = logging.getLogger(__name__)

TSAD = "T-SAD"
ASAD = "A-SAD"
SNAP = "S-NAP"
SDFD = "S-DFD"
SPTD = "S-PTD"
TASKS = (ASAD, TSAD, SNAP, SDFD, SPTD)

ANOMALY = "anomaly"
PREDICTION = "prediction"
DISCOVERY = "discovery"
GROUPS = {
    ANOMALY: (ASAD, TSAD),
    PREDICTION: (SNAP,),
    DISCOVERY: (SDFD, SPTD),
}
TASK_GROUP = {task: group for group, tasks in GROUPS.items() for task in tasks}

VALID = "Valid"
ANOMALOUS = "Anomalous"

MAX_ANOMALY_ATTEMPTS = 20
DEFAULT_MAX_TRACES = 50


class SkipModel(Exception):
    """The model cannot yield instances for a task."""


def task_file_stem(task: str) -> str:
    return task.lower().replace("-", "")


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    model_id: str
    activity_set: tuple[str, ...]
    payload: dict = field(hash=False)
    gold: Any = field(hash=False)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        object.__setattr__(self, "activity_set", tuple(sorted(set(self.activity_set))))

    @property
    def instance_id(self) -> str:
        key = [self.kind, self.model_id, list(self.activity_set), self.payload, self.gold]
        return f"{task_file_stem(self.kind)}-{jsonl.digest(key)[:16]}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_id": self.model_id,
            "activity_set": list(self.activity_set),
            "payload": self.payload,
            "gold": self.gold,
            "seed": self.seed,
            "instance_id": self.instance_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        return cls(d["kind"], d["model_id"], tuple(d["activity_set"]), d["payload"], d["gold"], d.get("seed", 0))


def _rng(seed: int, model_id: str, stream: str) -> random.Random:
    return random.Random(f"{seed}:{model_id}:{stream}")


def _language(tree, language, bound, cap) -> EventLog:
    return language if language is not None else enumerate_language(tree, bound, cap)


def sample_traces(language: EventLog, seed: int, model_id: str, max_traces: int = DEFAULT_MAX_TRACES):
    traces = list(language.traces)
    _rng(seed, model_id, "traces").shuffle(traces)
    return traces[:max_traces]


def inject_anomaly(trace: tuple, alphabet: list[str], rng: random.Random) -> tuple | None:
    """One random edit (swap, delete or insert); None when the edit does not apply."""
    op = rng.choice(("swap", "delete", "insert"))
    steps = list(trace)
    if op == "swap":
        if len(steps) < 2:
            return None
        i, j = rng.sample(range(len(steps)), 2)
        steps[i], steps[j] = steps[j], steps[i]
    elif op == "delete":
        if len(steps) < 2:
            return None
        del steps[rng.randrange(len(steps))]
    else:
        steps.insert(rng.randint(0, len(steps)), rng.choice(alphabet))
    return tuple(steps)


def _require_two_activities(tree: ProcessTree):
    if len(tree.alphabet()) < 2:
        raise SkipModel("tree has fewer than two distinct activities")


def gen_tsad(
    tree: ProcessTree,
    model_id: str,
    rng_seed: int = 0,
    *,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
    max_traces: int = DEFAULT_MAX_TRACES,
    language: EventLog | None = None,
) -> list[TaskInstance]:
    _require_two_activities(tree)
    lang = _language(tree, language, loop_redo_bound, cap)
    alphabet = sorted(tree.alphabet())
    valid = [t for t in sample_traces(lang, rng_seed, model_id, max_traces) if t]
    rng = _rng(rng_seed, model_id, "anomalies")
    anomalous: list[tuple] = []
    seen = set()
    for trace in valid:
        for _ in range(MAX_ANOMALY_ATTEMPTS):
            candidate = inject_anomaly(trace, alphabet, rng)
            if candidate is not None and candidate not in lang:
                if candidate not in seen:
                    seen.add(candidate)
                    anomalous.append(candidate)
                break
    k = min(len(valid), len(anomalous))
    if k == 0:
        raise SkipModel("no verifiable anomaly could be constructed")
    aset = tuple(alphabet)
    out = [TaskInstance(TSAD, model_id, aset, {"trace": list(t)}, VALID, rng_seed) for t in valid[:k]]
    out += [TaskInstance(TSAD, model_id, aset, {"trace": list(t)}, ANOMALOUS, rng_seed) for t in anomalous[:k]]
    return out


def gen_asad(
    tree: ProcessTree,
    model_id: str,
    rng_seed: int = 0,
    *,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
    language: EventLog | None = None,
) -> list[TaskInstance]:
    _require_two_activities(tree)
    lang = _language(tree, language, loop_redo_bound, cap)
    occurring = set().union(*(ef_pairs(t) for t in lang.traces))
    reversed_only = sorted((y, x) for x, y in occurring if (y, x) not in occurring)
    if not reversed_only:
        raise SkipModel("every eventually-follows pair occurs in both orders")
    valid = sorted(occurring)
    k = min(len(valid), len(reversed_only))
    rng = _rng(rng_seed, model_id, "pairs")
    valid = sorted(rng.sample(valid, k))
    anomalous = sorted(rng.sample(reversed_only, k))
    aset = tuple(sorted(tree.alphabet()))
    out = [TaskInstance(ASAD, model_id, aset, {"pair": list(p)}, VALID, rng_seed) for p in valid]
    out += [TaskInstance(ASAD, model_id, aset, {"pair": list(p)}, ANOMALOUS, rng_seed) for p in anomalous]
    return out


def gen_snap(
    tree: ProcessTree,
    model_id: str,
    rng_seed: int = 0,
    *,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
    max_traces: int = DEFAULT_MAX_TRACES,
    language: EventLog | None = None,
) -> list[TaskInstance]:
    """One instance per (sampled trace, strict prefix of length >= 1).

    Besides the prefix, the payload records whether the prefix is itself a
    complete trace and which activities can never directly follow it; the
    latter feeds negative inversions downstream.
    """
    _require_two_activities(tree)
    lang = _language(tree, language, loop_redo_bound, cap)
    nexts = defaultdict(set)
    for t in lang.traces:
        for i in range(1, len(t)):
            nexts[t[:i]].add(t[i])
    aset = tuple(sorted(tree.alphabet()))
    out = []
    for t in sample_traces(lang, rng_seed, model_id, max_traces):
        for i in range(1, len(t)):
            prefix = t[:i]
            payload = {
                "prefix": list(prefix),
                "complete": prefix in lang,
                "not_next": sorted(set(aset) - nexts[prefix]),
            }
            out.append(TaskInstance(SNAP, model_id, aset, payload, t[i], rng_seed))
    return out


def gen_discovery(
    tree: ProcessTree,
    model_id: str,
    rng_seed: int = 0,
    *,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
    language: EventLog | None = None,
) -> tuple[TaskInstance, TaskInstance]:
    lang = _language(tree, language, loop_redo_bound, cap)
    dfg = dfg_of_log(lang)
    aset = tuple(sorted(tree.alphabet()))
    dfd = TaskInstance(SDFD, model_id, aset, {}, {"edges": [list(e) for e in dfg.sorted_edges()]}, rng_seed)
    ptd = TaskInstance(SPTD, model_id, aset, {}, serialize_tree(tree), rng_seed)
    return dfd, ptd


def _dedup_key(inst: TaskInstance):
    if inst.kind == TSAD:
        return inst.activity_set, tuple(inst.payload["trace"])
    if inst.kind == ASAD:
        return inst.activity_set, tuple(inst.payload["pair"])
    if inst.kind == SNAP:
        return inst.activity_set, tuple(inst.payload["prefix"]), inst.gold
    return (inst.activity_set,)


def _order_key(inst: TaskInstance):
    return inst.model_id, jsonl.dumps(inst.payload), jsonl.dumps(inst.gold)


def dedup(instances: Iterable[TaskInstance]) -> list[TaskInstance]:
    instances = list(instances)
    kinds = {i.kind for i in instances}
    if len(kinds) > 1:
        raise ValueError(f"dedup expects a single task kind, got {sorted(kinds)}")
    seen = set()
    out = []
    for inst in sorted(instances, key=_order_key):
        if inst.kind == SNAP and inst.payload.get("complete"):
            continue
        key = _dedup_key(inst)
        if key not in seen:
            seen.add(key)
            out.append(inst)
    return out


def output_order(inst: TaskInstance):
    return inst.model_id, jsonl.digest(inst.payload), jsonl.dumps(inst.gold)


# -- corpus level ----------------------------------------------------------------------

def load_corpus(path: str | Path) -> list[tuple[str, ProcessTree]]:
    """Read ``model_id<TAB>tree`` lines; blank lines and ``#`` comments are skipped."""
    corpus = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected '<model_id>\\t<tree>'")
            model_id, text = line.split("\t", 1)
            model_id = model_id.strip()
            if model_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate model id {model_id!r}")
            seen.add(model_id)
            try:
                corpus.append((model_id, parse_tree(text.strip())))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return corpus


@dataclass
class GenerationResult:
    instances: dict[str, list[TaskInstance]]
    skipped: dict[str, dict[str, str]]
    raw_counts: dict[str, int]


def generate_tasks(
    corpus: Iterable[tuple[str, ProcessTree]],
    seed: int,
    *,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
    max_traces: int = DEFAULT_MAX_TRACES,
) -> GenerationResult:
    raw: dict[str, list[TaskInstance]] = {t: [] for t in TASKS}
    skipped: dict[str, dict[str, str]] = {t: {} for t in TASKS}
    for model_id, tree in corpus:
        try:
            lang = enumerate_language(tree, loop_redo_bound, cap)
        except LanguageTooLarge as exc:
            log.warning("skipping model %s: %s", model_id, exc)
            for t in TASKS:
                skipped[t][model_id] = str(exc)
            continue
        kw = dict(loop_redo_bound=loop_redo_bound, cap=cap, language=lang)
        for task, gen in ((TSAD, gen_tsad), (ASAD, gen_asad), (SNAP, gen_snap)):
            try:
                extra = {"max_traces": max_traces} if task != ASAD else {}
                raw[task].extend(gen(tree, model_id, seed, **kw, **extra))
            except SkipModel as exc:
                skipped[task][model_id] = str(exc)
        dfd, ptd = gen_discovery(tree, model_id, seed, **kw)
        raw[SDFD].append(dfd)
        raw[SPTD].append(ptd)
    instances = {t: sorted(dedup(raw[t]), key=output_order) for t in TASKS}
    return GenerationResult(instances, skipped, {t: len(raw[t]) for t in TASKS})


def write_tasks(out_dir: str | Path, instances: dict[str, list[TaskInstance]]) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    for task, items in instances.items():
        path = out_dir / f"{task_file_stem(task)}.jsonl"
        jsonl.write_jsonl(path, (i.to_dict() for i in items))
        paths[task] = path
    return paths


def read_tasks(path: str | Path) -> list[TaskInstance]:
    return [TaskInstance.from_dict(d) for d in jsonl.read_jsonl(path)]
