"""Output parsing and scoring: macro F1 for classification tasks, footprint fitness for discovery."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .behavior import Dfg, dfg_of_log, footprint_of_dfg
from .instructions import NO_EDGES, NORMAL, POS_INV, InstructionInstance
from .reference import reference_scores
from .tasks import ASAD, SDFD, SNAP, SPTD, TASKS, TSAD
from .tree import (
    DEFAULT_LANGUAGE_CAP,
    DEFAULT_LOOP_REDO_BOUND,
    LanguageTooLarge,
    ProcessTree,
    dfg_of_tree,
    enumerate_language,
    parse_tree,
)

BOOL = "bool"
ACTIVITY = "activity"
TRACE = "trace"
DFG = "dfg"
TREE = "tree"
UNPARSEABLE = "unparseable"

MACRO_F1 = "macro_f1"
FOOTPRINT_FITNESS = "footprint_fitness"

FITNESS_DEFINITION = (
    "footprint fitness = share of ordered off-diagonal activity pairs (x, y), x != y, over the gold "
    "alphabet whose relation (precedes/follows/parallel/unrelated) agrees between gold and discovered "
    "footprints; single-activity alphabets compare the diagonal cell; discovered activities outside the "
    "gold alphabet are ignored; unparseable outputs score 0; task fitness is the unweighted mean over instances"
)


class InstanceMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ParsedOutput:
    task: str
    kind: str
    value: Any = None
    raw: str = ""

    @property
    def ok(self) -> bool:
        return self.kind != UNPARSEABLE


def output_kind(task: str, variant: str = NORMAL) -> str:
    if task in (TSAD, ASAD):
        if variant == NORMAL:
            return BOOL
        return TRACE if task == TSAD else ACTIVITY
    if task == SNAP:
        return TRACE if variant == POS_INV else ACTIVITY
    if task == SDFD:
        return DFG
    if task == SPTD:
        return TREE
    raise ValueError(f"unknown task {task!r}")


_FENCE = re.compile(r"```[a-zA-Z]*")
_QUOTED = re.compile(r"'((?:[^'\\]|\\.)*)'")
_QUOTED_EDGE = re.compile(r"'((?:[^'\\]|\\.)*)'\s*->\s*'((?:[^'\\]|\\.)*)'")
_BOOL = re.compile(r"\b(true|false)\b", re.IGNORECASE)
_LEAD = re.compile(r"^\s*(?:the\s+)?(?:answer|output|result|prediction|next activity|activity)\s*(?:is)?\s*[:\-]\s*",
                   re.IGNORECASE)


def _unescape(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s)


def _clean(raw: str) -> str:
    return _FENCE.sub("", raw or "").strip()


def _parse_bool(text: str):
    found = {m.group(1).lower() for m in _BOOL.finditer(text)}
    if len(found) == 1:
        return found.pop() == "true"
    return None


def _parse_activity(text: str, activity_set: Sequence[str] | None):
    line = _LEAD.sub("", text).strip().strip("'\"`").rstrip(".").strip()
    if not activity_set:
        first = line.splitlines()[0].strip() if line else ""
        return first or None
    if line in activity_set:
        return line
    lowered = {a.lower(): a for a in activity_set}
    if line.lower() in lowered:
        return lowered[line.lower()]
    hay = text.lower()
    best = None
    for label in activity_set:
        pos = hay.find(label.lower())
        if pos >= 0:
            key = (-len(label), pos)
            if best is None or key < best[0]:
                best = (key, label)
    return best[1] if best else None


def _parse_trace(text: str, activity_set: Sequence[str] | None):
    labels = [_unescape(m.group(1)) for m in _QUOTED.finditer(text)]
    if not labels:
        parts = [p.strip().strip('"').strip() for p in re.split(r",|->|\n", _LEAD.sub("", text))]
        labels = [p for p in parts if p]
        if activity_set is None or not labels or any(p not in activity_set for p in labels):
            return None
    return tuple(labels)


def _parse_dfg(text: str, activity_set: Sequence[str] | None):
    if text.strip().strip(".").lower() == NO_EDGES:
        return Dfg(frozenset(activity_set or ()), frozenset())
    edges = [(_unescape(a), _unescape(b)) for a, b in _QUOTED_EDGE.findall(text)]
    if not edges and activity_set:
        for line in text.splitlines():
            m = re.match(r"^\s*(?:[-*\d.)]+\s+)?(.+?)\s*->\s*(.+?)\s*$", line)
            if m and m.group(1) in activity_set and m.group(2) in activity_set:
                edges.append((m.group(1), m.group(2)))
    if not edges:
        return None
    nodes = set(activity_set or ()) | {a for e in edges for a in e}
    return Dfg(frozenset(nodes), frozenset(edges))


_TREE_START = re.compile(r"(->|X|\+|\*)\s*\(")


def _parse_tree_text(text: str):
    try:
        return parse_tree(text)
    except ValueError:
        pass
    for line in text.splitlines():
        try:
            return parse_tree(line.strip())
        except ValueError:
            continue
    for m in _TREE_START.finditer(text):
        end = _matching_paren(text, m.end() - 1)
        if end is not None:
            try:
                return parse_tree(text[m.start(): end + 1])
            except ValueError:
                continue
    return None


def _matching_paren(text: str, open_pos: int):
    depth, i, quoted = 0, open_pos, False
    while i < len(text):
        ch = text[i]
        if quoted:
            if ch == "\\":
                i += 1
            elif ch == "'":
                quoted = False
        elif ch == "'":
            quoted = True
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return None


def parse_output(
    task: str,
    raw: str,
    activity_set: Sequence[str] | None = None,
    variant: str = NORMAL,
) -> ParsedOutput:
    """Parse a model response into the value its task expects; failures become UNPARSEABLE."""
    kind = output_kind(task, variant)
    text = _clean(raw)
    value = None
    if text:
        if kind == BOOL:
            value = _parse_bool(text)
        elif kind == ACTIVITY:
            value = _parse_activity(text, activity_set)
        elif kind == TRACE:
            value = _parse_trace(text, activity_set)
        elif kind == DFG:
            value = _parse_dfg(text, activity_set)
        else:
            value = _parse_tree_text(text)
    if value is None:
        return ParsedOutput(task, UNPARSEABLE, None, raw or "")
    return ParsedOutput(task, kind, value, raw)


# -- metrics ------------------------------------------------------------------

@dataclass
class TaskScore:
    task: str
    metric_name: str
    value: float
    breakdown: dict | list = field(default_factory=dict)
    parse_failure_rate: float = 0.0
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric_name,
            "value": self.value,
            "n": self.n,
            "parse_failure_rate": self.parse_failure_rate,
            "breakdown": self.breakdown,
        }


_MISS = object()


def _label(pred):
    if isinstance(pred, ParsedOutput):
        return pred.value if pred.ok else _MISS
    return _MISS if pred is None else pred


def macro_f1(golds: Sequence, preds: Sequence, classes: Iterable, task: str = "") -> TaskScore:
    """Unweighted mean of per-class F1; unparseable predictions never count as a hit."""
    if len(golds) != len(preds):
        raise ValueError(f"length mismatch: {len(golds)} golds vs {len(preds)} predictions")
    classes = sorted(set(classes), key=str)
    if not classes:
        raise ValueError("classes must be non-empty")
    labels = [_label(p) for p in preds]
    tp = dict.fromkeys(classes, 0)
    fp = dict.fromkeys(classes, 0)
    fn = dict.fromkeys(classes, 0)
    for g, p in zip(golds, labels):
        if p is not _MISS and p == g:
            if g in tp:
                tp[g] += 1
            continue
        if g in fn:
            fn[g] += 1
        if p is not _MISS and p in fp:
            fp[p] += 1
    breakdown = {}
    for c in classes:
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        breakdown[str(c)] = {"precision": prec, "recall": rec, "f1": f1, "support": tp[c] + fn[c]}
    value = sum(b["f1"] for b in breakdown.values()) / len(classes)
    failures = sum(1 for p in labels if p is _MISS)
    return TaskScore(task, MACRO_F1, value, breakdown, failures / len(golds) if golds else 0.0, len(golds))


def model_dfg(model, loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND, cap: int = DEFAULT_LANGUAGE_CAP) -> Dfg:
    if isinstance(model, Dfg):
        return model
    if isinstance(model, ProcessTree):
        try:
            return dfg_of_log(enumerate_language(model, loop_redo_bound, cap))
        except LanguageTooLarge:
            return dfg_of_tree(model)
    raise TypeError(f"expected a Dfg or ProcessTree, got {type(model).__name__}")


def _alphabet(model) -> frozenset[str]:
    return model.nodes if isinstance(model, Dfg) else model.alphabet()


def footprint_fitness(
    gold_model,
    discovered,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
) -> float:
    """Share of footprint cells over the gold alphabet on which both models agree."""
    if isinstance(discovered, ParsedOutput):
        discovered = discovered.value if discovered.ok else None
    alphabet = sorted(_alphabet(gold_model))
    if not alphabet:
        raise ValueError("gold model has an empty alphabet")
    if discovered is None:
        return 0.0
    gold_fp = footprint_of_dfg(model_dfg(gold_model, loop_redo_bound, cap), alphabet)
    disc_fp = footprint_of_dfg(model_dfg(discovered, loop_redo_bound, cap), alphabet)
    if len(alphabet) == 1:
        a = alphabet[0]
        return 1.0 if gold_fp[(a, a)] == disc_fp[(a, a)] else 0.0
    pairs = list(gold_fp.off_diagonal())
    matching = sum(1 for pair, rel in pairs if disc_fp[pair] == rel)
    return matching / len(pairs)


def fitness_score(task: str, golds: Sequence, discovered: Sequence, **kw) -> TaskScore:
    if len(golds) != len(discovered):
        raise ValueError(f"length mismatch: {len(golds)} golds vs {len(discovered)} models")
    values = [footprint_fitness(g, d, **kw) for g, d in zip(golds, discovered)]
    failures = sum(1 for d in discovered if d is None or (isinstance(d, ParsedOutput) and not d.ok))
    n = len(values)
    return TaskScore(task, FOOTPRINT_FITNESS, sum(values) / n if n else 0.0, values, failures / n if n else 0.0, n)


# -- fold evaluation -------------------------------------------------------------------

def _responses_by_id(responses) -> dict[str, str]:
    if isinstance(responses, Mapping):
        return dict(responses)
    out = {}
    for rec in responses:
        iid = rec["instance_id"]
        if iid in out:
            raise InstanceMismatch(f"duplicate response for {iid}")
        out[iid] = rec.get("raw_output") or ""
    return out


def evaluate_fold(
    test: Sequence[InstructionInstance],
    responses,
    *,
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND,
    cap: int = DEFAULT_LANGUAGE_CAP,
    failure_threshold: float = 1.0,
    held_out: str | None = None,
) -> dict:
    """Score every test instance against its expected output; missing responses count as unparseable."""
    by_id = _responses_by_id(responses)
    ids = {i.instance_id for i in test}
    unknown = sorted(set(by_id) - ids)
    if unknown:
        raise InstanceMismatch(f"{len(unknown)} responses do not match any test instance, e.g. {unknown[0]}")

    tasks: dict[str, dict] = {}
    for task in TASKS:
        items = [i for i in test if i.task == task]
        if not items:
            continue
        golds, preds = [], []
        for inst in items:
            gold = parse_output(task, inst.output, inst.activity_set, inst.variant)
            if not gold.ok:
                raise ValueError(f"expected output of {inst.instance_id} does not parse")
            golds.append(gold)
            preds.append(parse_output(task, by_id.get(inst.instance_id, ""), inst.activity_set, inst.variant))
        if task in (SDFD, SPTD):
            score = fitness_score(task, [g.value for g in golds], preds, loop_redo_bound=loop_redo_bound, cap=cap)
        else:
            gold_labels = [g.value for g in golds]
            if task in (TSAD, ASAD):
                classes = [True, False]
            else:
                classes = sorted(set(gold_labels))
            score = macro_f1(gold_labels, preds, classes, task)
        entry = score.to_dict()
        entry["missing_responses"] = sum(1 for i in items if i.instance_id not in by_id)
        entry["references"] = reference_scores(task)
        tasks[task] = entry

    failing = sorted(t for t, e in tasks.items() if e["parse_failure_rate"] > failure_threshold)
    return {
        "held_out": held_out,
        "n_instances": len(test),
        "n_responses": len(by_id),
        "settings": {
            "loop_redo_bound": loop_redo_bound,
            "language_cap": cap,
            "parse_failure_threshold": failure_threshold,
            "fitness_definition": FITNESS_DEFINITION,
            "macro_f1_classes": "T-SAD/A-SAD: True, False; S-NAP: activity labels occurring as golds",
        },
        "tasks": tasks,
        "parse_failure_exceeded": failing,
    }


def render_report(report: dict) -> str:
    """Plain-text table of scores next to the published reference values."""
    refs = ["Llama Base", "Llama IT", "Mistral Base", "Mistral IT", "Llama 8B FT"]
    head = f"{'task':<7} {'metric':<18} {'score':>7} {'n':>6} {'unparsed':>9}  " + " ".join(f"{r:>12}" for r in refs)
    lines = []
    if report.get("held_out"):
        lines.append(f"held-out group: {report['held_out']}")
    s = report["settings"]
    lines.append(f"loop redo bound: {s['loop_redo_bound']}; parse-failure threshold: {s['parse_failure_threshold']}")
    lines.append(s["fitness_definition"])
    lines.append("")
    lines.append(head)
    lines.append("-" * len(head))
    for task, e in report["tasks"].items():
        ref_cells = " ".join(
            f"{e['references'][r]:>12.3f}" if r in e["references"] else f"{'-':>12}" for r in refs
        )
        lines.append(
            f"{task:<7} {e['metric']:<18} {e['value']:>7.4f} {e['n']:>6} {e['parse_failure_rate']:>9.2%}  {ref_cells}"
        )
    if report["parse_failure_exceeded"]:
        lines.append("")
        lines.append("parse-failure threshold exceeded: " + ", ".join(report["parse_failure_exceeded"]))
    return "\n".join(lines) + "\n"
