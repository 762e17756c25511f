"""Compile task instances into instruction instances (formulation, context) -> output."""
from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from . import jsonl
from .tasks import ANOMALOUS, ASAD, SDFD, SNAP, SPTD, TASKS, TSAD, VALID, TaskInstance, task_file_stem
from .tree import quote_label

log = logging.getLogger(__name__)

NORMAL = "normal"
NEG_INV = "negative_inversion"
POS_INV = "positive_inversion"
VARIANTS = (NORMAL, NEG_INV, POS_INV)

ALLOWED_VARIANTS = {
    ASAD: VARIANTS,
    TSAD: VARIANTS,
    SNAP: VARIANTS,
    SDFD: (NORMAL, NEG_INV),
    SPTD: (NORMAL,),
}

# percentages (normal, negative inversion, positive inversion)
DEFAULT_PROPORTIONS = {
    ASAD: (80.0, 10.0, 10.0),
    TSAD: (80.0, 10.0, 10.0),
    SNAP: (80.0, 10.0, 10.0),
    SDFD: (80.0, 20.0, 0.0),
    SPTD: (100.0, 0.0, 0.0),
}
DEFAULT_NEGATIVE_INSTRUCTION_RATE = 0.1
STANDARD_TEMPLATES = 6

NO_EDGES = "none"


class MissingBank(KeyError):
    pass


class InversionUnsupported(ValueError):
    pass


class ProportionError(ValueError):
    pass


@dataclass(frozen=True)
class Formulation:
    task: str
    variant: str
    template_id: int
    template: str
    output_constraint: str
    negative_instruction: bool = False

    def render(self, fields: Mapping[str, str]) -> str:
        return self.template.format_map(fields)


@dataclass(frozen=True)
class InstructionInstance:
    instance_id: str
    task: str
    variant: str
    template_id: int
    model_id: str
    activity_set: tuple[str, ...]
    formulation: str
    context: str
    output: str
    seed: int = 0

    def __post_init__(self):
        if not self.formulation.strip() or not self.context.strip():
            raise ValueError(f"{self.instance_id}: formulation and context must be non-empty")

    @property
    def is_standard(self) -> bool:
        """Normal variant with one of the six standard formulations."""
        return self.variant == NORMAL and self.template_id <= STANDARD_TEMPLATES

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "task": self.task,
            "variant": self.variant,
            "template_id": self.template_id,
            "model_id": self.model_id,
            "activity_set": list(self.activity_set),
            "instruction": {"formulation": self.formulation, "context": self.context},
            "output": self.output,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionInstance":
        return cls(
            d["instance_id"],
            d["task"],
            d["variant"],
            int(d["template_id"]),
            d["model_id"],
            tuple(d["activity_set"]),
            d["instruction"]["formulation"],
            d["instruction"]["context"],
            d["output"],
            d.get("seed", 0),
        )


# -- template banks ------------------------------------------------------------

_HEADER = re.compile(r"^===\s*(\d+)\s*(negative-instruction)?\s*$")


def parse_bank(text: str, task: str, variant: str) -> list[Formulation]:
    blocks: list[tuple[int, bool, list[str]]] = []
    for line in text.splitlines():
        m = _HEADER.match(line)
        if m:
            blocks.append((int(m.group(1)), bool(m.group(2)), []))
        elif blocks:
            blocks[-1][2].append(line)
        elif line.strip():
            raise ValueError(f"text before the first template header in bank {task}/{variant}")
    out = []
    for template_id, negative, lines in blocks:
        constraint = ""
        body = []
        for line in lines:
            if line.startswith("constraint:"):
                constraint = line[len("constraint:"):].strip()
                body.append(constraint)
            else:
                body.append(line)
        if not constraint:
            raise ValueError(f"template {task}/{variant}/{template_id} has no output constraint")
        out.append(Formulation(task, variant, template_id, "\n".join(body).strip(), constraint, negative))
    return out


@lru_cache(maxsize=None)
def _packaged_bank(task: str, variant: str) -> tuple[Formulation, ...]:
    name = f"{task_file_stem(task)}.{variant}.txt"
    try:
        text = resources.files("procbench").joinpath("templates").joinpath(name).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingBank(f"no template bank for ({task}, {variant})") from exc
    return tuple(parse_bank(text, task, variant))


def load_bank(task: str, variant: str, template_dir: str | Path | None = None) -> tuple[Formulation, ...]:
    if variant not in ALLOWED_VARIANTS.get(task, ()):
        raise MissingBank(f"variant {variant} is not allowed for {task}")
    if template_dir is None:
        return _packaged_bank(task, variant)
    path = Path(template_dir) / f"{task_file_stem(task)}.{variant}.txt"
    if not path.exists():
        raise MissingBank(f"no template bank at {path}")
    return tuple(parse_bank(path.read_text(encoding="utf-8"), task, variant))


def _standard(bank) -> list[Formulation]:
    return [f for f in bank if not f.negative_instruction]


def select_formulation(task: str, variant: str, rng: random.Random, template_dir=None) -> Formulation:
    """Uniform draw over the six standard formulations of the (task, variant) bank."""
    return rng.choice(_standard(load_bank(task, variant, template_dir)))


# -- rendering -------------------------------------------------------------------

def format_activities(activities: Iterable[str]) -> str:
    return ", ".join(quote_label(a) for a in activities)


format_trace = format_activities


def format_edges(edges: Iterable[tuple[str, str]]) -> str:
    lines = [f"{quote_label(x)} -> {quote_label(y)}" for x, y in sorted(edges)]
    return "\n".join(lines) if lines else NO_EDGES


def _bool_text(label: str) -> str:
    return "True" if label == VALID else "False"


def _fields(inst: TaskInstance, **extra) -> dict:
    fields = {"activities": format_activities(inst.activity_set), "count": str(len(inst.activity_set))}
    fields.update(extra)
    return fields


def _context(inst: TaskInstance, *lines: str) -> str:
    return "\n".join([f"Set of possible activities: {format_activities(inst.activity_set)}", *lines])


def _normal(inst: TaskInstance):
    if inst.kind == TSAD:
        trace = format_trace(inst.payload["trace"])
        return _fields(inst, trace=trace), _context(inst, f"Trace: {trace}"), _bool_text(inst.gold)
    if inst.kind == ASAD:
        x, y = (quote_label(a) for a in inst.payload["pair"])
        ctx = _context(inst, f"First activity: {x}", f"Second activity: {y}")
        return _fields(inst, act1=x, act2=y), ctx, _bool_text(inst.gold)
    if inst.kind == SNAP:
        prefix = format_trace(inst.payload["prefix"])
        return _fields(inst, prefix=prefix), _context(inst, f"Executed activities: {prefix}"), inst.gold
    if inst.kind == SDFD:
        return _fields(inst), _context(inst), format_edges(tuple(e) for e in inst.gold["edges"])
    return _fields(inst), _context(inst), inst.gold


def _missing_activity(inst: TaskInstance, rng: random.Random):
    """Negative instruction for S-NAP: drop one activity before the last observed one."""
    observed = list(inst.payload["prefix"]) + [inst.gold]
    pos = rng.randrange(len(observed) - 1)
    missing = observed.pop(pos)
    seq = format_trace(observed)
    return _fields(inst, sequence=seq), _context(inst, f"Observed activities: {seq}"), missing


def inversion_variant(inst: TaskInstance, rng: random.Random | None = None) -> str:
    """The inversion an instance receives when none is imposed."""
    if inst.kind in (TSAD, ASAD):
        return NEG_INV if inst.gold == ANOMALOUS else POS_INV
    if inst.kind == SNAP:
        rng = rng or random.Random()
        return POS_INV if rng.random() < 0.5 else NEG_INV
    if inst.kind == SDFD:
        return NEG_INV
    raise InversionUnsupported(f"{inst.kind} admits no inversion")


def can_invert(inst: TaskInstance, variant: str) -> bool:
    if variant not in ALLOWED_VARIANTS[inst.kind] or variant == NORMAL:
        return False
    if inst.kind in (TSAD, ASAD):
        return inst.gold == (ANOMALOUS if variant == NEG_INV else VALID)
    if inst.kind == SNAP:
        return variant == POS_INV or bool(inst.payload.get("not_next"))
    if inst.kind == SDFD:
        n = len(inst.activity_set)
        return len(inst.gold["edges"]) < n * n
    return False


def _inverted(inst: TaskInstance, variant: str, rng: random.Random):
    if not can_invert(inst, variant):
        raise InversionUnsupported(f"{inst.instance_id} admits no {variant}")
    if inst.kind == TSAD:
        trace = inst.payload["trace"]
        first = quote_label(trace[0])
        fields = _fields(inst, length=str(len(trace)), first=first)
        ctx = _context(inst, f"Number of activities: {len(trace)}", f"First activity: {first}")
        return fields, ctx, format_trace(trace)
    if inst.kind == ASAD:
        x, y = inst.payload["pair"]
        given = quote_label(x)
        return _fields(inst, activity=given), _context(inst, f"Given activity: {given}"), y
    if inst.kind == SNAP:
        prefix = inst.payload["prefix"]
        if variant == POS_INV:
            later = quote_label(inst.gold)
            fields = _fields(inst, activity=later, length=str(len(prefix)))
            ctx = _context(inst, f"Later activity: {later}", f"Number of preceding activities: {len(prefix)}")
            return fields, ctx, format_trace(prefix)
        shown = format_trace(prefix)
        wrong = rng.choice(sorted(inst.payload["not_next"]))
        return _fields(inst, prefix=shown), _context(inst, f"Executed activities: {shown}"), wrong
    edges = {tuple(e) for e in inst.gold["edges"]}
    missing = [(x, y) for x in inst.activity_set for y in inst.activity_set if (x, y) not in edges]
    return _fields(inst), _context(inst), format_edges(missing)


def invert(instance: TaskInstance, rng: random.Random) -> tuple[str, str, str]:
    """Flip the objective of ``instance``; returns (context, output, variant)."""
    variant = inversion_variant(instance, rng)
    if instance.kind == SNAP and not can_invert(instance, variant):
        variant = POS_INV
    _, ctx, out = _inverted(instance, variant, rng)
    return ctx, out, variant


# -- compilation ----------------------------------------------------------------------

def validate_proportions(proportions: Mapping[str, Iterable[float]]) -> dict[str, tuple[float, float, float]]:
    out = {}
    for task in TASKS:
        if task not in proportions:
            raise ProportionError(f"missing proportions for {task}")
        shares = tuple(float(p) for p in proportions[task])
        if len(shares) != 3 or any(p < 0 for p in shares):
            raise ProportionError(f"{task}: expected three non-negative percentages")
        if abs(sum(shares) - 100.0) > 1e-6:
            raise ProportionError(f"{task}: percentages sum to {sum(shares)}, not 100")
        for variant, share in zip(VARIANTS, shares):
            if share > 0 and variant not in ALLOWED_VARIANTS[task]:
                raise ProportionError(f"{task} does not admit {variant}")
        out[task] = shares
    unknown = set(proportions) - set(TASKS)
    if unknown:
        raise ProportionError(f"unknown tasks in proportions: {sorted(unknown)}")
    return out


def quotas(n: int, shares: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment of n items to percentage shares."""
    raw = [n * s / 100.0 for s in shares]
    counts = [int(r) for r in raw]
    order = sorted(range(len(shares)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def assign_variants(instances: list[TaskInstance], shares, seed: int) -> dict[str, str]:
    """Exact per-task variant quotas, filled from eligible instances in seeded order."""
    if not instances:
        return {}
    task = instances[0].kind
    ordered = sorted(instances, key=lambda i: i.instance_id)
    random.Random(f"{seed}:{task}:variants").shuffle(ordered)
    n_normal, n_neg, n_pos = quotas(len(ordered), shares)
    assignment = {}
    for variant, wanted in ((NEG_INV, n_neg), (POS_INV, n_pos)):
        if not wanted:
            continue
        taken = 0
        for inst in ordered:
            if taken == wanted:
                break
            if inst.instance_id not in assignment and can_invert(inst, variant):
                assignment[inst.instance_id] = variant
                taken += 1
        if taken < wanted:
            log.warning("%s: only %d of %d instances admit %s", task, taken, wanted, variant)
    return {i.instance_id: assignment.get(i.instance_id, NORMAL) for i in ordered}


def build_instance(
    inst: TaskInstance,
    variant: str,
    seed: int,
    negative_instruction_rate: float = DEFAULT_NEGATIVE_INSTRUCTION_RATE,
    template_dir=None,
) -> InstructionInstance:
    rng = random.Random(f"{seed}:{inst.instance_id}")
    bank = load_bank(inst.kind, variant, template_dir)
    if variant == NORMAL:
        negatives = [f for f in bank if f.negative_instruction]
        if negatives and len(inst.payload.get("prefix", ())) >= 1 and rng.random() < negative_instruction_rate:
            formulation = rng.choice(negatives)
            fields, ctx, out = _missing_activity(inst, rng)
        else:
            formulation = rng.choice(_standard(bank))
            fields, ctx, out = _normal(inst)
    else:
        formulation = rng.choice(_standard(bank))
        fields, ctx, out = _inverted(inst, variant, rng)
    return InstructionInstance(
        inst.instance_id,
        inst.kind,
        variant,
        formulation.template_id,
        inst.model_id,
        inst.activity_set,
        formulation.render(fields),
        ctx,
        out,
        seed,
    )


def compile_instructions(
    instances: Iterable[TaskInstance],
    proportions: Mapping[str, Iterable[float]] | None = None,
    rng_seed: int = 0,
    *,
    negative_instruction_rate: float = DEFAULT_NEGATIVE_INSTRUCTION_RATE,
    template_dir=None,
) -> list[InstructionInstance]:
    props = validate_proportions(proportions or DEFAULT_PROPORTIONS)
    by_task: dict[str, list[TaskInstance]] = {}
    for inst in instances:
        by_task.setdefault(inst.kind, []).append(inst)
    out = []
    for task in TASKS:
        items = by_task.get(task, [])
        variants = assign_variants(items, props[task], rng_seed)
        for inst in sorted(items, key=lambda i: i.instance_id):
            out.append(
                build_instance(inst, variants[inst.instance_id], rng_seed, negative_instruction_rate, template_dir)
            )
    return out


def variant_shares(items: Iterable[InstructionInstance]) -> dict[str, dict[str, float]]:
    counts: dict[str, dict[str, int]] = {}
    for it in items:
        counts.setdefault(it.task, {v: 0 for v in VARIANTS})[it.variant] += 1
    return {
        task: {v: 100.0 * c / sum(cs.values()) for v, c in cs.items()}
        for task, cs in counts.items()
    }


def write_instructions(out_dir: str | Path, items: Iterable[InstructionInstance]) -> dict[str, Path]:
    out_dir = Path(out_dir)
    grouped: dict[str, list[InstructionInstance]] = {t: [] for t in TASKS}
    for it in items:
        grouped[it.task].append(it)
    paths = {}
    for task, rows in grouped.items():
        path = out_dir / f"{task_file_stem(task)}.jsonl"
        jsonl.write_jsonl(path, (r.to_dict() for r in sorted(rows, key=lambda r: r.instance_id)))
        paths[task] = path
    return paths


def read_instructions(path: str | Path) -> list[InstructionInstance]:
    return [InstructionInstance.from_dict(d) for d in jsonl.read_jsonl(path)]
