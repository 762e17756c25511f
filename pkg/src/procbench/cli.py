"""Command-line pipeline: gen-tasks -> build-instructions -> make-folds -> run-inference -> evaluate -> report.

Every stage reads the previous stage's directory under the output root and
writes its own artifacts plus a manifest.json with input digests, seed and
tool version. Manifests carry no timestamps or absolute paths, so identical
inputs give byte-identical files.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import __version__, jsonl
from .evaluation import evaluate_fold, render_report
from .folds import (
    BUCKETS,
    TEST,
    VALIDATION,
    MixingPolicy,
    build_fold,
    check_leakage,
    read_split,
    split_models,
    write_fold,
)
from .gateway import ORACLE, RANDOM, BackendConfig, GatewayError, read_responses, run_batch, write_responses
from .instructions import (
    DEFAULT_NEGATIVE_INSTRUCTION_RATE,
    DEFAULT_PROPORTIONS,
    compile_instructions,
    read_instructions,
    validate_proportions,
    variant_shares,
    write_instructions,
)
from .tasks import (
    DEFAULT_MAX_TRACES,
    GROUPS,
    TASKS,
    generate_tasks,
    load_corpus,
    read_tasks,
    task_file_stem,
    write_tasks,
)
from .tree import DEFAULT_LANGUAGE_CAP, DEFAULT_LOOP_REDO_BOUND

log = logging.getLogger("procbench")

TOY_CORPUS = "toy_corpus.tsv"
EXIT_THRESHOLD = 1
EXIT_USAGE = 2


class PipelineError(RuntimeError):
    """Missing inputs or an invalid configuration; reported without a traceback."""


# -- configuration ------------------------------------------------------------------

@dataclass
class PipelineConfig:
    corpus: Path | None = None
    out: Path = Path("out")
    seed: int = 0
    loop_redo_bound: int = DEFAULT_LOOP_REDO_BOUND
    language_cap: int = DEFAULT_LANGUAGE_CAP
    max_traces: int = DEFAULT_MAX_TRACES
    proportions: dict = field(default_factory=lambda: dict(DEFAULT_PROPORTIONS))
    negative_instruction_rate: float = DEFAULT_NEGATIVE_INSTRUCTION_RATE
    template_dir: Path | None = None
    mixing: MixingPolicy = field(default_factory=MixingPolicy)
    splits: Path | None = None
    cache_dir: Path | None = None
    parse_failure_threshold: float = 0.2
    backends: dict[str, BackendConfig] = field(
        default_factory=lambda: {ORACLE: BackendConfig(kind=ORACLE), RANDOM: BackendConfig(kind=RANDOM)}
    )

    @property
    def cache_root(self) -> Path:
        return self.cache_dir or self.out / "cache"

    def backend(self, name: str) -> BackendConfig:
        if name in self.backends:
            cfg = self.backends[name]
            return cfg if cfg.name else replace(cfg, name=name)
        if name in (ORACLE, RANDOM):
            return BackendConfig(kind=name, name=name)
        raise PipelineError(f"unknown backend {name!r}; configured: {sorted(self.backends)}")

    def settings(self) -> dict:
        """The generation settings that determine dataset contents."""
        return {
            "loop_redo_bound": self.loop_redo_bound,
            "language_cap": self.language_cap,
            "max_traces": self.max_traces,
        }

    def check(self) -> list[str]:
        problems = []
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if self.loop_redo_bound < 0:
            problems.append("loop_redo_bound must be >= 0")
        if self.language_cap < 1 or self.max_traces < 1:
            problems.append("language_cap and max_traces must be positive")
        if not 0.0 <= self.negative_instruction_rate <= 1.0:
            problems.append("negative_instruction_rate must lie in [0, 1]")
        if not 0.0 <= self.parse_failure_threshold <= 1.0:
            problems.append("parse_failure_threshold must lie in [0, 1]")
        try:
            validate_proportions(self.proportions)
        except ValueError as exc:
            problems.append(f"proportions: {exc}")
        for label, path in (("corpus", self.corpus), ("template_dir", self.template_dir), ("splits", self.splits)):
            if path is not None and not path.exists():
                problems.append(f"{label}: {path} does not exist")
        return problems


_SCALARS = {
    "seed": int,
    "loop_redo_bound": int,
    "language_cap": int,
    "max_traces": int,
    "negative_instruction_rate": float,
    "parse_failure_threshold": float,
}
_PATHS = ("corpus", "out", "template_dir", "splits", "cache_dir")
_BACKEND_KEYS = set(BackendConfig.__dataclass_fields__)


def _mixing_policy(raw: Mapping) -> MixingPolicy:
    unknown = set(raw) - {"default_cap", "overrides"}
    if unknown:
        raise PipelineError(f"mixing: unknown keys {sorted(unknown)}")
    overrides = {}
    for group, per_task in (raw.get("overrides") or {}).items():
        if group not in GROUPS:
            raise PipelineError(f"mixing.overrides: unknown group {group!r}")
        for task, cap in per_task.items():
            if task not in TASKS:
                raise PipelineError(f"mixing.overrides.{group}: unknown task {task!r}")
            overrides[(group, task)] = int(cap)
    try:
        if "overrides" in raw:
            return MixingPolicy(int(raw.get("default_cap", 30_000)), overrides)
        return MixingPolicy(int(raw.get("default_cap", 30_000)))
    except ValueError as exc:
        raise PipelineError(f"mixing: {exc}") from None


def _backends(raw: Mapping) -> dict[str, BackendConfig]:
    out = {}
    for name, spec in raw.items():
        spec = dict(spec or {})
        unknown = set(spec) - _BACKEND_KEYS
        if unknown:
            raise PipelineError(f"backends.{name}: unknown keys {sorted(unknown)}")
        spec.setdefault("name", name)
        try:
            out[name] = BackendConfig(**spec)
        except (TypeError, ValueError) as exc:
            raise PipelineError(f"backends.{name}: {exc}") from None
    return out


def config_from_mapping(raw: Mapping[str, Any]) -> PipelineConfig:
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise PipelineError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    for key, value in raw.items():
        if value is None:
            continue
        try:
            if key in _SCALARS:
                value = _SCALARS[key](value)
            elif key in _PATHS:
                value = Path(value)
            elif key == "proportions":
                value = {**DEFAULT_PROPORTIONS, **{t: tuple(v) for t, v in value.items()}}
            elif key == "mixing":
                value = _mixing_policy(value)
            elif key == "backends":
                value = _backends(value)
        except (TypeError, ValueError) as exc:
            raise PipelineError(f"{key}: {exc}") from None
        setattr(cfg, key, value)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise PipelineError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise PipelineError(f"{path}: top level must be a mapping")
    return config_from_mapping(raw)


def apply_flags(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = Path(args.out)
    if args.toy:
        cfg.corpus = None
    elif args.corpus is not None:
        cfg.corpus = Path(args.corpus)
    if getattr(args, "splits", None) is not None:
        cfg.splits = Path(args.splits)
    if getattr(args, "threshold", None) is not None:
        cfg.parse_failure_threshold = args.threshold
    return cfg


# -- manifests and stale-input checks -----------------------------------------------

def _rel(cfg: PipelineConfig, path: Path) -> str:
    try:
        return path.relative_to(cfg.out).as_posix()
    except ValueError:
        return path.name


def _digests(cfg: PipelineConfig, paths) -> dict[str, str]:
    return {_rel(cfg, p): jsonl.file_digest(p) for p in sorted(paths)}


def _manifest(cfg: PipelineConfig, stage: str, inputs: dict, outputs: dict, **extra) -> dict:
    return {
        "stage": stage,
        "tool_version": __version__,
        "seed": cfg.seed,
        "inputs": inputs,
        "outputs": outputs,
        **extra,
    }


def _require_stage(cfg: PipelineConfig, stage_dir: Path, producer: str) -> dict:
    """Load a stage manifest and warn about files changed since it was written."""
    path = stage_dir / "manifest.json"
    if not path.exists():
        raise PipelineError(f"missing inputs: {stage_dir} has no manifest.json; run `{producer}` first")
    manifest = jsonl.read_json(path)
    for rel, digest in manifest.get("outputs", {}).items():
        f = cfg.out / rel
        if not f.exists():
            raise PipelineError(f"missing inputs: {f} is listed in {path} but absent; rerun `{producer}`")
        if jsonl.file_digest(f) != digest:
            log.warning("digest mismatch: %s changed after `%s` wrote it", f, producer)
    for rel, digest in manifest.get("inputs", {}).items():
        f = cfg.out / rel
        if f.exists() and jsonl.file_digest(f) != digest:
            log.warning("stale inputs: %s changed since `%s` ran; rerun it", f, producer)
    if manifest.get("seed") != cfg.seed:
        log.warning("%s was produced with seed %s, current seed is %s", stage_dir, manifest.get("seed"), cfg.seed)
    return manifest


def _dirs(cfg: PipelineConfig) -> dict[str, Path]:
    return {
        "tasks": cfg.out / "tasks",
        "instructions": cfg.out / "instructions",
        "folds": cfg.out / "folds",
        "responses": cfg.out / "responses",
        "reports": cfg.out / "reports",
    }


def _groups(held_out: str | None) -> list[str]:
    return [held_out] if held_out else list(GROUPS)


# -- stages ---------------------------------------------------------------------------

def _corpus(cfg: PipelineConfig):
    if cfg.corpus is None:
        ref = resources.files("procbench").joinpath("data").joinpath(TOY_CORPUS)
        with resources.as_file(ref) as path:
            return load_corpus(path), f"bundled:{TOY_CORPUS}", jsonl.file_digest(path)
    if not cfg.corpus.exists():
        raise PipelineError(f"corpus {cfg.corpus} does not exist")
    return load_corpus(cfg.corpus), cfg.corpus.name, jsonl.file_digest(cfg.corpus)


def stage_gen_tasks(cfg: PipelineConfig) -> dict:
    corpus, label, digest = _corpus(cfg)
    result = generate_tasks(
        corpus, cfg.seed, loop_redo_bound=cfg.loop_redo_bound, cap=cfg.language_cap, max_traces=cfg.max_traces
    )
    out_dir = _dirs(cfg)["tasks"]
    paths = write_tasks(out_dir, result.instances)
    manifest = _manifest(
        cfg,
        "gen-tasks",
        {label: digest},
        _digests(cfg, paths.values()),
        settings=cfg.settings(),
        models=len(corpus),
        counts={t: len(v) for t, v in result.instances.items()},
        raw_counts=result.raw_counts,
        skipped={t: dict(sorted(s.items())) for t, s in result.skipped.items() if s},
    )
    jsonl.write_json(out_dir / "manifest.json", manifest)
    return manifest


def stage_build_instructions(cfg: PipelineConfig) -> dict:
    d = _dirs(cfg)
    upstream = _require_stage(cfg, d["tasks"], "gen-tasks")
    task_paths = [d["tasks"] / f"{task_file_stem(t)}.jsonl" for t in TASKS]
    instances = [i for p in task_paths for i in read_tasks(p)]
    items = compile_instructions(
        instances,
        cfg.proportions,
        cfg.seed,
        negative_instruction_rate=cfg.negative_instruction_rate,
        template_dir=cfg.template_dir,
    )
    paths = write_instructions(d["instructions"], items)
    shares = variant_shares(items)
    manifest = _manifest(
        cfg,
        "build-instructions",
        _digests(cfg, task_paths),
        _digests(cfg, paths.values()),
        proportions={t: list(v) for t, v in validate_proportions(cfg.proportions).items()},
        negative_instruction_rate=cfg.negative_instruction_rate,
        template_dir=str(cfg.template_dir) if cfg.template_dir else "bundled",
        counts={t: sum(1 for i in items if i.task == t) for t in TASKS},
        variant_shares={t: {v: round(s, 4) for v, s in shares[t].items()} for t in TASKS if t in shares},
        settings=upstream.get("settings", {}),
    )
    jsonl.write_json(d["instructions"] / "manifest.json", manifest)
    return manifest


def _load_splits(cfg: PipelineConfig, model_ids) -> tuple[dict[str, str], str]:
    if cfg.splits is None:
        return split_models(model_ids, cfg.seed), f"seeded 70/20/10 shuffle (seed {cfg.seed})"
    raw = jsonl.read_json(cfg.splits)
    bad = {m: b for m, b in raw.items() if b not in BUCKETS}
    if bad:
        raise PipelineError(f"{cfg.splits}: unknown buckets {sorted(set(bad.values()))}")
    missing = sorted(set(model_ids) - set(raw))
    if missing:
        raise PipelineError(f"{cfg.splits}: no bucket for {len(missing)} models, e.g. {missing[0]}")
    return dict(sorted(raw.items())), f"file {cfg.splits.name} ({jsonl.file_digest(cfg.splits)[:16]})"


def make_folds(cfg: PipelineConfig, datasets: Mapping[str, list], groups: Sequence[str]) -> dict[str, dict]:
    """Build and write the requested folds from in-memory instruction datasets."""
    d = _dirs(cfg)
    model_ids = {i.model_id for items in datasets.values() for i in items}
    assignment, source = _load_splits(cfg, model_ids)
    jsonl.write_json(d["folds"] / "splits.json", assignment)
    inst_paths = [d["instructions"] / f"{task_file_stem(t)}.jsonl" for t in TASKS]
    inputs = _digests(cfg, [p for p in inst_paths if p.exists()])
    manifests = {}
    for group in groups:
        fold = build_fold(group, datasets, assignment, cfg.mixing, cfg.seed)
        extra = {"tool_version": __version__, "inputs": inputs, "split_source": source}
        fold_dir = write_fold(fold, d["folds"], extra)
        manifests[group] = jsonl.read_json(fold_dir / "manifest.json")
    existing = [jsonl.read_json(p) for p in sorted(d["folds"].glob("fold-*/manifest.json"))]
    problems = check_leakage(existing)
    if problems:
        raise PipelineError("leakage across folds: " + "; ".join(problems))
    outputs = sorted(p for p in d["folds"].glob("fold-*/*.jsonl"))
    jsonl.write_json(
        d["folds"] / "manifest.json",
        _manifest(
            cfg,
            "make-folds",
            inputs,
            _digests(cfg, outputs + [d["folds"] / "splits.json"]),
            folds=sorted(p.parent.name for p in d["folds"].glob("fold-*/manifest.json")),
            split_source=source,
            leakage_problems=problems,
        ),
    )
    return manifests


def stage_make_folds(cfg: PipelineConfig, held_out: str | None) -> dict[str, dict]:
    d = _dirs(cfg)
    _require_stage(cfg, d["instructions"], "build-instructions")
    datasets = {t: read_instructions(d["instructions"] / f"{task_file_stem(t)}.jsonl") for t in TASKS}
    return make_folds(cfg, datasets, _groups(held_out))


def _fold_dir(cfg: PipelineConfig, group: str) -> Path:
    fold_dir = _dirs(cfg)["folds"] / f"fold-{group}"
    if not (fold_dir / "manifest.json").exists():
        raise PipelineError(f"missing inputs: {fold_dir} not found; run `make-folds --held-out {group}` first")
    return fold_dir


def stage_run_inference(cfg: PipelineConfig, backend_name: str, held_out: str | None, split: str = TEST) -> dict:
    backend = cfg.backend(backend_name)
    _require_stage(cfg, _dirs(cfg)["folds"], "make-folds")
    summary = {}
    for group in _groups(held_out):
        fold_dir = _fold_dir(cfg, group)
        items = read_split(fold_dir, split)
        records = run_batch(items, backend, cfg.cache_root)
        out = _dirs(cfg)["responses"] / backend.backend_id / f"fold-{group}.jsonl"
        write_responses(out, records)
        errors = sum(1 for r in records if r.error)
        summary[group] = {
            "instances": len(records),
            "cached": sum(1 for r in records if r.cached),
            "errors": errors,
        }
        if errors:
            log.warning("fold-%s: %d of %d requests failed", group, errors, len(records))
    return summary


def _response_digest(records) -> str:
    # latency varies between runs, so only the answers enter the digest
    return jsonl.digest(sorted((r["instance_id"], r.get("raw_output") or "") for r in records))


def stage_evaluate(cfg: PipelineConfig, backend_name: str, held_out: str | None, split: str = TEST) -> dict:
    backend = cfg.backend(backend_name)
    reports = {}
    for group in _groups(held_out):
        fold_dir = _fold_dir(cfg, group)
        test_path = fold_dir / f"{split}.jsonl"
        items = read_split(fold_dir, split)
        resp_path = _dirs(cfg)["responses"] / backend.backend_id / f"fold-{group}.jsonl"
        if not resp_path.exists():
            raise PipelineError(f"missing inputs: {resp_path}; run `run-inference --backend {backend_name}` first")
        records = read_responses(resp_path)
        report = evaluate_fold(
            items,
            records,
            loop_redo_bound=cfg.loop_redo_bound,
            cap=cfg.language_cap,
            failure_threshold=cfg.parse_failure_threshold,
            held_out=group,
        )
        report = {
            "backend": backend.backend_id,
            "split": split,
            "tool_version": __version__,
            "seed": cfg.seed,
            "inputs": {_rel(cfg, test_path): jsonl.file_digest(test_path), _rel(cfg, resp_path): _response_digest(records)},
            **report,
        }
        out_dir = _dirs(cfg)["reports"] / backend.backend_id
        jsonl.write_json(out_dir / f"fold-{group}.json", report)
        jsonl.write_text(out_dir / f"fold-{group}.txt", render_report(report))
        reports[group] = report
    return reports


def stage_report(cfg: PipelineConfig, backend_name: str, held_out: str | None) -> str:
    backend = cfg.backend(backend_name)
    out_dir = _dirs(cfg)["reports"] / backend.backend_id
    parts = []
    for group in _groups(held_out):
        path = out_dir / f"fold-{group}.json"
        if not path.exists():
            if held_out:
                raise PipelineError(f"missing inputs: {path}; run `evaluate --backend {backend_name}` first")
            continue
        parts.append(f"== backend {backend.backend_id}, fold-{group} ==\n" + render_report(jsonl.read_json(path)))
    if not parts:
        raise PipelineError(f"no reports under {out_dir}; run `evaluate --backend {backend_name}` first")
    text = "\n".join(parts)
    if not held_out:
        jsonl.write_text(out_dir / "summary.txt", text)
    return text


# -- argument parsing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML pipeline configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output root (overrides the config)")
    p.add_argument("--corpus", help="process-tree corpus file")
    p.add_argument("--toy", action="store_true", help="use the bundled toy corpus")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"procbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    groups = sorted(GROUPS)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        return p

    add("gen-tasks", "derive the five task datasets from the corpus")
    add("build-instructions", "compile instruction datasets with variants")
    p = add("make-folds", "build leave-one-group-out folds")
    p.add_argument("--held-out", choices=groups, help="build only this fold")
    p.add_argument("--splits", help="JSON file mapping model_id to train/validation/test")
    for name, help_text in (("run-inference", "answer a fold's instances with a backend"),
                            ("evaluate", "score responses and write reports")):
        p = add(name, help_text)
        p.add_argument("--backend", default=ORACLE, help=f"configured backend name or one of {ORACLE}, {RANDOM}")
        p.add_argument("--held-out", choices=groups)
        p.add_argument("--split", choices=(TEST, VALIDATION), default=TEST)
        if name == "evaluate":
            p.add_argument("--threshold", type=float, help="parse-failure threshold (overrides the config)")
    p = add("report", "print the plain-text report tables")
    p.add_argument("--backend", default=ORACLE)
    p.add_argument("--held-out", choices=groups)
    add("validate-config", "check the configuration and exit")
    p = add("pipeline", "run every stage in order")
    p.add_argument("--backend", default=ORACLE)
    p.add_argument("--splits", help="JSON file mapping model_id to train/validation/test")
    p.add_argument("--threshold", type=float)
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = apply_flags(load_config(args.config), args)
    problems = cfg.check()
    if problems:
        raise PipelineError("invalid configuration:\n  " + "\n  ".join(problems))
    cmd = args.command
    if cmd == "validate-config":
        kinds = ", ".join(f"{n} ({b.kind})" for n, b in sorted(cfg.backends.items()))
        print(f"config OK; seed {cfg.seed}; out {cfg.out}; backends: {kinds or 'none'}")
        return 0
    if cmd == "gen-tasks":
        m = stage_gen_tasks(cfg)
        print("tasks: " + ", ".join(f"{t} {n}" for t, n in m["counts"].items()))
    elif cmd == "build-instructions":
        m = stage_build_instructions(cfg)
        print("instructions: " + ", ".join(f"{t} {n}" for t, n in m["counts"].items()))
    elif cmd == "make-folds":
        for group, m in stage_make_folds(cfg, args.held_out).items():
            print(f"fold-{group}: " + ", ".join(f"{k} {v}" for k, v in m["counts"].items()))
    elif cmd == "run-inference":
        for group, s in stage_run_inference(cfg, args.backend, args.held_out, args.split).items():
            print(f"fold-{group}: {s['instances']} responses ({s['cached']} cached, {s['errors']} errors)")
    elif cmd == "evaluate":
        reports = stage_evaluate(cfg, args.backend, args.held_out, args.split)
        return _print_reports(reports)
    elif cmd == "report":
        print(stage_report(cfg, args.backend, args.held_out), end="")
    elif cmd == "pipeline":
        stage_gen_tasks(cfg)
        stage_build_instructions(cfg)
        stage_make_folds(cfg, None)
        stage_run_inference(cfg, args.backend, None)
        reports = stage_evaluate(cfg, args.backend, None)
        print(stage_report(cfg, args.backend, None), end="")
        return EXIT_THRESHOLD if any(r["parse_failure_exceeded"] for r in reports.values()) else 0
    return 0


def _print_reports(reports: dict) -> int:
    failed = False
    for group, report in reports.items():
        scores = ", ".join(f"{t} {e['value']:.4f}" for t, e in report["tasks"].items())
        print(f"fold-{group}: {scores}")
        if report["parse_failure_exceeded"]:
            failed = True
            print(
                f"fold-{group}: parse-failure rate above {report['settings']['parse_failure_threshold']} for "
                + ", ".join(report["parse_failure_exceeded"]),
                file=sys.stderr,
            )
    return EXIT_THRESHOLD if failed else 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GatewayError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
