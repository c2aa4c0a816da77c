"""Command-line entry point: data generation, synchronization, training, baselines, evaluation, checks.

Every command parses and validates all of its inputs before it touches the
output directory, so a bad flag or config leaves the file system untouched.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from crossview_uda.config import TrainConfig, ViewRole, validate_config
from crossview_uda.sync import Manifest, SplitAssignment, build_sync_groups, stratified_split
from crossview_uda.synthetic import Corpus, GeneratorSpec, default_spec, generate_corpus, generate_foreign_corpus

log = logging.getLogger("crossview_uda")

LOCK_NAME = ".lock"
# named substream for the foreign corpus shift, next to the trainer's init/batch/pairing streams
STREAM_FOREIGN = 4


class UsageError(Exception):
    """Bad inputs detected before any side effect."""


# -- shared helpers ---------------------------------------------------------


@contextmanager
def run_lock(out_dir: Path):
    """Single-writer guard for a run directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another run (remove {lock} if that run is gone)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def load_config(args) -> TrainConfig:
    try:
        cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    problems = validate_config(cfg)
    if problems:
        raise UsageError("invalid config: " + "; ".join(problems))
    return cfg


def load_spec(args) -> GeneratorSpec:
    try:
        spec = GeneratorSpec.load(args.spec) if args.spec else default_spec()
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read generator spec: {exc}") from None
    if args.seed is not None:
        spec = GeneratorSpec(**{**spec.__dict__, "seed": args.seed})
    problems = spec.violations()
    if problems:
        raise UsageError("invalid generator spec: " + "; ".join(problems))
    return spec


def foreign_shift_seed(seed: int) -> int:
    return int(np.random.default_rng([seed, STREAM_FOREIGN]).integers(2**31))


def _manifest_path(data: Path) -> Path:
    return data / "manifest.jsonl" if data.is_dir() else data


def load_corpus(data: Path, strip_target_labels: bool = False) -> Corpus:
    spec_path = data / "spec.json"
    if not data.is_dir() or not spec_path.exists():
        raise UsageError(f"{data} is not a corpus directory (expected manifest.jsonl and spec.json)")
    spec = GeneratorSpec.load(spec_path)
    return Corpus.load(data, (spec.T, spec.H, spec.W, spec.C), strip_target_labels=strip_target_labels)


def check_corpus_dims(corpus: Corpus, cfg: TrainConfig) -> None:
    ref = next(iter(corpus.arrays.values()))
    if tuple(ref.shape) != (cfg.T, cfg.H, cfg.W, cfg.C) or corpus.manifest.K != cfg.K:
        raise UsageError(f"corpus clips {tuple(ref.shape)} with K={corpus.manifest.K} do not match the config "
                         f"({cfg.T}, {cfg.H}, {cfg.W}, {cfg.C}) with K={cfg.K}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Optional[str], flag: str, must_exist: bool = True) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if must_exist and not p.exists():
        raise UsageError(f"{flag} {p} does not exist")
    return p


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = load_spec(args)
    out = _require(args.out, "--out", must_exist=False)
    with run_lock(out):
        clips, manifest = generate_corpus(spec)
        Corpus.from_generated(clips, manifest).save(out)
        spec.save(out / "spec.json")
    log.info("wrote %d clips to %s", len(clips), out)
    return 0


def cmd_gen_foreign(args) -> int:
    spec = load_spec(args)
    out = _require(args.out, "--out", must_exist=False)
    if args.magnitude < 0:
        raise UsageError("--magnitude must be >= 0")
    with run_lock(out):
        clips, manifest = generate_foreign_corpus(spec, foreign_shift_seed(spec.seed), args.magnitude)
        Corpus.from_generated(clips, manifest).save(out)
        spec.save(out / "spec.json")
    log.info("wrote %d foreign clips to %s", len(clips), out)
    return 0


def _load_manifest(args) -> Manifest:
    path = _manifest_path(_require(args.data, "--data"))
    try:
        return Manifest.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None


def _groups_for(manifest: Manifest, min_overlap: int):
    source = next((m.name for m in manifest.modalities.values() if m.domain_role.value == "source"), None)
    return build_sync_groups(manifest, manifest.anchor_view, manifest.views_with_role(ViewRole.POSITIVE),
                             min_overlap, modality=source)


def group_records(groups) -> list[dict]:
    return [{
        "group_id": g.group_id, "class": g.class_id, "anchor": g.anchor.clip_ref,
        "positives": [p.clip_ref for p in g.positives], "overlap_window": list(g.overlap_window),
        "flagged": g.flagged,
    } for g in groups]


def cmd_sync(args) -> int:
    manifest = _load_manifest(args)
    out = _require(args.out, "--out", must_exist=False)
    if args.min_overlap < 1:
        raise UsageError("--min-overlap must be >= 1")
    groups = _groups_for(manifest, args.min_overlap)
    with run_lock(out):
        (out / "groups.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in group_records(groups)))
    log.info("%d groups (%d flagged singletons)", len(groups), sum(g.flagged for g in groups))
    return 0


def cmd_split(args) -> int:
    manifest = _load_manifest(args)
    out = _require(args.out, "--out", must_exist=False)
    groups = _groups_for(manifest, args.min_overlap)
    try:
        split = stratified_split(groups, seed=args.seed if args.seed is not None else 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with run_lock(out):
        split.save(out / "split.jsonl")
    return 0


def _bundle(args, cfg: TrainConfig):
    from crossview_uda.trainer import prepare_data

    corpus = load_corpus(_require(args.data, "--data"))
    check_corpus_dims(corpus, cfg)
    return prepare_data(corpus, cfg.seed)


def cmd_train_phase1(args) -> int:
    from crossview_uda.trainer import train_phase1

    cfg = load_config(args)
    out = _require(args.out, "--out", must_exist=False)
    bundle = _bundle(args, cfg)
    with run_lock(out):
        result = train_phase1(bundle, cfg)
        result.save(out / "phase1.ckpt", out / "metrics_phase1.jsonl", {"phase": 1})
        cfg.save(out / "config.json")
    return 0


def cmd_train_phase2(args) -> int:
    from crossview_uda.trainer import load_phase_model, train_phase2

    cfg = load_config(args)
    out = _require(args.out, "--out", must_exist=False)
    ckpt = _require(args.checkpoint, "--checkpoint")
    try:
        model = load_phase_model(ckpt, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bundle = _bundle(args, cfg)
    with run_lock(out):
        result = train_phase2(model, bundle, cfg)
        result.save(out / "phase2.ckpt", out / "metrics_phase2.jsonl", {"phase": 2})
        cfg.save(out / "config.json")
    return 0


def _home_and_foreign(args, cfg: TrainConfig):
    """Corpora from --data/--foreign when given, else generated in memory from --spec and the seed."""
    from crossview_uda.trainer import prepare_data

    if args.data:
        home = load_corpus(_require(args.data, "--data"))
        foreign = load_corpus(_require(args.foreign, "--foreign")) if args.foreign else None
        spec = None
    else:
        spec = load_spec(args)
        home = Corpus.from_generated(*generate_corpus(spec))
        foreign = Corpus.from_generated(*generate_foreign_corpus(spec, foreign_shift_seed(spec.seed)))
    check_corpus_dims(home, cfg)
    if foreign is not None:
        check_corpus_dims(foreign, cfg)
    return prepare_data(home, cfg.seed), (prepare_data(foreign, cfg.seed) if foreign else None), spec


def cmd_baseline(args) -> int:
    from crossview_uda.evaluation import evaluate_matrix, write_results
    from crossview_uda.trainer import BASELINES, final_model, run_baseline

    cfg = load_config(args)
    out = _require(args.out, "--out", must_exist=False)
    kinds = list(BASELINES) if args.kind == "all" else [args.kind]
    if args.spec and args.data:
        raise UsageError("--spec and --data are mutually exclusive")
    home, foreign, spec = _home_and_foreign(args, cfg)
    with run_lock(out):
        cfg.save(out / "config.json")
        if spec is not None:
            spec.save(out / "spec.json")
        cache, models = {}, {}
        for kind in kinds:
            log.info("baseline %s", kind)
            result = run_baseline(kind, home, cfg, cache)
            kind_dir = out / kind
            kind_dir.mkdir(exist_ok=True)
            result["phase1"].save(kind_dir / "phase1.ckpt", kind_dir / "metrics_phase1.jsonl",
                                  {"phase": 1, "baseline": kind})
            if result["phase2"] is not None:
                result["phase2"].save(kind_dir / "phase2.ckpt", kind_dir / "metrics_phase2.jsonl",
                                      {"phase": 2, "baseline": kind})
            models[kind] = final_model(result)
        if args.kind == "all":
            cells = evaluate_matrix(models, home, foreign)
            write_results(out, cells)
            sys.stdout.write((out / "results_table.txt").read_text())
    return 0


def _checkpoint_map(args) -> dict:
    """NAME=PATH pairs, or every <kind>/phase{2,1}.ckpt under --runs."""
    from crossview_uda.trainer import BASELINES

    paths = {}
    for item in args.checkpoint or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        paths[name] = _require(path, "--checkpoint")
    if args.runs:
        runs = _require(args.runs, "--runs")
        for kind in BASELINES:
            for name in ("phase2.ckpt", "phase1.ckpt"):
                if (runs / kind / name).exists():
                    paths.setdefault(kind, runs / kind / name)
                    break
    if not paths:
        raise UsageError("evaluate needs --checkpoint NAME=PATH or --runs DIR")
    return paths


def cmd_evaluate(args) -> int:
    from crossview_uda.evaluation import evaluate_matrix, write_results
    from crossview_uda.trainer import load_phase_model

    paths = _checkpoint_map(args)
    out = _require(args.out, "--out", must_exist=False)
    try:
        models = {name: load_phase_model(p) for name, p in paths.items()}
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = next(iter(models.values())).cfg
    home, foreign, _ = _home_and_foreign(args, cfg.replace(seed=args.seed if args.seed is not None else cfg.seed))
    with run_lock(out):
        cells = evaluate_matrix(models, home, foreign)
        write_results(out, cells)
        sys.stdout.write((out / "results_table.txt").read_text())
    return 0


def _run_check(args, fn, name) -> int:
    report = fn(seed=args.seed if args.seed is not None else 0)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        with run_lock(out):
            (out / f"{name}.json").write_text(text)
    sys.stdout.write(text)
    return 0 if report["passed"] else 1


def cmd_gradcheck(args) -> int:
    from crossview_uda.verification import gradcheck

    return _run_check(args, gradcheck, "gradcheck")


def cmd_oracle_check(args) -> int:
    from crossview_uda.verification import oracle_check

    return _run_check(args, oracle_check, "oracle_check")


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from crossview_uda.trainer import BASELINES

    parser = argparse.ArgumentParser(prog="crossview-uda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, fn, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config/spec seed)")
        for flag in flags:
            flag(p)
        return p

    def out(p, required=True):
        p.add_argument("--out", required=required, help="output directory")

    def spec(p):
        p.add_argument("--spec", help="generator spec JSON (default: built-in benchmark spec)")

    def config(p):
        p.add_argument("--config", help="training config JSON (default: built-in defaults)")

    def data(p, required=False):
        p.add_argument("--data", required=required, help="corpus directory written by gen-data")

    def foreign(p):
        p.add_argument("--foreign", help="foreign corpus directory written by gen-foreign")

    def overlap(p):
        p.add_argument("--min-overlap", type=int, default=1, help="minimum shared frames for a sync match")

    command("gen-data", cmd_gen_data, "render the home corpus", spec, out)
    g = command("gen-foreign", cmd_gen_foreign, "render a shifted foreign corpus", spec, out)
    g.add_argument("--magnitude", type=float, default=1.0, help="shift magnitude (0 = no shift)")
    command("sync", cmd_sync, "build synchronization groups from a manifest",
            lambda p: data(p, True), out, overlap)
    command("split", cmd_split, "stratified train/val/test split of the sync groups",
            lambda p: data(p, True), out, overlap)
    command("train-phase1", cmd_train_phase1, "cross-view contrastive training", config, lambda p: data(p, True), out)
    p2 = command("train-phase2", cmd_train_phase2, "cross-modal adaptation from a phase-1 checkpoint",
                 config, lambda p: data(p, True), out)
    p2.add_argument("--checkpoint", required=True, help="phase-1 checkpoint")
    b = command("baseline", cmd_baseline, "train one or all baselines (all also evaluates)",
                config, spec, data, foreign, out)
    b.add_argument("--kind", required=True, choices=[*BASELINES, "all"])
    e = command("evaluate", cmd_evaluate, "evaluate checkpoints on every (view, modality, corpus) cell",
                spec, data, foreign, out)
    e.add_argument("--checkpoint", action="append", help="NAME=PATH (repeatable)")
    e.add_argument("--runs", help="baseline output directory")
    command("gradcheck", cmd_gradcheck, "finite-difference gradient verification", lambda p: out(p, False))
    command("oracle-check", cmd_oracle_check, "loss kernels against loop oracles", lambda p: out(p, False))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog} {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
