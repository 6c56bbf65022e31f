"""``tokenlab`` command line.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Diagnostics go to
stderr; data goes to files (``--out``) or stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import runner
from .checkpoint import from_model, save_checkpoint
from .embeddings import ABLATIONS, TokenizerSpec
from .events import write_event_file
from .gradcheck import (INPUT_TOLERANCE, PARAM_TOLERANCE, run_encoder_input_checks,
                        run_shipped_checks)
from .pretrained import ENCODERS, EncoderResources, build_cache, build_mapping, get_encoder
from .synth import PRESET_NAMES, generate_cohort, parse_spec_text, preset_spec
from .training import train

COMMANDS = ("gen-cohort", "build-cache", "train", "run-suite", "report", "grad-check")
OVERRIDE_SECTIONS = ("model", "train", "tokenizer")


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -- overrides -------------------------------------------------------------------------

def split_overrides(argv: list[str]) -> tuple[list[str], dict]:
    """Pull ``++section.key=value`` items out of ``argv``."""
    rest, found = [], {s: {} for s in OVERRIDE_SECTIONS}
    for item in argv:
        if not item.startswith("++"):
            rest.append(item)
            continue
        key, sep, value = item[2:].partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name or section not in OVERRIDE_SECTIONS:
            raise ValidationError(f"bad override {item!r}; expected ++model|train|tokenizer.FIELD=VALUE")
        found[section][name] = value
    return rest, found


def read_override_file(path) -> dict:
    """``section.key = value`` lines, the same grammar as ``++`` overrides."""
    found = {s: {} for s in OVERRIDE_SECTIONS}
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in OVERRIDE_SECTIONS:
            raise ValidationError(f"{path}:{lineno}: expected 'model|train|tokenizer.FIELD = VALUE'")
        found[section][name.strip()] = value.strip()
    return found


def _merge(base: dict, extra: dict) -> dict:
    return {s: {**base.get(s, {}), **extra.get(s, {})} for s in OVERRIDE_SECTIONS}


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None


# -- parser ----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed_help: str, config_help: str, out_help: str, out_required=False):
    p.add_argument("--seed", type=int, default=0, help=seed_help)
    p.add_argument("--config", metavar="FILE", help=config_help)
    p.add_argument("--out", metavar="PATH", required=out_required, help=out_help)


def _cohort_args(p):
    p.add_argument("--cohort", default="standard", metavar="PRESET|FILE",
                   help=f"generator preset ({', '.join(PRESET_NAMES)}) or event file (default: standard)")
    p.add_argument("--n", type=int, metavar="N", help="patients when --cohort is a preset")
    p.add_argument("--cohort-seed", type=int, default=0, help="generator seed when --cohort is a preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenlab", description="Event tokenization experiments on synthetic EHR cohorts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-cohort", help="generate a synthetic cohort event file")
    p.add_argument("--preset", choices=PRESET_NAMES, help="generator preset (or give --config)")
    p.add_argument("--n", type=int, metavar="N", help="override the number of patients")
    _common(p, "generator seed", "generator spec file (key = value lines)", "event file to write",
            out_required=True)

    p = sub.add_parser("build-cache", help="precompute a frozen description-embedding cache")
    _cohort_args(p)
    p.add_argument("--encoder", choices=sorted(ENCODERS), default="tiny-clinical", help="description encoder")
    p.add_argument("--mapping", choices=("original", "enhanced"), default="enhanced", help="description mapping")
    _common(p, "mapping seed (which codes keep descriptions in original mode)",
            "unused; accepted for uniformity", "cache file to write", out_required=True)

    p = sub.add_parser("train", help="train one model and report its test AUROC",
                       epilog="Overrides: ++model.FIELD=V, ++train.FIELD=V, ++tokenizer.FIELD=V "
                              "(e.g. ++model.token_dim=96).")
    _cohort_args(p)
    p.add_argument("--task", required=True, help="task id to predict")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default="full", help="tokenizer ablation mask")
    p.add_argument("--profile", choices=sorted(runner.PROFILES), default="desk", help="base model/train sizes")
    p.add_argument("--cache-dir", metavar="DIR", help="reuse/write frozen caches here")
    p.add_argument("--log", action="store_true", help="print per-epoch progress to stderr")
    _common(p, "training seed (split, init, shuffling, dropout)",
            "override file with section.key = value lines", "checkpoint file to write")

    p = sub.add_parser("run-suite", help="run an experiment grid (resumable)",
                       epilog="Overrides: ++model.FIELD=V, ++train.FIELD=V apply to every variant.")
    p.add_argument("suite", nargs="?", choices=runner.SUITE_NAMES, help="named suite (or give --config)")
    _cohort_args(p)
    p.add_argument("--tasks", help="comma-separated task ids (default: the four standard tasks)")
    p.add_argument("--seeds", help="seed list, e.g. 1-10 or 1,2,3 (default 1-10)")
    p.add_argument("--profile", choices=sorted(runner.PROFILES), default="desk", help="base model/train sizes")
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.add_argument("--log", action="store_true", help="print one line per finished run to stderr")
    _common(p, "added to every training seed (default 0)", "experiment config file",
            "results CSV (appended; existing runs are skipped)", out_required=True)

    p = sub.add_parser("report", help="render tables and plot data from a results CSV")
    p.add_argument("suite", nargs="?", choices=runner.SUITE_NAMES, help="named suite (or give --config)")
    p.add_argument("--results", required=True, metavar="CSV", help="results file from run-suite")
    p.add_argument("--tasks", help="comma-separated task ids (default: tasks present in the results)")
    p.add_argument("--format", choices=("md", "csv"), default="md", help="report table format")
    _common(p, "unused; accepted for uniformity", "experiment config file", "output directory",
            out_required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every shipped configuration")
    _common(p, "seed for sampled parameters and batches", "unused; accepted for uniformity",
            "JSON file for the per-configuration errors")
    return parser


# -- commands ----------------------------------------------------------------------------

def _cohort(args):
    if args.cohort in PRESET_NAMES:
        return generate_cohort(preset_spec(args.cohort, args.n, args.cohort_seed))
    from .events import parse_event_file
    if not Path(args.cohort).exists():
        raise ValidationError(f"--cohort {args.cohort!r} is neither a preset nor an existing file")
    if args.n is not None:
        raise ValidationError("--n applies only to generator presets")
    return parse_event_file(args.cohort)


def cmd_gen_cohort(args, overrides):
    if (args.preset is None) == (args.config is None):
        raise ValidationError("give exactly one of --preset or --config")
    if args.preset is not None:
        spec = preset_spec(args.preset, args.n, args.seed)
    else:
        spec = parse_spec_text(_read_text(args.config))
        spec = replace(spec, seed=args.seed, **({"n_patients": args.n} if args.n is not None else {}))
    write_event_file(generate_cohort(spec), args.out)
    return 0


def cmd_build_cache(args, overrides):
    cohort = _cohort(args)
    mapping = build_mapping(cohort.vocabulary, args.mapping, args.seed)
    cache = build_cache(cohort.vocabulary, mapping, get_encoder(args.encoder), args.out)
    print(f"{args.out}\t{cache.encoder}\t{cache.rows.shape[0]}x{cache.rows.shape[1]}\t{cache.digest:016x}")
    return 0


def _configs(args, overrides):
    if args.config:
        overrides = _merge(read_override_file(args.config), overrides)
    model, trn = runner.PROFILES[args.profile]
    model = runner.override_dataclass(model, overrides["model"])
    trn = runner.override_dataclass(trn, {**overrides["train"], "seed": str(args.seed)})
    return model, trn, overrides


def cmd_train(args, overrides):
    model_cfg, train_cfg, overrides = _configs(args, overrides)
    tok = TokenizerSpec().with_ablation(ABLATIONS[args.ablation])
    tok_fields = {**tok.to_fields(), **overrides["tokenizer"]}
    tok = TokenizerSpec.from_fields(tok_fields)
    cohort = _cohort(args)
    if args.task not in cohort.task_ids:
        raise ValidationError(f"cohort has no task {args.task!r}; tasks: {', '.join(cohort.task_ids)}")
    resources = EncoderResources(cohort.vocabulary, cache_dir=args.cache_dir)
    log = (lambda m: print(m, file=sys.stderr)) if args.log else None
    result = train(cohort, args.task, tok, model_cfg, train_cfg, variant=args.ablation,
                   resources=resources, log=log)
    if args.out:
        save_checkpoint(from_model(result.model, extra={"task": args.task, "seed": args.seed,
                                                        "test_auroc": result.record.auroc}), args.out)
    sys.stdout.write(runner.format_results([result.record]))
    return 0


def _parse_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _experiment(args, overrides=None):
    if (args.suite is None) == (args.config is None):
        raise ValidationError("give exactly one of a suite name or --config")
    if args.config:
        return runner.parse_experiment_text(_read_text(args.config))
    kwargs = {}
    if getattr(args, "profile", None):
        model, trn = runner.PROFILES[args.profile]
        if overrides:
            model = runner.override_dataclass(model, overrides["model"])
            trn = runner.override_dataclass(trn, overrides["train"])
        kwargs.update(model=model, train_cfg=trn)
    if getattr(args, "cohort", None):
        kwargs.update(cohort=args.cohort, n_patients=args.n, cohort_seed=args.cohort_seed)
    if args.tasks:
        kwargs["tasks"] = _parse_list(args.tasks)
    if getattr(args, "seeds", None):
        kwargs["seeds"] = runner._parse_seeds(args.seeds)
    return runner.suite_spec(args.suite, **kwargs)


def cmd_run_suite(args, overrides):
    if overrides["tokenizer"]:
        raise ValidationError("run-suite accepts only ++model.* and ++train.* overrides")
    spec = _experiment(args, overrides)
    if args.config and (overrides["model"] or overrides["train"]):
        spec = replace(spec, model=runner.override_dataclass(spec.model, overrides["model"]),
                       train=runner.override_dataclass(spec.train, overrides["train"]))
    if args.seed:
        spec = replace(spec, seeds=tuple(s + args.seed for s in spec.seeds))
    if args.workers < 1:
        raise ValidationError("--workers must be >= 1")
    log = (lambda m: print(m, file=sys.stderr)) if args.log else None
    records = runner.run_grid(spec, args.out, workers=args.workers, log=log)
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        print(f"run failed: {r.variant} {r.task} seed={r.seed}: {r.status}", file=sys.stderr)
    return 2 if failed else 0


def cmd_report(args, overrides):
    try:
        records = runner.read_results(args.results)
    except FileNotFoundError:
        raise ValidationError(f"no such file: {args.results}") from None
    if not args.tasks and args.suite:
        present = []
        for r in records:
            if r.task not in present:
                present.append(r.task)
        args.tasks = ",".join(present) or None
    spec = _experiment(args)
    paths = runner.render_report(records, spec, args.out, fmt=args.format)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def cmd_grad_check(args, overrides):
    results = run_shipped_checks(seed=args.seed)
    inputs = run_encoder_input_checks(seed=args.seed)
    ok = True
    for r in results:
        status = "ok" if r.passed() else "FAIL"
        ok &= r.passed()
        print(f"{r.label}\t{r.max_rel_error:.3e}\t{r.worst}\t{status}")
    for name, err in inputs.items():
        status = "ok" if err <= INPUT_TOLERANCE else "FAIL"
        ok &= err <= INPUT_TOLERANCE
        print(f"input:{name}\t{err:.3e}\t\t{status}")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "parameter_tolerance": PARAM_TOLERANCE, "input_tolerance": INPUT_TOLERANCE,
            "configurations": {r.label: r.max_rel_error for r in results},
            "input_gradients": inputs}, indent=2, sort_keys=True) + "\n")
    if not ok:
        print("grad-check: tolerance exceeded", file=sys.stderr)
    return 0 if ok else 2


HANDLERS = {"gen-cohort": cmd_gen_cohort, "build-cache": cmd_build_cache, "train": cmd_train,
            "run-suite": cmd_run_suite, "report": cmd_report, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = split_overrides(argv)
        parser = build_parser()
        try:
            args = parser.parse_args(rest)
        except SystemExit as exc:   # --help
            return int(exc.code or 0)
        if args.command not in ("train", "run-suite") and any(overrides.values()):
            raise ValidationError(f"{args.command} does not take ++ overrides")
        return HANDLERS[args.command](args, overrides)
    except ValueError as exc:   # every validation error in the package derives from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
