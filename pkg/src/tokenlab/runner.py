"""Experiment grids: specs, resumable execution, results files and reports."""

from __future__ import annotations

import configparser
import csv
import io
import math
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .embeddings import ABLATIONS, LETE_PRESETS, TIME2VEC_KS, TokenizerSpec
from .events import Cohort, parse_event_file
from .model import ModelConfig
from .pretrained import EncoderResources
from .stats import StatsError, TestResult, pair_by_seed, summarize, wilcoxon_signed_rank
from .synth import PRESET_NAMES, TASK_PRESETS, generate_cohort, preset_spec
from .training import RunRecord, TrainConfig, count_trainable_params, encode_cohort, train

RESULTS_TAG = "# tokenlab-results v1"
RESULTS_COLUMNS = ("variant", "task", "seed", "auroc", "trainable_params", "wall_seconds", "status")
DEFAULT_SEEDS = tuple(range(1, 11))
STANDARD_TASKS = tuple(TASK_PRESETS)

# Desk-scale profile used by the shipped suites (one CPU core, minutes per grid).
DESK_MODEL = ModelConfig(token_dim=32, n_layers=1, n_heads=2, ffn_dim=64, max_seq_len=128, dropout_rate=0.1)
DESK_TRAIN = TrainConfig(max_epochs=4, weight_decay=10.0)
PROFILES = {"desk": (DESK_MODEL, DESK_TRAIN), "reference": (ModelConfig(), TrainConfig())}


class ExperimentError(ValueError):
    pass


# -- config values -------------------------------------------------------------------

def _convert(kind, text: str):
    if kind in (bool, "bool"):
        if text.lower() not in ("true", "false"):
            raise ExperimentError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        val = float(text)
        if not math.isfinite(val):
            raise ExperimentError(f"non-finite value {text!r}")
        return val
    return text


def override_dataclass(obj, overrides: dict):
    """``dataclasses.replace`` with string values converted to each field's type."""
    kinds = {f.name: f.type for f in fields(obj)}
    kwargs = {}
    for key, text in overrides.items():
        if key not in kinds:
            raise ExperimentError(f"unknown {type(obj).__name__} field {key!r}")
        try:
            kwargs[key] = _convert(kinds[key], str(text))
        except ValueError as exc:
            raise ExperimentError(f"{key}: {exc}") from None
    try:
        return replace(obj, **kwargs)
    except ValueError as exc:
        raise ExperimentError(str(exc)) from None


def ablation_name(tok: TokenizerSpec) -> str:
    for name, mask in ABLATIONS.items():
        if (mask.use_time, mask.use_value) == (tok.use_time, tok.use_value):
            return name
    raise ExperimentError("unreachable ablation mask")


def _variant_tokenizer(body: dict) -> TokenizerSpec:
    body = dict(body)
    if "ablation" in body:
        name = body.pop("ablation")
        if name not in ABLATIONS or "use_time" in body or "use_value" in body:
            raise ExperimentError(f"bad ablation {name!r} (use one of {', '.join(ABLATIONS)})")
        body["use_time"] = "true" if ABLATIONS[name].use_time else "false"
        body["use_value"] = "true" if ABLATIONS[name].use_value else "false"
    return TokenizerSpec.from_fields(body)


# -- spec ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    tokenizer: TokenizerSpec
    model_overrides: tuple = ()   # sorted (field, value-string) pairs

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return override_dataclass(base, dict(self.model_overrides))

    def serialized(self) -> dict[str, str]:
        """Flat field map; the (use_time, use_value) pair is one ``ablation`` field."""
        out = dict(self.tokenizer.to_fields())
        del out["use_time"], out["use_value"]
        out["ablation"] = ablation_name(self.tokenizer)
        out.update({f"model.{k}": str(v) for k, v in self.model_overrides})
        return out


@dataclass(frozen=True)
class Comparison:
    baseline: str
    test: str
    family: str


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    cohort: str                     # generator preset name or event-file path
    tasks: tuple
    variants: tuple
    seeds: tuple = DEFAULT_SEEDS
    comparisons: tuple = ()
    n_patients: int | None = None
    cohort_seed: int = 0
    model: ModelConfig = DESK_MODEL
    train: TrainConfig = DESK_TRAIN

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ExperimentError("variant names must be unique")
        if not self.variants or not self.tasks or not self.seeds:
            raise ExperimentError("experiment needs at least one variant, task and seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ExperimentError("duplicate seeds")
        for c in self.comparisons:
            for side in (c.baseline, c.test):
                if side not in names:
                    raise ExperimentError(f"comparison references unknown variant {side!r}")
        for v in self.variants:
            v.model_config(self.model)

    def variant(self, name: str) -> Variant:
        for v in self.variants:
            if v.name == name:
                return v
        raise ExperimentError(f"unknown variant {name!r}")

    def family_size(self, family: str) -> int:
        return sum(1 for c in self.comparisons if c.family == family)

    def grid(self) -> list[tuple[str, str, int]]:
        return [(v.name, t, s) for v in self.variants for t in self.tasks for s in self.seeds]


def differing_fields(a: Variant, b: Variant) -> list[str]:
    sa, sb = a.serialized(), b.serialized()
    return sorted(k for k in set(sa) | set(sb) if sa.get(k) != sb.get(k))


def check_controlled(spec: ExperimentSpec) -> None:
    """Every comparison must change exactly one serialized field."""
    for c in spec.comparisons:
        diff = differing_fields(spec.variant(c.baseline), spec.variant(c.test))
        if len(diff) != 1:
            raise ExperimentError(f"comparison {c.baseline!r} vs {c.test!r} differs in {diff}")


def _parse_seeds(text: str) -> tuple:
    out = []
    for part in (p.strip() for p in text.split(",")):
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-"))
            if hi < lo:
                raise ExperimentError(f"bad seed range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def parse_experiment_text(text: str) -> ExperimentSpec:
    """``key = value`` lines, then ``[variant NAME]`` and ``[comparisons]`` sections."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",), default_section="\x00")
    cp.optionxform = str
    try:
        cp.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ExperimentError(f"cannot parse experiment config: {exc}") from None
    top = dict(cp["experiment"])
    model, trn = DESK_MODEL, DESK_TRAIN
    profile = top.pop("profile", None)
    if profile is not None:
        if profile not in PROFILES:
            raise ExperimentError(f"unknown profile {profile!r}")
        model, trn = PROFILES[profile]
    kwargs: dict = {}
    try:
        model = override_dataclass(model, {k[6:]: v for k, v in top.items() if k.startswith("model.")})
        trn = override_dataclass(trn, {k[6:]: v for k, v in top.items() if k.startswith("train.")})
        for key, val in top.items():
            if key.startswith(("model.", "train.")):
                continue
            if key in ("name", "cohort"):
                kwargs[key] = val.strip()
            elif key == "tasks":
                kwargs[key] = tuple(t.strip() for t in val.split(",") if t.strip())
            elif key == "seeds":
                kwargs[key] = _parse_seeds(val)
            elif key in ("n_patients", "cohort_seed"):
                kwargs[key] = int(val)
            else:
                raise ExperimentError(f"unknown experiment key {key!r}")
        variants, comparisons = [], []
        for section in cp.sections()[1:]:
            body = dict(cp[section])
            if section.startswith("variant "):
                name = section[len("variant "):].strip()
                tok = {k: v for k, v in body.items() if not k.startswith("model.")}
                mo = tuple(sorted((k[6:], v) for k, v in body.items() if k.startswith("model.")))
                variants.append(Variant(name, _variant_tokenizer(tok), mo))
            elif section == "comparisons":
                for family, val in body.items():
                    for item in (x.strip() for x in val.split(";") if x.strip()):
                        base, sep, test = item.partition(" vs ")
                        if not sep:
                            raise ExperimentError(f"comparison {item!r} must read 'A vs B'")
                        comparisons.append(Comparison(base.strip(), test.strip(), family))
            else:
                raise ExperimentError(f"unknown section [{section}]")
    except ValueError as exc:
        if isinstance(exc, ExperimentError):
            raise
        raise ExperimentError(str(exc)) from None
    for req in ("name", "cohort", "tasks"):
        if req not in kwargs:
            raise ExperimentError(f"experiment config requires {req!r}")
    return ExperimentSpec(variants=tuple(variants), comparisons=tuple(comparisons), model=model,
                          train=trn, **kwargs)


def format_experiment(spec: ExperimentSpec) -> str:
    lines = [f"name = {spec.name}", f"cohort = {spec.cohort}", f"tasks = {', '.join(spec.tasks)}",
             f"seeds = {', '.join(str(s) for s in spec.seeds)}", f"cohort_seed = {spec.cohort_seed}"]
    if spec.n_patients is not None:
        lines.append(f"n_patients = {spec.n_patients}")
    lines += [f"model.{k} = {v}" for k, v in spec.model.as_dict().items()]
    for f in fields(spec.train):
        v = getattr(spec.train, f.name)
        if f.name != "seed":
            lines.append(f"train.{f.name} = {v!r}" if isinstance(v, float) else f"train.{f.name} = {v}")
    for v in spec.variants:
        lines += ["", f"[variant {v.name}]"]
        lines += [f"{k} = {val}" for k, val in v.serialized().items()]
    if spec.comparisons:
        lines += ["", "[comparisons]"]
        fams: dict = {}
        for c in spec.comparisons:
            fams.setdefault(c.family, []).append(f"{c.baseline} vs {c.test}")
        lines += [f"{fam} = {'; '.join(items)}" for fam, items in fams.items()]
    return "\n".join(lines) + "\n"


def load_experiment(path) -> ExperimentSpec:
    return parse_experiment_text(Path(path).read_text())


# -- suites --------------------------------------------------------------------------

ABLATION_NAMES = {"full": "{}", "no-time": "No time", "no-value": "No value", "code-only": "Code-only"}


def ablation_suite(base: TokenizerSpec = TokenizerSpec()) -> list[Variant]:
    """Full / No time / No value / Code-only, varying only the ablation mask."""
    if not (base.use_time and base.use_value):
        raise ExperimentError("ablation suite needs a full (time + value) base spec")
    head = "Triplet" if base.pathway == "triplet" else "TextCode"
    return [Variant(label.format(head), base.with_ablation(ABLATIONS[key]))
            for key, label in ABLATION_NAMES.items()]


def _textcode(source: str, encoder: str, mapping: str) -> TokenizerSpec:
    return TokenizerSpec(pathway="textcode", code_source=source, encoder=encoder, mapping=mapping)


TEXTCODE_VARIANTS = {
    "Trainable tiny original": _textcode("trainable", "tiny-clinical", "original"),
    "Trainable tiny enhanced": _textcode("trainable", "tiny-clinical", "enhanced"),
    "Frozen tiny enhanced": _textcode("frozen", "tiny-clinical", "enhanced"),
    "Frozen large-clinical enhanced": _textcode("frozen", "large-clinical", "enhanced"),
    "Frozen large-general enhanced": _textcode("frozen", "large-general", "enhanced"),
}

TEXTCODE_AXES = (
    ("Mapping", "Trainable tiny original", "Trainable tiny enhanced"),
    ("Trainability", "Trainable tiny enhanced", "Frozen tiny enhanced"),
    ("Size", "Frozen tiny enhanced", "Frozen large-clinical enhanced"),
    ("Domain", "Frozen large-clinical enhanced", "Frozen large-general enhanced"),
)


def textcode_axes() -> list[tuple[str, Variant, Variant]]:
    """(axis, baseline, test) for the four single-change TextCode comparisons."""
    out = []
    for axis, a, b in TEXTCODE_AXES:
        va, vb = Variant(a, TEXTCODE_VARIANTS[a]), Variant(b, TEXTCODE_VARIANTS[b])
        if len(differing_fields(va, vb)) != 1:
            raise ExperimentError(f"axis {axis} is not controlled")
        out.append((axis, va, vb))
    return out


def time_encoder_sweep(base: TokenizerSpec = TokenizerSpec()) -> list[Variant]:
    """CVE baseline, Time2Vec over the k grid, and the three LeTE presets."""
    out = [Variant("CVE", replace(base, time_encoder="cve"))]
    out += [Variant(f"Time2Vec k={k}", replace(base, time_encoder=f"time2vec:{k}")) for k in TIME2VEC_KS]
    out += [Variant(f"LeTE {p}", replace(base, time_encoder=f"lete:{p}")) for p in LETE_PRESETS]
    return out


SUITE_NAMES = ("triplet-ablation", "textcode-axes", "time-sweep")


def suite_spec(name: str, cohort: str = "standard", tasks=STANDARD_TASKS, seeds=DEFAULT_SEEDS,
               n_patients: int | None = None, cohort_seed: int = 0,
               model: ModelConfig = DESK_MODEL, train_cfg: TrainConfig = DESK_TRAIN) -> ExperimentSpec:
    if name == "triplet-ablation":
        variants = ablation_suite()
        comparisons = [Comparison(variants[0].name, v.name, "ablation") for v in variants[1:]]
    elif name == "textcode-axes":
        variants = [Variant(k, v) for k, v in TEXTCODE_VARIANTS.items()]
        comparisons = [Comparison(a, b, "textcode-axes") for _, a, b in TEXTCODE_AXES]
    elif name == "time-sweep":
        variants = time_encoder_sweep()
        comparisons = [Comparison("CVE", v.name, "time-encoder") for v in variants[1:]]
    else:
        raise ExperimentError(f"unknown suite {name!r}; choose from {', '.join(SUITE_NAMES)}")
    spec = ExperimentSpec(name, cohort, tuple(tasks), tuple(variants), tuple(seeds), tuple(comparisons),
                          n_patients, cohort_seed, model, train_cfg)
    check_controlled(spec)
    return spec


# -- results file --------------------------------------------------------------------

def _record_row(r: RunRecord) -> list[str]:
    return [r.variant, r.task, str(r.seed), repr(float(r.auroc)), str(r.trainable_params),
            repr(float(r.wall_seconds)), r.status]


def format_results(records) -> str:
    buf = io.StringIO()
    buf.write(RESULTS_TAG + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_COLUMNS)
    for r in records:
        w.writerow(_record_row(r))
    return buf.getvalue()


def parse_results(text: str) -> list[RunRecord]:
    lines = text.split("\n")
    if not lines or lines[0] != RESULTS_TAG:
        raise ExperimentError(f"results file must start with {RESULTS_TAG!r}")
    rows = list(csv.reader(io.StringIO("\n".join(lines[1:]))))
    if not rows or tuple(rows[0]) != RESULTS_COLUMNS:
        raise ExperimentError("results header row does not match " + ",".join(RESULTS_COLUMNS))
    out = []
    for lineno, row in enumerate(rows[1:], start=3):
        if len(row) != len(RESULTS_COLUMNS):
            raise ExperimentError(f"results line {lineno}: expected {len(RESULTS_COLUMNS)} fields")
        variant, task, seed, auc, params, wall, status = row
        try:
            rec = RunRecord(variant, task, int(seed), float(auc), int(params), float(wall), status)
        except ValueError as exc:
            raise ExperimentError(f"results line {lineno}: {exc}") from None
        if status == "ok" and not 0.0 <= rec.auroc <= 1.0:
            raise ExperimentError(f"results line {lineno}: auroc outside [0, 1]")
        out.append(rec)
    return out


def read_results(path) -> list[RunRecord]:
    return parse_results(Path(path).read_text())


def write_results(records, path) -> None:
    Path(path).write_text(format_results(records))


def append_result(path, record: RunRecord) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(format_results([]))
        csv.writer(fh, lineterminator="\n").writerow(_record_row(record))
        fh.flush()
        os.fsync(fh.fileno())


# -- execution -----------------------------------------------------------------------

def load_cohort(spec: ExperimentSpec) -> Cohort:
    if spec.cohort in PRESET_NAMES:
        return generate_cohort(preset_spec(spec.cohort, spec.n_patients, spec.cohort_seed))
    path = Path(spec.cohort)
    if not path.exists():
        raise ExperimentError(f"cohort {spec.cohort!r} is neither a preset nor an existing file")
    return parse_event_file(path)


_STATE: dict = {}


def _setup(spec, cohort, resources):
    _STATE.clear()
    _STATE.update(spec=spec, cohort=cohort, resources=resources, encoded={})


def _run_one(job) -> RunRecord:
    variant_name, task, seed = job
    spec, cohort, resources = _STATE["spec"], _STATE["cohort"], _STATE["resources"]
    variant = spec.variant(variant_name)
    start = time.perf_counter()
    try:
        cfg = variant.model_config(spec.model)
        if cfg.max_seq_len not in _STATE["encoded"]:
            _STATE["encoded"][cfg.max_seq_len] = encode_cohort(cohort, cfg.max_seq_len)
        result = train(cohort, task, variant.tokenizer, cfg, replace(spec.train, seed=seed),
                       variant=variant_name, resources=resources,
                       encoded=_STATE["encoded"][cfg.max_seq_len])
        return result.record
    except Exception as exc:  # recorded, grid continues
        msg = " ".join(str(exc).split()) or type(exc).__name__
        return RunRecord(variant_name, task, seed, float("nan"), 0, time.perf_counter() - start,
                         f"failed: {type(exc).__name__}: {msg}")


def run_grid(spec: ExperimentSpec, results_path, cohort: Cohort | None = None, workers: int = 1,
             resources: EncoderResources | None = None, log=None) -> list[RunRecord]:
    """Run every missing (variant, task, seed) triple, appending each record as it finishes.

    Returns the records of this grid (old and new) in grid order.
    """
    check_controlled(spec)
    results_path = Path(results_path)
    existing = read_results(results_path) if results_path.exists() and results_path.stat().st_size else []
    done = {(r.variant, r.task, r.seed): r for r in existing}
    jobs = [j for j in spec.grid() if j not in done]
    if jobs:
        cohort = cohort if cohort is not None else load_cohort(spec)
        unknown = set(spec.tasks) - set(cohort.task_ids)
        if unknown:
            raise ExperimentError(f"cohort has no labels for tasks {sorted(unknown)}")
        if resources is None:
            resources = EncoderResources(cohort.vocabulary)
        for v in spec.variants:   # build shared read-only inputs before any fork
            if v.tokenizer.pathway == "textcode" and v.tokenizer.code_source == "frozen":
                resources.cache(v.tokenizer.encoder, v.tokenizer.mapping)
        _setup(spec, cohort, resources)
        if workers > 1 and len(jobs) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(min(workers, len(jobs)), initializer=_setup,
                          initargs=(spec, cohort, resources)) as pool:
                for rec in pool.imap_unordered(_run_one, jobs):
                    append_result(results_path, rec)
                    done[(rec.variant, rec.task, rec.seed)] = rec
                    if log:
                        log(f"{rec.variant} {rec.task} seed={rec.seed}: {rec.status} auroc={rec.auroc:.4f}")
        else:
            for job in jobs:
                rec = _run_one(job)
                append_result(results_path, rec)
                done[job] = rec
                if log:
                    log(f"{rec.variant} {rec.task} seed={rec.seed}: {rec.status} auroc={rec.auroc:.4f}")
    return [done[j] for j in spec.grid()]


# -- reporting -----------------------------------------------------------------------

@dataclass
class ComparisonRow:
    task: str
    comparison: Comparison
    family_size: int
    baseline: tuple | None       # (mean, sd, n) in AUROC units
    test: tuple | None
    result: TestResult | None
    marker: str = ""
    arrow: str = ""
    unmatched: int = 0


def marker_for(result: TestResult | None, alpha: float = 0.05) -> tuple[str, str]:
    """``†`` when Bonferroni-corrected p < alpha, ``*`` when only uncorrected p < alpha."""
    if result is None:
        return "", ""
    if result.p_corrected < alpha:
        mark = "†"
    elif result.p_two_sided < alpha:
        mark = "*"
    else:
        return "", ""
    return mark, {"up": "↑", "down": "↓"}.get(result.direction, "")


def _ok(records, variant, task):
    return [r for r in records if r.variant == variant and r.task == task and r.status == "ok"]


def _stats(runs) -> tuple | None:
    if not runs:
        return None
    vals = [r.auroc for r in runs]
    if len(vals) == 1:
        return (vals[0], float("nan"), 1)
    mean, sd = summarize(vals)
    return (mean, sd, len(vals))


def compare(records, spec: ExperimentSpec) -> list[ComparisonRow]:
    rows = []
    for task in spec.tasks:
        for c in spec.comparisons:
            a, b = _ok(records, c.baseline, task), _ok(records, c.test, task)
            m = spec.family_size(c.family)
            pairs, unmatched = pair_by_seed(a, b)
            result = wilcoxon_signed_rank(pairs, family_size=m) if pairs else None
            mark, arrow = marker_for(result)
            rows.append(ComparisonRow(task, c, m, _stats(a), _stats(b), result, mark, arrow, len(unmatched)))
    return rows


def fmt_cell(stats: tuple | None) -> str:
    """AUROC mean±sd in percent to one decimal; ``—`` for a missing cell."""
    if stats is None:
        return "—"
    mean, sd, n = stats
    if n < 2:
        return f"{100 * mean:.1f}"
    return f"{100 * mean:.1f}±{100 * sd:.1f}"


def _md_table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(str(x) for x in row) + " |" for row in rows]
    return out


def _fmt_p(p) -> str:
    return "—" if p is None else f"{p:.4g}"


def best_variant_rows(rows: list[ComparisonRow]) -> list[tuple]:
    """Per (task, family) sharing one baseline: baseline, best test variant, its p."""
    out = []
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.task, r.comparison.family, r.comparison.baseline), []).append(r)
    for (task, family, base), items in groups.items():
        scored = [r for r in items if r.test is not None]
        if not scored:
            continue
        best = max(scored, key=lambda r: r.test[0])
        out.append((task, family, base, best))
    return out


def render_report(records, spec: ExperimentSpec, out_dir, fmt: str = "md", warn=None) -> dict[str, Path]:
    """Write the report table plus waterfall and frontier plot-data files."""
    if fmt not in ("md", "csv"):
        raise ExperimentError("report format must be md or csv")
    warn = warn or (lambda msg: print(f"warning: {msg}", file=sys.stderr))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    failed = [r for r in records if r.status != "ok"]
    if failed:
        warn(f"{len(failed)} failed runs excluded from the report")
    cells = {}
    for task in spec.tasks:
        for v in spec.variants:
            cells[(task, v.name)] = _stats(_ok(records, v.name, task))
            if cells[(task, v.name)] is None:
                warn(f"no results for variant {v.name!r} on task {task!r}; cell rendered as —")
    rows = compare(records, spec)
    paths = {}

    if fmt == "md":
        first_mark = {}
        for r in rows:
            first_mark.setdefault((r.task, r.comparison.test), r.marker + r.arrow)
        lines = [f"# {spec.name}", "",
                 "AUROC μ±σ (percent) over seeds. † Bonferroni-corrected p<0.05; * uncorrected p<0.05; "
                 "arrows give the direction relative to the baseline; blank cells are not significant.", ""]
        lines += _md_table(["Task"] + [v.name for v in spec.variants],
                           [[task] + [fmt_cell(cells[(task, v.name)]) + first_mark.get((task, v.name), "")
                                      for v in spec.variants] for task in spec.tasks])
        lines += ["", "## Comparisons", ""]
        lines += _md_table(
            ["Task", "Family (m)", "Baseline", "Test", "Baseline μ±σ", "Test μ±σ", "W", "p", "p corrected", "Sig."],
            [[r.task, f"{r.comparison.family} ({r.family_size})", r.comparison.baseline, r.comparison.test,
              fmt_cell(r.baseline), fmt_cell(r.test),
              "—" if r.result is None else f"{r.result.statistic:g}",
              _fmt_p(r.result and r.result.p_two_sided), _fmt_p(r.result and r.result.p_corrected),
              r.marker + r.arrow] for r in rows])
        best = [b for b in best_variant_rows(rows) if spec.family_size(b[1]) > 1]
        if best:
            lines += ["", "## Best variant per task", ""]
            lines += _md_table(
                ["Task", "Baseline", "Best Variant", "Wilcoxon p"],
                [[task, f"{base} {fmt_cell(r.baseline)}", f"{r.comparison.test} {fmt_cell(r.test)}{r.marker}{r.arrow}",
                  _fmt_p(r.result and r.result.p_two_sided)] for task, _, base, r in best])
        paths["report"] = out_dir / "report.md"
        paths["report"].write_text("\n".join(lines) + "\n")
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "family", "family_size", "baseline", "test", "baseline_mean", "baseline_sd",
                    "test_mean", "test_sd", "statistic", "p_two_sided", "p_corrected", "n_effective",
                    "direction", "marker"])
        for r in rows:
            bm = r.baseline or (None, None, 0)
            tm = r.test or (None, None, 0)
            res = r.result
            w.writerow([r.task, r.comparison.family, r.family_size, r.comparison.baseline, r.comparison.test,
                        _num(bm[0]), _num(bm[1]), _num(tm[0]), _num(tm[1]),
                        _num(res and res.statistic), _num(res and res.p_two_sided),
                        _num(res and res.p_corrected), "" if res is None else res.n_effective,
                        "" if res is None else res.direction, r.marker + r.arrow])
        paths["report"] = out_dir / "report.csv"
        paths["report"].write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "variant", "n", "mean_auroc", "sd_auroc"])
    for task in spec.tasks:
        for v in spec.variants:
            s = cells[(task, v.name)]
            w.writerow([task, v.name, 0 if s is None else s[2], _num(s and s[0]), _num(s and s[1])])
    paths["waterfall"] = out_dir / "waterfall.csv"
    paths["waterfall"].write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "trainable_params", "n", "mean_auroc", "sd_auroc"])
    for v in spec.variants:
        runs = [r for r in records if r.variant == v.name and r.status == "ok" and r.task in spec.tasks]
        params = runs[0].trainable_params if runs else ""
        by_seed: dict = {}
        for r in runs:
            by_seed.setdefault(r.seed, []).append(r.auroc)
        per_seed = [float(np.mean(x)) for x in by_seed.values()]
        if not per_seed:
            w.writerow([v.name, params, 0, "", ""])
            continue
        mean = float(np.mean(per_seed))
        sd = summarize(per_seed)[1] if len(per_seed) > 1 else float("nan")
        w.writerow([v.name, params, len(per_seed), repr(mean), _num(sd)])
    paths["frontier"] = out_dir / "frontier.csv"
    paths["frontier"].write_text(buf.getvalue())
    return paths


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def expected_trainable_params(spec: ExperimentSpec, vocab_size: int, resources=None) -> dict[str, int]:
    return {v.name: count_trainable_params(v.tokenizer, v.model_config(spec.model), vocab_size, resources)
            for v in spec.variants}
