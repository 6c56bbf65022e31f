import csv

import numpy as np
import pytest

from tokenlab.embeddings import TokenizerSpec
from tokenlab.model import ModelConfig
from tokenlab.runner import (RESULTS_TAG, Comparison, ExperimentError, ExperimentSpec, TrainConfig, Variant,
                             append_result, check_controlled, differing_fields, format_experiment, format_results,
                             marker_for, parse_experiment_text, parse_results, read_results, render_report,
                             run_grid, suite_spec, textcode_axes, time_encoder_sweep)
from tokenlab.stats import TestResult
from tokenlab.synth import generate_cohort, preset_spec
from tokenlab.training import RunRecord

TINY = ModelConfig(token_dim=8, n_layers=1, n_heads=2, ffn_dim=8, max_seq_len=16, dropout_rate=0.0)
FAST = TrainConfig(max_epochs=1)


def test_ablation_suite_shape():
    spec = suite_spec("triplet-ablation")
    assert [v.name for v in spec.variants] == ["Triplet", "No time", "No value", "Code-only"]
    code_only = spec.variant("Code-only").tokenizer
    assert not code_only.use_time and not code_only.use_value
    assert spec.family_size("ablation") == 3


def test_textcode_axes_controlled():
    axes = textcode_axes()
    assert [a for a, _, _ in axes] == ["Mapping", "Trainability", "Size", "Domain"]
    fields = {a: differing_fields(x, y) for a, x, y in axes}
    assert fields == {"Mapping": ["mapping"], "Trainability": ["code_source"],
                      "Size": ["encoder"], "Domain": ["encoder"]}
    train = axes[1]
    assert train[1].tokenizer.mapping == train[2].tokenizer.mapping == "enhanced"
    size = axes[2]
    assert size[1].tokenizer.code_source == size[2].tokenizer.code_source == "frozen"


def test_time_sweep():
    variants = time_encoder_sweep()
    assert len(variants) == 14
    for v in variants[1:]:
        assert differing_fields(variants[0], v) == ["time_encoder"]


def test_uncontrolled_comparison_rejected():
    a = Variant("a", TokenizerSpec())
    b = Variant("b", TokenizerSpec(use_value=False, time_encoder="time2vec:2"))
    spec = ExperimentSpec("x", "small", ("t",), (a, b), (1,), (Comparison("a", "b", "f"),))
    with pytest.raises(ExperimentError, match="differs in"):
        check_controlled(spec)


CONFIG = """name = demo
cohort = small    # inline comments are allowed
tasks = readmission_like, mortality_like
seeds = 1-3, 7
model.token_dim = 16
train.max_epochs = 2

[variant base]
pathway = triplet

[variant code]
ablation = code-only
model.n_layers = 0

[comparisons]
fam = base vs code
"""


def test_experiment_config_round_trip():
    spec = parse_experiment_text(CONFIG)
    assert spec.seeds == (1, 2, 3, 7) and spec.model.token_dim == 16 and spec.train.max_epochs == 2
    assert spec.variant("code").model_config(spec.model).n_layers == 0
    assert parse_experiment_text(format_experiment(spec)) == spec
    for bad in (CONFIG.replace("tasks", "taskz"), CONFIG.replace("base vs code", "base code"),
                CONFIG.replace("seeds = 1-3, 7", "seeds = 1, 1"), CONFIG + "\n[weird]\nx = 1\n"):
        with pytest.raises(ExperimentError):
            parse_experiment_text(bad)


def _rand_record(rng, i):
    status = "ok" if rng.random() < 0.8 else "failed: TrainingError: boom, again"
    auroc = float(rng.random()) if status == "ok" else float("nan")
    return RunRecord(f"v,{i}" if i % 3 == 0 else f"v{i}", "task", int(rng.integers(0, 100)), auroc,
                     int(rng.integers(0, 10**7)), float(rng.random() * 100), status)


def _same(a, b):
    return all((x.variant, x.task, x.seed, x.trainable_params, x.wall_seconds, x.status)
               == (y.variant, y.task, y.seed, y.trainable_params, y.wall_seconds, y.status)
               and (x.auroc == y.auroc or (np.isnan(x.auroc) and np.isnan(y.auroc)))
               for x, y in zip(a, b)) and len(a) == len(b)


def test_results_round_trip(tmp_path, rng):
    recs = [_rand_record(rng, i) for i in range(30)]
    text = format_results(recs)
    assert text.startswith(RESULTS_TAG + "\n")
    assert _same(parse_results(text), recs) and format_results(parse_results(text)) == text
    path = tmp_path / "r.csv"
    for r in recs:
        append_result(path, r)
    assert _same(read_results(path), recs)


def test_results_validation():
    with pytest.raises(ExperimentError):
        parse_results("variant,task\n")
    bad = format_results([RunRecord("v", "t", 1, 0.5, 1, 1.0)]).replace("0.5", "1.5")
    with pytest.raises(ExperimentError):
        parse_results(bad)


def test_marker_rules():
    def res(p, pc, direction):
        return TestResult(statistic=1.0, p_two_sided=p, p_corrected=pc, n_effective=10, direction=direction)

    assert marker_for(res(0.002, 0.008, "up")) == ("†", "↑")
    assert marker_for(res(0.02, 0.08, "down")) == ("*", "↓")
    assert marker_for(res(0.2, 0.8, "down")) == ("", "")
    assert marker_for(None) == ("", "")


def _records(variant, values, task="t", params=100):
    return [RunRecord(variant, task, s + 1, v, params, 1.0) for s, v in enumerate(values)]


def test_report_markers_and_missing_cells(tmp_path):
    a = Variant("Trainable", TokenizerSpec(pathway="textcode", code_source="trainable",
                                           encoder="tiny-clinical", mapping="enhanced"))
    b = Variant("Frozen", TokenizerSpec(pathway="textcode", code_source="frozen",
                                        encoder="tiny-clinical", mapping="enhanced"))
    c = Variant("Other", TokenizerSpec(pathway="textcode", code_source="frozen",
                                       encoder="large-clinical", mapping="enhanced"))
    spec = ExperimentSpec("demo", "small", ("t", "u"), (a, b, c), tuple(range(1, 11)),
                          (Comparison("Trainable", "Frozen", "x"), Comparison("Frozen", "Other", "y")))
    base = list(np.linspace(0.80, 0.81, 10))
    recs = _records("Trainable", base) + _records("Frozen", [v + 0.01 for v in base]) + _records("Other", [v + 0.01 for v in base])
    warnings = []
    paths = render_report(recs, spec, tmp_path, warn=warnings.append)
    text = paths["report"].read_text()
    assert "†↑" in text
    assert any("'u'" in w for w in warnings) and "—" in text
    lines = [l for l in text.splitlines() if l.startswith("| t | y")]
    assert lines and lines[0].rstrip().endswith("|  |")
    with open(paths["frontier"]) as fh:
        assert len(list(csv.DictReader(fh))) == 3
    csv_paths = render_report(recs, spec, tmp_path / "c", fmt="csv", warn=warnings.append)
    with open(csv_paths["report"]) as fh:
        rows = list(csv.DictReader(fh))
    # markers are recomputable from the stored p-values
    for row in rows:
        if row["p_two_sided"]:
            res = TestResult(float(row["statistic"]), float(row["p_two_sided"]), float(row["p_corrected"]),
                             int(row["n_effective"]), row["direction"])
            assert "".join(marker_for(res)) == row["marker"]


@pytest.fixture(scope="module")
def tiny_cohort():
    return generate_cohort(preset_spec("small", n_patients=200, seed=2))


def _tiny_spec():
    return suite_spec("triplet-ablation", cohort="small", tasks=("mortality_like",), seeds=(1, 2),
                      model=TINY, train_cfg=FAST)


def test_grid_resume_and_parallel_agree(tmp_path, tiny_cohort):
    spec = _tiny_spec()
    serial = run_grid(spec, tmp_path / "a.csv", cohort=tiny_cohort)
    assert len(serial) == 8 and all(r.status == "ok" for r in serial)
    again = run_grid(spec, tmp_path / "a.csv", cohort=tiny_cohort)
    assert len(read_results(tmp_path / "a.csv")) == 8
    assert [r.auroc for r in again] == [r.auroc for r in serial]
    parallel = run_grid(spec, tmp_path / "b.csv", cohort=tiny_cohort, workers=2)
    assert [r.auroc for r in parallel] == [r.auroc for r in serial]


def test_grid_records_failures(tmp_path, tiny_cohort):
    spec = ExperimentSpec("bad", "small", ("mortality_like",), (Variant("v", TokenizerSpec()),), (1,),
                          model=ModelConfig(token_dim=8, n_heads=2, ffn_dim=8, max_seq_len=16),
                          train=TrainConfig(max_epochs=1, learning_rate=float("1e300")))
    with np.errstate(all="ignore"):
        recs = run_grid(spec, tmp_path / "f.csv", cohort=tiny_cohort)
    assert recs[0].status.startswith("failed: TrainingError: non-finite loss")
    assert np.isnan(read_results(tmp_path / "f.csv")[0].auroc)
    with pytest.raises(ExperimentError):
        run_grid(ExperimentSpec("t", "small", ("nope",), spec.variants, (1,)), tmp_path / "g.csv",
                 cohort=tiny_cohort)
