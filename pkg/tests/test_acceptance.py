"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``criterion N [PASS|FAIL]`` line (collected again in the
terminal summary) before asserting. Criteria 4, 5, 6 and 9 share one grid of
training runs on 20,000-patient cohorts; set ``TOKENLAB_ACCEPTANCE_DIR`` to
keep its results file between sessions (the grid resumes from it).
"""
import itertools
import os
import time

import numpy as np
import pytest
import scipy.stats

from conftest import random_cohort, record_criterion
from tokenlab.checkpoint import checkpoint_bytes, checkpoint_from_bytes, from_model
from tokenlab.embeddings import ABLATIONS, TokenizerSpec, build_tokenizer, embed_event, event_terms
from tokenlab.events import Event, format_cohort, parse_event_text
from tokenlab.gradcheck import (CHECK_MODELS, INPUT_TOLERANCE, PARAM_TOLERANCE,
                                run_encoder_input_checks, run_shipped_checks, shipped_tokenizers)
from tokenlab.kernels import fnv1a64
from tokenlab.model import ModelConfig, SequenceClassifier, count_params
from tokenlab.pretrained import EncoderResources, cache_bytes, cache_from_bytes, make_cache
from tokenlab.runner import (DESK_MODEL, DESK_TRAIN, ExperimentSpec, Comparison, Variant, compare,
                             differing_fields, format_results, parse_results, run_grid, suite_spec,
                             textcode_axes)
from tokenlab.stats import PairedSample, auroc, wilcoxon_signed_rank
from tokenlab.synth import bayes_optimal_auroc, generate_cohort, make_vocabulary, preset_spec
from tokenlab.training import RunRecord, TrainConfig, train

pytestmark = pytest.mark.slow

SEEDS = tuple(range(1, 11))
GRID_TASKS = ("mortality_like", "readmission_like")


def _fmt(x):
    return f"{x:.3g}"


# -- 1 -------------------------------------------------------------------------------

def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    results = run_shipped_checks(seed=0)
    inputs = run_encoder_input_checks(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    worst_input = max(inputs.values())
    # the head is linear in its own parameters; a code-only table model is linear end to end
    head = max(r.per_param[k] for r in results if r.label.endswith("/linear-head") for k in ("head.w", "head.b"))
    code_only = next(r for r in results if r.label == "triplet-code-only/linear-head").max_rel_error
    expected = len(shipped_tokenizers()) * len(CHECK_MODELS)
    passed = (len(results) == expected and worst.max_rel_error <= PARAM_TOLERANCE
              and worst_input <= INPUT_TOLERANCE and head <= 1e-8 and code_only <= 1e-8 and elapsed < 120)
    record_criterion(1, "gradient fidelity", passed,
                     f"{len(results)} configs, worst {_fmt(worst.max_rel_error)} ({worst.label}:{worst.worst}); "
                     f"encoder inputs {_fmt(worst_input)}; linear head {_fmt(head)}; "
                     f"code-only linear {_fmt(code_only)}; {elapsed:.0f}s")
    assert passed


# -- 2 -------------------------------------------------------------------------------

def _brute_auroc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    twice = 2 * int((pos[:, None] > neg[None, :]).sum()) + int((pos[:, None] == neg[None, :]).sum())
    return twice / (2 * len(pos) * len(neg))


def _enumerated_p(diffs):
    d = diffs[diffs != 0.0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = scipy.stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    sums = signs @ ranks
    lo, hi = int((sums <= w).sum()), int((sums >= w).sum())
    return min(1.0, 2.0 * min(lo / 2 ** n, hi / 2 ** n))


def test_criterion_02_statistics_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    auroc_bad = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        scores = rng.integers(0, 20, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        auroc_bad += auroc(scores, labels) != _brute_auroc(scores, labels)
    wil_bad = 0
    for _ in range(500):
        n = int(rng.integers(1, 13))
        d = np.round(rng.normal(size=n), int(rng.integers(0, 3)))     # coarse rounding makes ties and zeros
        pairs = [PairedSample(i, 0.0, float(x)) for i, x in enumerate(d)]
        wil_bad += wilcoxon_signed_rank(pairs).p_two_sided != _enumerated_p(d)
    tenth = wilcoxon_signed_rank([PairedSample(i, 0.5, 0.6 + i / 100) for i in range(10)], family_size=4)
    elapsed = time.perf_counter() - start
    passed = (auroc_bad == 0 and wil_bad == 0 and tenth.p_two_sided == 2 / 1024
              and tenth.p_corrected < 0.05 and elapsed < 60)
    record_criterion(2, "statistics oracle equivalence", passed,
                     f"auroc mismatches {auroc_bad}/1000, wilcoxon mismatches {wil_bad}/500, "
                     f"all-positive p={tenth.p_two_sided!r} corrected {tenth.p_corrected!r}; {elapsed:.1f}s")
    assert passed


# -- 3 -------------------------------------------------------------------------------

def _ablation_tokenizers(rng, vocab_size, d):
    res = EncoderResources(make_vocabulary(vocab_size))
    bases = [TokenizerSpec(), TokenizerSpec(time_encoder="time2vec:4"), TokenizerSpec(time_encoder="lete:fourier-heavy"),
             TokenizerSpec(pathway="textcode", code_source="frozen", encoder="large-clinical", mapping="enhanced"),
             TokenizerSpec(pathway="textcode", code_source="trainable", encoder="tiny-clinical", mapping="original")]
    out = []
    for spec in bases:
        full = build_tokenizer(spec, vocab_size, d, rng, np.float32, res)
        full.value_mean = rng.normal(size=vocab_size).astype(np.float32)
        full.value_std = rng.uniform(0.5, 2, vocab_size).astype(np.float32)
        variants = {}
        for name, ablation in ABLATIONS.items():
            tok = build_tokenizer(spec.with_ablation(ablation), vocab_size, d, rng, np.float32, res)
            tok.code, tok.value_mean, tok.value_std = full.code, full.value_mean, full.value_std
            tok.time_enc = full.time_enc if tok.time_enc is not None else None
            tok.value_enc = full.value_enc if tok.value_enc is not None else None
            variants[name] = tok
        out.append(variants)
    return out


def test_criterion_03_ablation_identities():
    rng = np.random.default_rng(3)
    vocab_size, d = 50, 32
    sets = _ablation_tokenizers(rng, vocab_size, d)
    bad_time = bad_value = bad_sum = 0
    for i in range(1000):
        toks = sets[i % len(sets)]
        has = bool(rng.random() < 0.6)
        ev = Event(int(rng.integers(vocab_size)), float(rng.exponential(300)),
                   float(rng.normal()) if has else 0.0, has)
        moved_time = Event(ev.code_id, float(rng.exponential(300)), ev.value, ev.has_value)
        moved_value = Event(ev.code_id, ev.time_delta, float(rng.normal(0, 5)), True)
        bad_time += not np.array_equal(embed_event(ev, toks["no-time"]), embed_event(moved_time, toks["no-time"]))
        bad_value += not np.array_equal(embed_event(ev, toks["no-value"]), embed_event(moved_value, toks["no-value"]))
        _, t_term, v_term = event_terms(ev, toks["full"])
        assembled = embed_event(ev, toks["code-only"]) + t_term + v_term
        bad_sum += not np.array_equal(embed_event(ev, toks["full"]), assembled)
    passed = bad_time == bad_value == bad_sum == 0
    record_criterion(3, "ablation identities", passed,
                     f"1000 events over {len(sets)} tokenizer families; violations time={bad_time} "
                     f"value={bad_value} additivity={bad_sum}")
    assert passed


# -- shared training grid for 4, 5, 6, 9 -------------------------------------------

@pytest.fixture(scope="module")
def results_dir(tmp_path_factory):
    keep = os.environ.get("TOKENLAB_ACCEPTANCE_DIR")
    if keep:
        os.makedirs(keep, exist_ok=True)
        return keep
    return str(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="module")
def standard_grid(results_dir):
    spec = suite_spec("triplet-ablation", cohort="standard", tasks=GRID_TASKS, seeds=SEEDS,
                      model=DESK_MODEL, train_cfg=DESK_TRAIN)
    records = run_grid(spec, os.path.join(results_dir, "standard.csv"))
    return spec, records, {(r.task, r.comparison.test): r for r in compare(records, spec)}


@pytest.fixture(scope="module")
def falsification_grid(results_dir):
    variants = (Variant("Triplet", TokenizerSpec()), Variant("No time", TokenizerSpec(use_time=False)))
    spec = ExperimentSpec("falsification", "falsification", ("time_signal",), variants, SEEDS,
                          (Comparison("Triplet", "No time", "falsification"),), model=DESK_MODEL, train=DESK_TRAIN)
    records = run_grid(spec, os.path.join(results_dir, "falsification.csv"))
    return records, compare(records, spec)[0]


def _gap(row):
    return 100 * (row.baseline[0] - row.test[0])


def _row_text(row):
    return (f"{row.comparison.baseline} {100 * row.baseline[0]:.2f} vs {row.comparison.test} "
            f"{100 * row.test[0]:.2f} (gap {_gap(row):+.2f} pts, p={row.result.p_two_sided:.4g}, "
            f"corrected {row.result.p_corrected:.4g}, m={row.family_size})")


def _complete(records):
    return all(r.status == "ok" for r in records)


# -- 4 -------------------------------------------------------------------------------

def test_criterion_04_value_channel_mortality(standard_grid):
    _, records, rows = standard_grid
    row = rows[("mortality_like", "No value")]
    passed = (_complete(records) and row.result.n_effective == 10 and row.family_size == 3
              and row.result.p_corrected < 0.05 and row.result.direction == "down" and _gap(row) >= 1.5)
    record_criterion(4, "value channel matters (mortality_like)", passed, _row_text(row))
    assert passed


# -- 5 -------------------------------------------------------------------------------

def test_criterion_05_code_only_readmission(standard_grid):
    _, records, rows = standard_grid
    row = rows[("readmission_like", "Code-only")]
    passed = (_complete(records) and row.result.n_effective >= 1 and row.family_size == 3
              and row.result.p_corrected > 0.05 and abs(_gap(row)) <= 1.0)
    record_criterion(5, "code sequences suffice (readmission_like)", passed, _row_text(row))
    assert passed


# -- 6 -------------------------------------------------------------------------------

def test_criterion_06_temporal_null_and_falsification(standard_grid, falsification_grid):
    _, records, rows = standard_grid
    nulls = [rows[(task, "No time")] for task in GRID_TASKS]
    frecords, frow = falsification_grid
    null_ok = all(r.result.p_corrected > 0.05 for r in nulls)
    detect_ok = frow.result.p_corrected < 0.05 and frow.result.direction == "down"
    passed = _complete(records) and _complete(frecords) and null_ok and detect_ok
    detail = "; ".join(f"{r.task}: {_row_text(r)}" for r in nulls) + f"; falsification: {_row_text(frow)}"
    record_criterion(6, "temporal null and falsification", passed, detail)
    assert passed


# -- 9 -------------------------------------------------------------------------------

def test_criterion_09_bayes_oracle(standard_grid):
    spec, records, _ = standard_grid
    full = [r.auroc for r in records if r.task == "readmission_like" and r.variant == "Triplet" and r.status == "ok"]
    oracle, se = bayes_optimal_auroc(preset_spec("standard", seed=spec.cohort_seed), "readmission_like",
                                     n_samples=200_000)
    mean = float(np.mean(full))
    passed = len(full) == 10 and abs(oracle - 0.85) <= 0.01 + 2 * se and abs(mean - oracle) <= 0.07
    record_criterion(9, "Bayes-oracle sanity (readmission_like)", passed,
                     f"10-seed mean {mean:.4f}, oracle {oracle:.4f}±{se:.4f}, distance {abs(mean - oracle):.4f}")
    assert passed


# -- 7 -------------------------------------------------------------------------------

def test_criterion_07_frozen_pathway():
    cohort = generate_cohort(preset_spec("mortality_like", n_patients=3000, seed=7))
    res = EncoderResources(cohort.vocabulary)
    kw = dict(pathway="textcode", encoder="tiny-clinical", mapping="enhanced")
    frozen_spec, trainable_spec = TokenizerSpec(code_source="frozen", **kw), TokenizerSpec(code_source="trainable", **kw)
    cache = res.cache("tiny-clinical", "enhanced")
    before = cache.rows.copy()
    before_digest = fnv1a64(before.tobytes())
    cfg = TrainConfig(max_epochs=2, seed=1)
    frozen = train(cohort, "mortality_like", frozen_spec, DESK_MODEL, cfg, resources=res)
    trainable = train(cohort, "mortality_like", trainable_spec, DESK_MODEL, cfg, resources=res)
    model_rows = frozen.model.tokenizer.frozen["code.cache"]
    identical = (np.array_equal(before, cache.rows) and fnv1a64(cache.rows.tobytes()) == before_digest
                 and np.array_equal(model_rows, before))
    # parameter ratio at the reference size as well as the desk size
    ratios = []
    for cfg_model in (DESK_MODEL, ModelConfig()):
        f = SequenceClassifier.init(cfg_model, frozen_spec, 1200, np.random.default_rng(0), np.float32,
                                    EncoderResources(make_vocabulary(1200)))
        t = SequenceClassifier.init(cfg_model, trainable_spec, 1200, np.random.default_rng(0), np.float32,
                                    EncoderResources(make_vocabulary(1200)))
        ratios.append(count_params(t) / count_params(f))
    ratio_desk_run = trainable.record.trainable_params / frozen.record.trainable_params
    f_epoch = float(np.mean(frozen.record.epoch_seconds))
    t_epoch = float(np.mean(trainable.record.epoch_seconds))
    passed = identical and min(ratios + [ratio_desk_run]) > 10 and f_epoch < t_epoch
    record_criterion(7, "frozen pathway properties", passed,
                     f"cache rows unchanged={identical}; trainable/frozen params "
                     f"{trainable.record.trainable_params}/{frozen.record.trainable_params} (x{ratio_desk_run:.1f}), "
                     f"reference size x{ratios[1]:.1f}; epoch seconds frozen {f_epoch:.2f} < trainable {t_epoch:.2f}")
    assert passed


# -- 8 -------------------------------------------------------------------------------

def test_criterion_08_controlled_axes():
    axes = textcode_axes()
    diffs = {axis: differing_fields(a, b) for axis, a, b in axes}
    passed = len(axes) == 4 and all(len(d) == 1 for d in diffs.values())
    record_criterion(8, "controlled TextCode axes", passed,
                     ", ".join(f"{axis}: {d}" for axis, d in diffs.items()))
    assert passed


# -- 10 ------------------------------------------------------------------------------

def _random_checkpoint(rng):
    specs = [TokenizerSpec(), TokenizerSpec(use_value=False, time_encoder="time2vec:3"),
             TokenizerSpec(time_encoder="lete:balanced"),
             TokenizerSpec(pathway="textcode", code_source="frozen", encoder="tiny-clinical", mapping="enhanced")]
    vocab = int(rng.integers(16, 40))
    heads = int(rng.choice([1, 2, 4]))
    cfg = ModelConfig(token_dim=4 * heads * int(rng.integers(1, 3)), n_layers=int(rng.integers(0, 3)),
                      n_heads=heads, ffn_dim=int(rng.integers(1, 20)), max_seq_len=int(rng.integers(1, 20)))
    spec = specs[int(rng.integers(len(specs)))]
    res = EncoderResources(make_vocabulary(vocab)) if spec.pathway == "textcode" else None
    model = SequenceClassifier.init(cfg, spec, vocab, rng, np.float32, res)
    return from_model(model, extra={"note": str(rng.integers(1000))})


def _random_record(rng):
    status = "ok" if rng.random() < 0.85 else "failed: TrainingError: non-finite loss in epoch 2"
    name = "".join(rng.choice(list("abc ,\"-†"), int(rng.integers(1, 8))))
    return RunRecord(name, "task_" + str(rng.integers(5)), int(rng.integers(0, 1000)),
                     float(rng.random()) if status == "ok" else float("nan"),
                     int(rng.integers(0, 10 ** 8)), float(rng.exponential(30)), status)


def _records_equal(a, b):
    key = lambda r: (r.variant, r.task, r.seed, r.trainable_params, r.wall_seconds, r.status)
    return len(a) == len(b) and all(
        key(x) == key(y) and (x.auroc == y.auroc or (np.isnan(x.auroc) and np.isnan(y.auroc))) for x, y in zip(a, b))


def test_criterion_10_format_round_trips():
    rng = np.random.default_rng(10)
    bad = {"events": 0, "cache": 0, "checkpoint": 0, "results": 0}
    for _ in range(100):
        cohort = random_cohort(rng, n_subjects=int(rng.integers(1, 8)), vocab_size=int(rng.integers(1, 10)))
        text = format_cohort(cohort)
        back = parse_event_text(text)
        again = format_cohort(back)
        bad["events"] += not (back == cohort and fnv1a64(again.encode()) == fnv1a64(text.encode()))

        rows = rng.normal(size=(int(rng.integers(1, 30)), int(rng.integers(1, 50))))
        cache = make_cache(rows, "enc-" + str(rng.integers(100)))
        data = cache_bytes(cache)
        loaded = cache_from_bytes(data)
        bad["cache"] += not (np.array_equal(loaded.rows, cache.rows) and loaded.digest == cache.digest
                             and loaded.encoder == cache.encoder and cache_bytes(loaded) == data)

        ckpt = _random_checkpoint(rng)
        data = checkpoint_bytes(ckpt)
        loaded = checkpoint_from_bytes(data)     # verifies the trailing digest
        bad["checkpoint"] += not (loaded == ckpt and checkpoint_bytes(loaded) == data)

        records = [_random_record(rng) for _ in range(int(rng.integers(0, 12)))]
        text = format_results(records)
        parsed = parse_results(text)
        bad["results"] += not (_records_equal(parsed, records)
                               and fnv1a64(format_results(parsed).encode()) == fnv1a64(text.encode()))
    passed = not any(bad.values())
    record_criterion(10, "format round-trips", passed,
                     "100 instances each; failures " + ", ".join(f"{k}={v}" for k, v in bad.items()))
    assert passed
