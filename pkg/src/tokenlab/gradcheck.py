"""Finite-difference verification of the hand-written backward passes.

Relative error is ``|num - ana| / max(|num|, |ana|, floor)``; the floor keeps
entries whose true gradient is ~0 from turning rounding noise into huge ratios.
All checks run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embeddings import LETE_PRESETS, CVE, LeTE, Time2Vec, TokenizerSpec
from .model import Batch, ModelConfig, SequenceClassifier, bce_with_logits

REL_FLOOR = 1e-6
FD_STEP = 1e-5
PARAM_TOLERANCE = 1e-4
INPUT_TOLERANCE = 1e-6


@dataclass
class GradCheckResult:
    label: str
    max_rel_error: float
    worst: str
    n_checked: int
    per_param: dict = field(default_factory=dict, repr=False)

    def passed(self, tol: float = PARAM_TOLERANCE) -> bool:
        return self.max_rel_error <= tol


def rel_error(num, ana, floor: float = REL_FLOOR):
    num, ana = np.asarray(num, np.float64), np.asarray(ana, np.float64)
    return np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)


def _sample(rng, grad: np.ndarray, fraction: float, min_count: int, cap: int) -> np.ndarray:
    """Flat indices to probe: a ``fraction`` subset clipped to [min_count, cap].

    Sparse gradients (e.g. word tables) get half their probes on nonzero entries
    so that the check is not dominated by trivially-zero rows.
    """
    size = grad.size
    n = min(size, cap, max(min_count, math.ceil(fraction * size)))
    flat = grad.reshape(-1)
    nz = np.flatnonzero(flat)
    if 0 < len(nz) < size // 2:
        k = min(len(nz), (n + 1) // 2)
        picked = rng.choice(nz, k, replace=False)
        rest = rng.choice(size, n - k, replace=False) if n > k else np.empty(0, np.int64)
        return np.unique(np.concatenate([picked, rest]))
    return rng.choice(size, n, replace=False)


def grad_check(model: SequenceClassifier, batch: Batch, labels=None, *, label: str = "",
               fraction: float = 0.01, min_count: int = 4, cap: int = 24,
               seed: int = 0, include_inputs: bool = True) -> GradCheckResult:
    """Compare analytic and central-difference gradients on a parameter subset.

    With ``labels`` the objective is mean BCE; without, it is a fixed random
    weighting of the logits (so the linear head is checked exactly).
    """
    if model.dtype != np.float64:
        raise ValueError("grad_check requires a float64 (high precision) model")
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(len(batch))

    def objective(b=batch):
        logits = model.forward(b)
        if labels is None:
            return float(weights @ logits), weights
        return bce_with_logits(logits, labels)

    _, dlogits = objective()
    grads, dinputs = model.backward(np.asarray(dlogits, np.float64))

    per_param, worst, worst_name, checked = {}, 0.0, "", 0
    for name, arr in model.params.items():
        g = grads[name]
        flat = arr.reshape(-1)
        errs = []
        for i in _sample(rng, g, fraction, min_count, cap):
            old = flat[i]
            flat[i] = old + FD_STEP
            up = objective()[0]
            flat[i] = old - FD_STEP
            down = objective()[0]
            flat[i] = old
            errs.append(float(rel_error((up - down) / (2 * FD_STEP), g.reshape(-1)[i])))
        per_param[name] = max(errs)
        checked += len(errs)
        if per_param[name] > worst:
            worst, worst_name = per_param[name], name

    if include_inputs:
        for key, field_name in (("time", "x_time"), ("value", "x_value")):
            if key not in dinputs:
                continue
            x = getattr(batch, field_name)
            errs = []
            for i in _sample(rng, dinputs[key] * batch.mask, fraction, min_count, cap):
                pos = np.unravel_index(i, x.shape)
                if not batch.mask[pos]:
                    continue
                old = x[pos]
                x[pos] = old + FD_STEP
                up = objective()[0]
                x[pos] = old - FD_STEP
                down = objective()[0]
                x[pos] = old
                errs.append(float(rel_error((up - down) / (2 * FD_STEP), dinputs[key][pos])))
            if errs:
                per_param[f"input.{key}"] = max(errs)
                checked += len(errs)
                if per_param[f"input.{key}"] > worst:
                    worst, worst_name = per_param[f"input.{key}"], f"input.{key}"
    model.forward(batch)
    return GradCheckResult(label, worst, worst_name, checked, per_param)


def encoder_input_check(encoder, x: np.ndarray, seed: int = 0) -> float:
    """Max relative error of d(sum(w * enc(x)))/dx for a scalar-input encoder."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, np.float64)
    w = rng.standard_normal(x.shape + (encoder.forward(x).shape[-1],))
    encoder.forward(x)
    _, dx = encoder.backward(w)
    num = ((encoder.forward(x + FD_STEP) - encoder.forward(x - FD_STEP)) * w).sum(-1) / (2 * FD_STEP)
    return float(rel_error(num, dx).max())


# -- shipped configurations ----------------------------------------------------------

def shipped_tokenizers() -> list[tuple[str, TokenizerSpec]]:
    out = [
        ("triplet-full", TokenizerSpec()),
        ("triplet-no-time", TokenizerSpec(use_time=False)),
        ("triplet-no-value", TokenizerSpec(use_value=False)),
        ("triplet-code-only", TokenizerSpec(use_time=False, use_value=False)),
    ]
    for k in (1, 2, 3, 4, 5, 6, 8, 10, 20, 50):
        out.append((f"time2vec:{k}", TokenizerSpec(time_encoder=f"time2vec:{k}")))
    for preset in LETE_PRESETS:
        out.append((f"lete:{preset}", TokenizerSpec(time_encoder=f"lete:{preset}")))
    for encoder in ("tiny-clinical", "large-clinical", "large-general"):
        for source in ("frozen", "trainable"):
            for mapping in ("original", "enhanced"):
                out.append((f"textcode-{source}-{encoder}-{mapping}",
                            TokenizerSpec(pathway="textcode", code_source=source,
                                          encoder=encoder, mapping=mapping)))
    return out


CHECK_MODELS = {
    "transformer": ModelConfig(token_dim=16, n_layers=2, n_heads=2, ffn_dim=24, max_seq_len=8,
                               dropout_rate=0.0),
    "linear-head": ModelConfig(token_dim=16, n_layers=0, n_heads=2, ffn_dim=24, max_seq_len=8,
                               dropout_rate=0.0),
}


def random_batch(rng: np.random.Generator, vocab_size: int, batch: int = 3, length: int = 6) -> Batch:
    mask = np.ones((batch, length), bool)
    for i in range(batch):
        mask[i, rng.integers(2, length + 1):] = False
    return Batch(rng.integers(0, vocab_size, (batch, length)), rng.uniform(0, 5, (batch, length)),
                 rng.standard_normal((batch, length)), mask)


def run_shipped_checks(seed: int = 0, vocab_size: int = 40, resources=None,
                       tokenizers=None) -> list[GradCheckResult]:
    """Grad-check every shipped tokenizer under both check models."""
    from .pretrained import EncoderResources
    from .synth import make_vocabulary

    if resources is None:
        resources = EncoderResources(make_vocabulary(vocab_size))
    rng = np.random.default_rng(seed)
    results = []
    for tok_label, spec in tokenizers or shipped_tokenizers():
        for model_label, cfg in CHECK_MODELS.items():
            model = SequenceClassifier.init(cfg, spec, vocab_size, rng, np.float64, resources)
            batch = random_batch(rng, vocab_size)
            labels = rng.integers(0, 2, len(batch)) if model_label == "transformer" else None
            results.append(grad_check(model, batch, labels, label=f"{tok_label}/{model_label}",
                                      seed=int(rng.integers(2**31))))
    return results


def run_encoder_input_checks(seed: int = 0, d: int = 16, n: int = 200) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 8, n)
    out = {"cve": encoder_input_check(CVE.init(d, rng, np.float64), x, seed)}
    for k in (1, 2, 3, 4, 5, 6, 8, 10, 20, 50):
        out[f"time2vec:{k}"] = encoder_input_check(Time2Vec.init(d, k, rng, np.float64), x, seed)
    for name, frac in LETE_PRESETS.items():
        out[f"lete:{name}"] = encoder_input_check(LeTE.init(d, frac, rng, np.float64), x, seed)
    return out
