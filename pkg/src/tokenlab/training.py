"""Training loop, subject-level splits, evaluation and run records."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .embeddings import TokenizerSpec
from .events import Cohort, truncate_at_prediction_time
from .kernels import fnv1a64
from .model import Batch, ModelConfig, SequenceClassifier, bce_with_logits, count_params
from .stats import auroc

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
EVAL_BATCH = 512


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 10
    learning_rate: float = 3e-3
    seed: int = 0
    precision: str = "standard"   # standard (float32) | high (float64)
    momentum: float = 0.9
    grad_clip: float = 1.0
    warmup_steps: int = 50
    optimizer: str = "adam"       # adam | momentum
    weight_decay: float = 0.0     # decoupled, matrices only

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError("optimizer must be 'momentum' or 'adam'")
        if self.precision not in ("standard", "high"):
            raise ValueError("precision must be 'standard' or 'high'")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")
        if not (self.weight_decay >= 0 and self.learning_rate * self.weight_decay < 1.0):
            raise ValueError("weight_decay must be >= 0 with learning_rate * weight_decay < 1")

    @property
    def dtype(self):
        return np.float64 if self.precision == "high" else np.float32


@dataclass
class RunRecord:
    variant: str
    task: str
    seed: int
    auroc: float
    trainable_params: int
    wall_seconds: float
    status: str = "ok"
    epoch_seconds: list = field(default_factory=list, compare=False, repr=False)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


# -- data --------------------------------------------------------------------------

@dataclass
class EncodedCohort:
    """Padded per-subject arrays (most recent ``max_len`` events kept)."""
    subject_ids: list
    codes: np.ndarray
    x_time: np.ndarray
    values: np.ndarray
    has_value: np.ndarray
    lengths: np.ndarray

    def batch(self, idx: np.ndarray, tokenizer) -> Batch:
        L = int(self.lengths[idx].max())
        codes = self.codes[idx, :L]
        mask = np.arange(L)[None, :] < self.lengths[idx][:, None]
        x_value = tokenizer.standardize(codes, self.values[idx, :L], self.has_value[idx, :L])
        dtype = tokenizer.value_mean.dtype
        return Batch(codes, self.x_time[idx, :L].astype(dtype), x_value, mask)


def encode_cohort(cohort: Cohort, max_len: int) -> EncodedCohort:
    seqs = [truncate_at_prediction_time(s) for s in cohort.sequences]
    n = len(seqs)
    width = max(1, min(max_len, max((len(s) for s in seqs), default=1)))
    codes = np.zeros((n, width), np.int64)
    x_time = np.zeros((n, width))
    values = np.zeros((n, width))
    has_value = np.zeros((n, width), bool)
    lengths = np.zeros(n, np.int64)
    for i, s in enumerate(seqs):
        evs = s.events[-max_len:] if len(s.events) > max_len else s.events
        k = len(evs)
        lengths[i] = k
        if k:
            codes[i, :k] = [e.code_id for e in evs]
            x_time[i, :k] = np.log1p([e.time_delta for e in evs])
            values[i, :k] = [e.value for e in evs]
            has_value[i, :k] = [e.has_value for e in evs]
    return EncodedCohort([s.subject_id for s in seqs], codes, x_time, values, has_value, lengths)


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = _rng(seed, 0x5917).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


# -- optimizer ---------------------------------------------------------------------

class MomentumSGD:
    """Heavy-ball SGD with linear warmup, cosine decay and global-norm clipping."""

    def __init__(self, params: dict, lr: float, total_steps: int, momentum: float = 0.9,
                 clip: float = 1.0, warmup: int = 0, weight_decay: float = 0.0):
        self.params = params
        self.weight_decay = weight_decay
        self.lr = lr
        self.total = max(1, total_steps)
        self.momentum = momentum
        self.clip = clip
        self.warmup = min(warmup, self.total // 2)
        self.step_count = 0
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def current_lr(self) -> float:
        s = self.step_count
        if s < self.warmup:
            return self.lr * (s + 1) / self.warmup
        frac = (s - self.warmup) / max(1, self.total - self.warmup)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(1.0, frac)))

    def _decay(self, name: str, lr: float) -> None:
        """Decoupled weight decay; vectors (biases, norm gains) are left alone."""
        p = self.params[name]
        if self.weight_decay and p.ndim >= 2:
            p *= 1.0 - lr * self.weight_decay

    def step(self, grads: dict) -> float:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = 1.0 if self.clip is None or norm <= self.clip else self.clip / norm
        lr = self.current_lr()
        for name, g in grads.items():
            vel = self.velocity[name]
            vel *= self.momentum
            vel += g * scale
            self._decay(name, lr)
            self.params[name] -= lr * vel
        self.step_count += 1
        return norm


class Adam(MomentumSGD):
    """Adam with the same warmup/cosine schedule and clipping."""

    def __init__(self, params, lr, total_steps, betas=(0.9, 0.999), eps=1e-8, clip=1.0, warmup=0,
                 weight_decay=0.0):
        super().__init__(params, lr, total_steps, betas[0], clip, warmup, weight_decay)
        self.beta2 = betas[1]
        self.eps = eps
        self.second = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> float:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = 1.0 if self.clip is None or norm <= self.clip else self.clip / norm
        lr = self.current_lr()
        t = self.step_count + 1
        c1 = 1 - self.momentum ** t
        c2 = 1 - self.beta2 ** t
        for name, g in grads.items():
            g = g * scale
            m, v = self.velocity[name], self.second[name]
            m *= self.momentum
            m += (1 - self.momentum) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            self._decay(name, lr)
            self.params[name] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        self.step_count += 1
        return norm


def make_optimizer(params: dict, cfg: TrainConfig, total_steps: int):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, total_steps, clip=cfg.grad_clip, warmup=cfg.warmup_steps,
                    weight_decay=cfg.weight_decay)
    return MomentumSGD(params, cfg.learning_rate, total_steps, cfg.momentum, cfg.grad_clip,
                       cfg.warmup_steps, cfg.weight_decay)


# -- training ----------------------------------------------------------------------

def predict(model: SequenceClassifier, data: EncodedCohort, idx: np.ndarray) -> np.ndarray:
    order = idx[np.argsort(data.lengths[idx], kind="stable")]
    out = np.empty(len(idx))
    pos = {int(j): i for i, j in enumerate(idx)}
    for lo in range(0, len(order), EVAL_BATCH):
        chunk = order[lo:lo + EVAL_BATCH]
        logits = model.forward(data.batch(chunk, model.tokenizer))
        for j, z in zip(chunk, logits):
            out[pos[int(j)]] = z
    return out


def cache_digests(model: SequenceClassifier) -> dict:
    return {k: fnv1a64(np.ascontiguousarray(v).tobytes()) for k, v in model.tokenizer.frozen.items()}


@dataclass
class TrainResult:
    model: SequenceClassifier
    record: RunRecord
    val_auroc: float
    history: list


def train(cohort: Cohort, task_id: str, tok_spec: TokenizerSpec, model_cfg: ModelConfig,
          train_cfg: TrainConfig, variant: str = "", resources=None,
          encoded: EncodedCohort | None = None, log=None) -> TrainResult:
    """Train one model and evaluate the best-validation checkpoint on the test split."""
    start = time.perf_counter()
    data = encoded if encoded is not None else encode_cohort(cohort, model_cfg.max_seq_len)
    labels_map = cohort.labels_for(task_id)
    y = np.array([labels_map[s] for s in data.subject_ids], dtype=bool)
    valid = np.flatnonzero(data.lengths > 0)
    tr, va, te = (valid[np.isin(valid, part)] for part in split_indices(len(y), train_cfg.seed))
    for name, part in (("train", tr), ("validation", va), ("test", te)):
        if len(part) == 0 or y[part].all() or not y[part].any():
            raise TrainingError(f"{name} split for task {task_id!r} has a single class")

    dtype = train_cfg.dtype
    model = SequenceClassifier.init(model_cfg, tok_spec, cohort.vocabulary.size,
                                    _rng(train_cfg.seed, 0x1417), dtype, resources)
    trc = data.codes[tr]
    trmask = np.arange(data.codes.shape[1])[None, :] < data.lengths[tr][:, None]
    model.tokenizer.fit_value_norm(trc[trmask], data.values[tr][trmask], data.has_value[tr][trmask])
    frozen_before = cache_digests(model)

    params = model.params
    steps_per_epoch = math.ceil(len(tr) / train_cfg.batch_size)
    opt = make_optimizer(params, train_cfg, steps_per_epoch * train_cfg.max_epochs)
    best = (-1.0, None)
    history, epoch_seconds = [], []
    for epoch in range(train_cfg.max_epochs):
        t0 = time.perf_counter()
        order = tr[_rng(train_cfg.seed, 0xE90C, epoch).permutation(len(tr))]
        losses = []
        for step in range(steps_per_epoch):
            idx = order[step * train_cfg.batch_size:(step + 1) * train_cfg.batch_size]
            batch = data.batch(idx, model.tokenizer)
            drop = _rng(train_cfg.seed, 0xD809, epoch, step) if model_cfg.dropout_rate > 0 else None
            logits = model.forward(batch, dropout_rng=drop)
            loss, dlogits = bce_with_logits(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}")
            grads, _ = model.backward(dlogits)
            opt.step(grads)
            losses.append(loss)
        epoch_seconds.append(time.perf_counter() - t0)
        val = auroc(predict(model, data, va), y[va])
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_auroc": val})
        if log is not None:
            log(f"{variant or tok_spec.pathway} {task_id} seed={train_cfg.seed} epoch {epoch + 1}: "
                f"loss={np.mean(losses):.4f} val_auroc={val:.4f}")
        if val > best[0]:
            best = (val, {k: v.copy() for k, v in params.items()})
    for k, v in best[1].items():
        params[k][...] = v
    if cache_digests(model) != frozen_before:
        raise TrainingError("frozen cache rows changed during training")
    test = auroc(predict(model, data, te), y[te])
    record = RunRecord(variant or "", task_id, train_cfg.seed, test, count_params(model),
                       time.perf_counter() - start, "ok", epoch_seconds)
    return TrainResult(model, record, best[0], history)


def count_trainable_params(tok_spec: TokenizerSpec, model_cfg: ModelConfig, vocab_size: int,
                           resources=None) -> int:
    model = SequenceClassifier.init(model_cfg, tok_spec, vocab_size, _rng(0), np.float32, resources)
    return count_params(model)
