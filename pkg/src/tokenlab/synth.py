"""Synthetic cohorts with planted code / value / time signal and a Bayes oracle.

Generative model, per patient (randomness keyed by ``(seed, patient index)``):

* severity ``s ~ N(0, 1)``; sequence length ``L ~ U{lo..hi}``
* ``ceil(L / 4)`` events carry the lab code with value ``~ N(s, 1)``; the others
  draw uniformly from the remaining codes, 5% of which are risk codes
* gaps are ``5 + Exp(55)`` minutes (mean 60); with probability
  ``sigmoid(BURST_BIAS + BURST_SLOPE * s)`` a burst of ``BURST_GAPS`` consecutive
  gaps below 5 minutes is inserted
* per task: ``r = w_code * z(count) + w_value * z(mean lab) + w_time * burst
  + noise_std * N(0, 1)``, label ``r > tau`` where ``tau`` is the population
  ``1 - prevalence`` quantile of ``r``

Standardization constants are analytic; ``tau`` is estimated once per task from
a fixed-seed Monte Carlo sample that does not depend on ``spec.seed``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit, ndtr
from scipy.stats import binom

from .events import Cohort, PatientSequence, TaskLabel, Vocabulary
from .stats import auroc, auroc_standard_error

RISK_FRACTION = 0.05
LAB_EVERY = 4
GAP_FLOOR = 5.0
GAP_MEAN = 60.0
BURST_BIAS = -1.0
BURST_SLOPE = 1.5
BURST_GAPS = 4
THRESHOLD_SAMPLES = 1 << 19
_THRESHOLD_SEED = 0x7A5C

FAMILIES = ("LAB", "DIAGNOSIS", "MEDICATION", "PROCEDURE", "INFUSION_START", "INFUSION_END")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class TaskDef:
    name: str
    w_code: float
    w_value: float
    w_time: float
    noise_std: float | None = None  # None: use the generator-wide value

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_code, self.w_value, self.w_time)


@dataclass(frozen=True)
class GeneratorSpec:
    n_patients: int
    vocab_size: int = 1200
    seq_len_range: tuple[int, int] = (20, 40)
    tasks: tuple[TaskDef, ...] = ()
    noise_std: float = 0.5
    label_prevalence: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seq_len_range", tuple(int(x) for x in self.seq_len_range))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        validate_spec(self)

    def task(self, task_id: str) -> TaskDef:
        for t in self.tasks:
            if t.name == task_id:
                return t
        raise KeyError(f"unknown task {task_id!r}")

    def noise_for(self, task: TaskDef) -> float:
        return self.noise_std if task.noise_std is None else task.noise_std


def validate_spec(spec: GeneratorSpec) -> None:
    if spec.vocab_size < 16:
        raise SpecError("vocab_size must be >= 16")
    if spec.n_patients < 2:
        raise SpecError("n_patients must be >= 2")
    lo, hi = spec.seq_len_range
    if not (2 <= lo <= hi):
        raise SpecError(f"seq_len_range must satisfy 2 <= min <= max, got {spec.seq_len_range}")
    if hi < BURST_GAPS + 1:
        raise SpecError(f"seq_len_range max must be >= {BURST_GAPS + 1} to host a burst")
    if not 0.0 < spec.label_prevalence < 1.0:
        raise SpecError("label_prevalence must lie in (0, 1)")
    if not (math.isfinite(spec.noise_std) and spec.noise_std >= 0):
        raise SpecError("noise_std must be finite and >= 0")
    if not 0 <= spec.seed < 2 ** 64:
        raise SpecError("seed must be a 64-bit unsigned integer")
    if not spec.tasks:
        raise SpecError("at least one task is required")
    names = set()
    for t in spec.tasks:
        if not t.name or any(c in t.name for c in "\t\n ,"):
            raise SpecError(f"invalid task name {t.name!r}")
        if t.name in names:
            raise SpecError(f"duplicate task {t.name!r}")
        names.add(t.name)
        if not all(math.isfinite(w) for w in t.weights):
            raise SpecError(f"task {t.name}: weights must be finite")
        if t.noise_std is not None and not (math.isfinite(t.noise_std) and t.noise_std >= 0):
            raise SpecError(f"task {t.name}: noise_std must be finite and >= 0")


# readmission_like noise is set so its code-only Bayes AUROC is ~0.85
TASK_PRESETS = {
    "mortality_like": TaskDef("mortality_like", 1.0, 1.0, 0.0, 0.5),
    "icu_like": TaskDef("icu_like", 1.0, 1.0, 0.0, 1.0),
    "postdischarge_like": TaskDef("postdischarge_like", 1.0, 0.7, 0.0, 0.5),
    "readmission_like": TaskDef("readmission_like", 1.0, 0.0, 0.0, 1.0),
}
TIME_SIGNAL_TASK = TaskDef("time_signal", 0.5, 0.0, 1.0, 0.2)


def preset_spec(name: str, n_patients: int | None = None, seed: int = 0) -> GeneratorSpec:
    """Named generator presets.

    ``standard`` (20,000 patients, all four tasks), ``small`` (600 patients,
    all four tasks), ``falsification`` (time-signal task), or a task preset
    name for a cohort carrying only that task.
    """
    four = tuple(TASK_PRESETS.values())
    if name == "standard":
        spec = GeneratorSpec(20000, tasks=four, seed=seed)
    elif name == "small":
        spec = GeneratorSpec(600, tasks=four, seed=seed)
    elif name == "falsification":
        spec = GeneratorSpec(20000, tasks=(TIME_SIGNAL_TASK,), seed=seed)
    elif name in TASK_PRESETS:
        spec = GeneratorSpec(20000, tasks=(TASK_PRESETS[name],), seed=seed)
    else:
        raise SpecError(f"unknown preset {name!r}")
    if n_patients is not None:
        spec = replace(spec, n_patients=int(n_patients))
    return spec


PRESET_NAMES = ("standard", "small", "falsification", *TASK_PRESETS)


def parse_spec_text(text: str) -> GeneratorSpec:
    """Parse ``key = value`` lines. Tasks: ``task.NAME = w_code, w_value, w_time[, noise]``."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[spec]\n" + text)
    except configparser.Error as exc:
        raise SpecError(f"cannot parse spec file: {exc}") from None
    if len(cp.sections()) != 1:
        raise SpecError("spec file takes no sections")
    raw = dict(cp["spec"])
    kwargs: dict = {}
    tasks = []
    try:
        for key, val in raw.items():
            if key.startswith("task."):
                nums = [float(x) for x in val.split(",")]
                if len(nums) not in (3, 4):
                    raise SpecError(f"{key}: expected 3 or 4 numbers")
                tasks.append(TaskDef(key[5:], *nums))
            elif key == "preset_tasks":
                for name in (x.strip() for x in val.split(",")):
                    if name not in TASK_PRESETS:
                        raise SpecError(f"unknown task preset {name!r}")
                    tasks.append(TASK_PRESETS[name])
            elif key in ("n_patients", "vocab_size", "seed"):
                kwargs[key] = int(val)
            elif key in ("noise_std", "label_prevalence"):
                kwargs[key] = float(val)
            elif key == "seq_len_range":
                lo, hi = (int(x) for x in val.split(","))
                kwargs[key] = (lo, hi)
            else:
                raise SpecError(f"unknown spec key {key!r}")
    except ValueError as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"bad value: {exc}") from None
    if "n_patients" not in kwargs:
        raise SpecError("spec requires n_patients")
    return GeneratorSpec(tasks=tuple(tasks), **kwargs)


def format_spec(spec: GeneratorSpec) -> str:
    lines = [f"n_patients = {spec.n_patients}", f"vocab_size = {spec.vocab_size}",
             f"seq_len_range = {spec.seq_len_range[0]}, {spec.seq_len_range[1]}",
             f"noise_std = {spec.noise_std!r}", f"label_prevalence = {spec.label_prevalence!r}",
             f"seed = {spec.seed}"]
    for t in spec.tasks:
        nums = [t.w_code, t.w_value, t.w_time] + ([] if t.noise_std is None else [t.noise_std])
        lines.append(f"task.{t.name} = " + ", ".join(repr(float(x)) for x in nums))
    return "\n".join(lines) + "\n"


# -- vocabulary -----------------------------------------------------------------

def make_vocabulary(vocab_size: int) -> Vocabulary:
    """Deterministic ``FAMILY//number`` code strings; code 0 is the lab code."""
    codes = [f"{FAMILIES[i % len(FAMILIES)]}//{220000 + 37 * i}" for i in range(vocab_size)]
    return Vocabulary(tuple(codes))


LAB_CODE_ID = 0


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def risk_codes(spec: GeneratorSpec) -> np.ndarray:
    n_risk = max(1, round(RISK_FRACTION * spec.vocab_size))
    pool = np.arange(1, spec.vocab_size)
    return np.sort(_rng(spec.seed, 0xC0DE).choice(pool, size=n_risk, replace=False))


def _n_lab(length):
    return -(-np.asarray(length) // LAB_EVERY)


@dataclass(frozen=True)
class ChannelStats:
    count_mean: float
    count_sd: float
    lab_sd: float
    risk_prob: float


def channel_stats(spec: GeneratorSpec) -> ChannelStats:
    """Analytic mean/sd of the risk-code count and sd of the mean lab value."""
    lo, hi = spec.seq_len_range
    lengths = np.arange(lo, hi + 1)
    n_other = lengths - _n_lab(lengths)
    q = max(1, round(RISK_FRACTION * spec.vocab_size)) / (spec.vocab_size - 1)
    mean_given = n_other * q
    mean = mean_given.mean()
    var = (n_other * q * (1 - q)).mean() + ((mean_given - mean) ** 2).mean()
    lab_var = 1.0 + (1.0 / _n_lab(lengths)).mean()
    return ChannelStats(float(mean), float(math.sqrt(var)), float(math.sqrt(lab_var)), float(q))


@dataclass
class Latents:
    length: np.ndarray
    severity: np.ndarray
    count: np.ndarray
    lab_mean: np.ndarray
    burst: np.ndarray

    def contributions(self, spec: GeneratorSpec, task: TaskDef):
        cs = channel_stats(spec)
        a_code = task.w_code * (self.count - cs.count_mean) / cs.count_sd
        a_value = task.w_value * self.lab_mean / cs.lab_sd
        a_time = task.w_time * self.burst
        return a_code, a_value, a_time


def sample_latents(spec: GeneratorSpec, n: int, rng: np.random.Generator) -> Latents:
    """Vectorized draw of the per-patient channel features (same law as the generator)."""
    lo, hi = spec.seq_len_range
    cs = channel_stats(spec)
    length = rng.integers(lo, hi + 1, size=n)
    n_lab = _n_lab(length)
    severity = rng.standard_normal(n)
    count = rng.binomial(length - n_lab, cs.risk_prob)
    lab_mean = severity + rng.standard_normal(n) / np.sqrt(n_lab)
    burst = (rng.random(n) < expit(BURST_BIAS + BURST_SLOPE * severity)).astype(np.float64)
    return Latents(length, severity, count.astype(np.float64), lab_mean, burst)


@lru_cache(maxsize=64)
def _threshold_cached(key) -> float:
    spec, task = key
    rng = _rng(_THRESHOLD_SEED)
    lat = sample_latents(spec, THRESHOLD_SAMPLES, rng)
    a_c, a_v, a_t = lat.contributions(spec, task)
    r = a_c + a_v + a_t + spec.noise_for(task) * rng.standard_normal(THRESHOLD_SAMPLES)
    return float(np.quantile(r, 1.0 - spec.label_prevalence))


def label_threshold(spec: GeneratorSpec, task: TaskDef) -> float:
    # seed does not enter the population threshold
    return _threshold_cached((replace(spec, seed=0, n_patients=2), task))


# -- cohort generation -----------------------------------------------------------

def _generate_patient(spec: GeneratorSpec, index: int, risk_set: np.ndarray, cs: ChannelStats):
    rng = _rng(spec.seed, index)
    lo, hi = spec.seq_len_range
    severity = rng.standard_normal()
    length = int(rng.integers(lo, hi + 1))
    n_lab = int(_n_lab(length))
    lab_pos = np.sort(rng.choice(length, size=n_lab, replace=False))
    codes = 1 + rng.integers(0, spec.vocab_size - 1, size=length)
    codes[lab_pos] = LAB_CODE_ID
    lab_values = severity + rng.standard_normal(n_lab)
    burst = bool(rng.random() < expit(BURST_BIAS + BURST_SLOPE * severity))
    gaps = GAP_FLOOR + rng.exponential(GAP_MEAN - GAP_FLOOR, size=length - 1)
    if burst:
        start = int(rng.integers(0, length - BURST_GAPS))
        gaps[start:start + BURST_GAPS] = rng.uniform(0.5, 4.5, size=BURST_GAPS)
    noise = rng.standard_normal(len(spec.tasks))
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    values: list = [None] * length
    for p, v in zip(lab_pos, lab_values):
        values[int(p)] = float(v)
    count = int(np.isin(codes, risk_set).sum())
    lat = Latents(np.array([length]), np.array([severity]), np.array([float(count)]),
                  np.array([lab_values.mean()]), np.array([float(burst)]))
    return times, codes, values, lat, noise


def subject_id(index: int) -> str:
    return f"S{index:06d}"


def generate_cohort(spec: GeneratorSpec, return_latents: bool = False):
    """Deterministic cohort for ``spec``; patients are independent of each other."""
    validate_spec(spec)
    vocab = make_vocabulary(spec.vocab_size)
    risk_set = risk_codes(spec)
    cs = channel_stats(spec)
    thresholds = [label_threshold(spec, t) for t in spec.tasks]
    seqs, labels, lats = [], [], []
    for i in range(spec.n_patients):
        times, codes, values, lat, noise = _generate_patient(spec, i, risk_set, cs)
        sid = subject_id(i)
        seqs.append(PatientSequence.from_times(sid, times, codes, values, float(times[-1]) + 60.0))
        for j, task in enumerate(spec.tasks):
            a_c, a_v, a_t = lat.contributions(spec, task)
            r = float(a_c[0] + a_v[0] + a_t[0]) + spec.noise_for(task) * float(noise[j])
            labels.append(TaskLabel(sid, task.name, r > thresholds[j]))
        lats.append(lat)
    cohort = Cohort(tuple(seqs), tuple(labels), vocab)
    if return_latents:
        merged = Latents(*(np.concatenate([getattr(l, f) for l in lats])
                           for f in ("length", "severity", "count", "lab_mean", "burst")))
        return cohort, merged
    return cohort


# -- Bayes oracle ------------------------------------------------------------------

_S_GRID = np.linspace(-7.0, 7.0, 281)


def posterior_score(spec: GeneratorSpec, task: TaskDef, lat: Latents,
                    mask: tuple[bool, bool, bool], chunk: int = 4096) -> np.ndarray:
    """P(label = 1 | observed channels), up to a strictly monotone transform.

    Sequence length is always observed. Masked channels are integrated out
    on a severity grid (lab mean and burst both depend on severity).
    """
    use_code, use_value, use_time = mask
    a_c, a_v, a_t = lat.contributions(spec, task)
    weights = task.weights
    observed = (use_code, use_value, use_time)
    if all(o or w == 0.0 for o, w in zip(observed, weights)):
        return (a_c if use_code else 0.0) + (a_v if use_value else 0.0) + (a_t if use_time else 0.0) \
            + np.zeros(lat.length.shape)

    cs = channel_stats(spec)
    tau = label_threshold(spec, task)
    sigma = spec.noise_for(task)
    s = _S_GRID
    log_prior = -0.5 * s ** 2
    out = np.empty(lat.length.shape)
    n_lab_all = _n_lab(lat.length).astype(np.float64)
    for lo in range(0, out.size, chunk):
        sl = slice(lo, lo + chunk)
        n_lab = n_lab_all[sl][:, None]
        logw = np.broadcast_to(log_prior, (n_lab.shape[0], s.size)).copy()
        known = np.zeros(n_lab.shape[0])
        if use_code:
            known += a_c[sl]
        if use_value:
            known += a_v[sl]
            logw += -0.5 * n_lab * (lat.lab_mean[sl][:, None] - s) ** 2
        p_burst = expit(BURST_BIAS + BURST_SLOPE * s)[None, :]
        if use_time:
            known += a_t[sl]
            b = lat.burst[sl][:, None]
            logw += np.log(np.where(b > 0, p_burst, 1.0 - p_burst))
        logw -= logw.max(axis=1, keepdims=True)
        post = np.exp(logw)
        post /= post.sum(axis=1, keepdims=True)

        # unobserved lab mean: Gaussian given severity
        if use_value or task.w_value == 0.0:
            m_mean = np.zeros((1, s.size))
            m_var = np.zeros((n_lab.shape[0], 1))
        else:
            m_mean = task.w_value * s[None, :] / cs.lab_sd
            m_var = task.w_value ** 2 / (n_lab * cs.lab_sd ** 2)
        scale = np.sqrt(sigma ** 2 + m_var)
        scale = np.maximum(scale, 1e-12)

        if use_time or task.w_time == 0.0:
            burst_terms = [(0.0, np.ones((1, s.size)))]
        else:
            burst_terms = [(0.0, 1.0 - p_burst), (task.w_time, p_burst)]

        if use_code or task.w_code == 0.0:
            code_terms = [(np.zeros((n_lab.shape[0], 1)), np.ones((n_lab.shape[0], 1)))]
        else:
            n_other = (lat.length[sl] - n_lab_all[sl])[:, None]
            kmax = int(n_other.max())
            code_terms = []
            for k in range(kmax + 1):
                pk = binom.pmf(k, n_other, cs.risk_prob)
                if pk.max() < 1e-14:
                    continue
                code_terms.append((task.w_code * (k - cs.count_mean) / cs.count_sd + 0 * pk, pk))

        prob = np.zeros((n_lab.shape[0], s.size))
        for b_shift, b_prob in burst_terms:
            for c_shift, c_prob in code_terms:
                z = (known[:, None] + b_shift + c_shift + m_mean - tau) / scale
                prob += b_prob * c_prob * ndtr(z)
        out[sl] = (post * prob).sum(axis=1)
    return out


def bayes_optimal_auroc(spec: GeneratorSpec, task_id: str,
                        channel_mask: tuple[bool, bool, bool] = (True, True, True),
                        n_samples: int = 200_000, mc_seed: int = 0) -> tuple[float, float]:
    """Monte Carlo AUROC of the posterior score on unmasked channels, with its SE."""
    if n_samples < 100_000:
        raise ValueError("bayes_optimal_auroc needs at least 100k samples")
    task = spec.task(task_id)
    rng = _rng(spec.seed, 0x0AC1E, mc_seed)
    lat = sample_latents(spec, n_samples, rng)
    a_c, a_v, a_t = lat.contributions(spec, task)
    r = a_c + a_v + a_t + spec.noise_for(task) * rng.standard_normal(n_samples)
    y = r > label_threshold(spec, task)
    score = posterior_score(spec, task, lat, tuple(bool(x) for x in channel_mask))
    a = auroc(score, y)
    return a, auroc_standard_error(a, int(y.sum()), int((~y).sum()))
