"""Per-event embedding pathways: code sources, time/value encoders, ablations.

Every encoder exposes ``forward(x)`` (caching what backward needs) and
``backward(grad_out) -> (param_grads, grad_x)``. Time encoders all receive
``log1p(minutes)``; values are standardized per code before the value CVE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .events import Event
from .kernels import scatter_add_rows
from .pretrained import EmbeddingCache

LETE_PRESETS = {"balanced": 0.5, "spline-heavy": 0.25, "fourier-heavy": 0.75}
TIME2VEC_KS = (1, 2, 3, 4, 5, 6, 8, 10, 20, 50)
LETE_HIDDEN = 16


class EmbeddingError(ValueError):
    pass


# -- specs ------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationMask:
    use_time: bool = True
    use_value: bool = True


ABLATIONS = {
    "full": AblationMask(True, True),
    "no-time": AblationMask(False, True),
    "no-value": AblationMask(True, False),
    "code-only": AblationMask(False, False),
}


def parse_time_encoder(name: str) -> tuple[str, object]:
    kind, _, arg = name.partition(":")
    if kind == "cve" and not arg:
        return "cve", None
    if kind == "time2vec":
        try:
            k = int(arg)
        except ValueError:
            raise EmbeddingError(f"bad time2vec component count in {name!r}") from None
        if k < 1:
            raise EmbeddingError("time2vec needs k >= 1")
        return "time2vec", k
    if kind == "lete" and arg in LETE_PRESETS:
        return "lete", arg
    raise EmbeddingError(f"unknown time encoder {name!r}")


@dataclass(frozen=True)
class TokenizerSpec:
    pathway: str = "triplet"        # triplet | textcode
    use_time: bool = True
    use_value: bool = True
    time_encoder: str = "cve"       # cve | time2vec:K | lete:PRESET
    code_source: str = "table"      # table | frozen | trainable
    encoder: str = ""               # description encoder (textcode only)
    mapping: str = ""               # enhanced | original (textcode only)

    def __post_init__(self):
        if self.pathway == "triplet":
            if self.code_source != "table" or self.encoder or self.mapping:
                raise EmbeddingError("triplet requires the trainable code table and no encoder/mapping")
        elif self.pathway == "textcode":
            if self.code_source not in ("frozen", "trainable"):
                raise EmbeddingError("textcode requires a frozen or trainable description encoder")
            if not self.encoder:
                raise EmbeddingError("textcode requires an encoder name")
            if self.mapping not in ("enhanced", "original"):
                raise EmbeddingError("textcode mapping must be 'enhanced' or 'original'")
        else:
            raise EmbeddingError(f"unknown pathway {self.pathway!r}")
        parse_time_encoder(self.time_encoder)

    @property
    def ablation(self) -> AblationMask:
        return AblationMask(self.use_time, self.use_value)

    def with_ablation(self, mask: AblationMask) -> "TokenizerSpec":
        return replace(self, use_time=mask.use_time, use_value=mask.use_value)

    def to_fields(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ("true" if v else "false") if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_fields(cls, data: dict) -> "TokenizerSpec":
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, val in data.items():
            if key not in names:
                raise EmbeddingError(f"unknown tokenizer field {key!r}")
            if key in ("use_time", "use_value"):
                if val not in ("true", "false"):
                    raise EmbeddingError(f"{key} must be true or false")
                kwargs[key] = val == "true"
            else:
                kwargs[key] = val
        return cls(**kwargs)


# -- encoders ---------------------------------------------------------------------

def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise EmbeddingError("non-finite encoder input")


@dataclass
class CVEParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    input_scale: float = 1.0


def cve_hidden_size(d: int) -> int:
    return math.ceil(math.sqrt(d))


class CVE:
    """Continuous value embedding: ``w2^T tanh(w1 * x * scale + b1)``."""

    def __init__(self, params: dict, input_scale: float = 1.0):
        self.params = params
        self.input_scale = input_scale

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, dtype=np.float32) -> "CVE":
        h = cve_hidden_size(d)
        return cls({
            "w1": rng.standard_normal(h).astype(dtype),
            "b1": rng.uniform(-1, 1, h).astype(dtype),
            "w2": (rng.standard_normal((h, d)) / math.sqrt(h * d)).astype(dtype),
        })

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        self._xs = x[..., None] * self.input_scale
        self._a = np.tanh(self._xs * p["w1"] + p["b1"])
        return self._a @ p["w2"]

    def backward(self, g: np.ndarray):
        p, a = self.params, self._a
        h = a.shape[-1]
        d_pre = (g @ p["w2"].T) * (1 - a * a)
        grads = {
            "w2": a.reshape(-1, h).T @ g.reshape(-1, g.shape[-1]),
            "w1": (d_pre * self._xs).reshape(-1, h).sum(0),
            "b1": d_pre.reshape(-1, h).sum(0),
        }
        dx = (d_pre @ p["w1"]) * self.input_scale
        return grads, dx


@dataclass
class Time2VecParams:
    linear_w: float
    linear_b: float
    periodic_w: np.ndarray
    periodic_b: np.ndarray
    proj: np.ndarray


class Time2Vec:
    """``[lw*t + lb, sin(pw_i*t + pb_i)]`` projected to the token dimension."""

    def __init__(self, params: dict):
        self.params = params

    @property
    def k(self) -> int:
        return self.params["periodic_w"].shape[0]

    @classmethod
    def init(cls, d: int, k: int, rng: np.random.Generator, dtype=np.float32) -> "Time2Vec":
        return cls({
            "linear_w": rng.standard_normal(1).astype(dtype),
            "linear_b": rng.standard_normal(1).astype(dtype),
            "periodic_w": rng.standard_normal(k).astype(dtype),
            "periodic_b": rng.uniform(0, 2 * np.pi, k).astype(dtype),
            "proj": (rng.standard_normal((k + 1, d)) / math.sqrt((k + 1) * d)).astype(dtype),
        })

    def features(self, t: np.ndarray) -> np.ndarray:
        p = self.params
        tt = t[..., None]
        lin = tt * p["linear_w"] + p["linear_b"]
        self._arg = tt * p["periodic_w"] + p["periodic_b"]
        self._t = tt
        return np.concatenate([lin, np.sin(self._arg)], axis=-1)

    def forward(self, t: np.ndarray) -> np.ndarray:
        self._f = self.features(t)
        return self._f @ self.params["proj"]

    def backward(self, g: np.ndarray):
        p, f, k1 = self.params, self._f, self.k + 1
        df = g @ p["proj"].T
        d_lin = df[..., :1]
        d_arg = df[..., 1:] * np.cos(self._arg)
        grads = {
            "proj": f.reshape(-1, k1).T @ g.reshape(-1, g.shape[-1]),
            "linear_w": (d_lin * self._t).reshape(-1).sum(keepdims=True),
            "linear_b": d_lin.reshape(-1).sum(keepdims=True),
            "periodic_w": (d_arg * self._t).reshape(-1, k1 - 1).sum(0),
            "periodic_b": d_arg.reshape(-1, k1 - 1).sum(0),
        }
        dt = d_lin[..., 0] * p["linear_w"][0] + (d_arg * p["periodic_w"]).sum(-1)
        return grads, dt


@dataclass
class LeTEParams:
    freqs: np.ndarray
    phases: np.ndarray
    amp: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray


def lete_split(d: int, fourier_frac: float) -> tuple[int, int]:
    n_f = int(math.floor(fourier_frac * d))
    return n_f, d - n_f


class LeTE:
    """Fourier block (cos then sin of learnable frequencies) next to a smooth 2-layer MLP."""

    def __init__(self, params: dict):
        self.params = params

    @property
    def n_fourier(self) -> int:
        return self.params["freqs"].shape[0]

    @classmethod
    def init(cls, d: int, fourier_frac: float, rng: np.random.Generator, dtype=np.float32) -> "LeTE":
        n_f, n_s = lete_split(d, fourier_frac)
        return cls({
            "freqs": rng.standard_normal(n_f).astype(dtype),
            "phases": rng.uniform(0, 2 * np.pi, n_f).astype(dtype),
            "amp": np.full(n_f, 1 / math.sqrt(d), dtype=dtype),
            "mlp_w1": rng.standard_normal(LETE_HIDDEN).astype(dtype),
            "mlp_b1": rng.uniform(-1, 1, LETE_HIDDEN).astype(dtype),
            "mlp_w2": (rng.standard_normal((LETE_HIDDEN, n_s)) / math.sqrt(LETE_HIDDEN * d)).astype(dtype),
            "mlp_b2": np.zeros(n_s, dtype=dtype),
        })

    def forward(self, t: np.ndarray) -> np.ndarray:
        p = self.params
        n_f = self.n_fourier
        n_cos = (n_f + 1) // 2
        tt = t[..., None]
        arg = tt * p["freqs"] + p["phases"]
        basis = np.concatenate([np.cos(arg[..., :n_cos]), np.sin(arg[..., n_cos:])], axis=-1)
        self._t, self._arg, self._basis = tt, arg, basis
        self._h = np.tanh(tt * p["mlp_w1"] + p["mlp_b1"])
        spline = self._h @ p["mlp_w2"] + p["mlp_b2"]
        return np.concatenate([basis * p["amp"], spline], axis=-1)

    def backward(self, g: np.ndarray):
        p = self.params
        n_f = self.n_fourier
        n_cos = (n_f + 1) // 2
        g_f, g_s = g[..., :n_f], g[..., n_f:]
        arg = self._arg
        dbasis_darg = np.concatenate([-np.sin(arg[..., :n_cos]), np.cos(arg[..., n_cos:])], axis=-1)
        d_arg = g_f * p["amp"] * dbasis_darg
        hd = self._h.shape[-1]
        d_pre = (g_s @ p["mlp_w2"].T) * (1 - self._h ** 2)
        grads = {
            "amp": (g_f * self._basis).reshape(-1, n_f).sum(0),
            "freqs": (d_arg * self._t).reshape(-1, n_f).sum(0),
            "phases": d_arg.reshape(-1, n_f).sum(0),
            "mlp_w2": self._h.reshape(-1, hd).T @ g_s.reshape(-1, g_s.shape[-1]),
            "mlp_b2": g_s.reshape(-1, g_s.shape[-1]).sum(0),
            "mlp_w1": (d_pre * self._t).reshape(-1, hd).sum(0),
            "mlp_b1": d_pre.reshape(-1, hd).sum(0),
        }
        dt = (d_arg * p["freqs"]).sum(-1) + (d_pre * p["mlp_w1"]).sum(-1)
        return grads, dt


# functional single-input API -----------------------------------------------------

def cve_forward(x, p: CVEParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.asarray(p.w2).dtype)
    _check_finite(x)
    return CVE({"w1": p.w1, "b1": p.b1, "w2": p.w2}, p.input_scale).forward(x)


def time2vec_forward(t, p: Time2VecParams) -> np.ndarray:
    dtype = np.asarray(p.proj).dtype
    enc = Time2Vec({"linear_w": np.atleast_1d(np.asarray(p.linear_w, dtype)),
                    "linear_b": np.atleast_1d(np.asarray(p.linear_b, dtype)),
                    "periodic_w": p.periodic_w, "periodic_b": p.periodic_b, "proj": p.proj})
    return enc.forward(np.asarray(t, dtype=dtype))


def time2vec_features(t, p: Time2VecParams) -> np.ndarray:
    dtype = np.asarray(p.proj).dtype
    enc = Time2Vec({"linear_w": np.atleast_1d(np.asarray(p.linear_w, dtype)),
                    "linear_b": np.atleast_1d(np.asarray(p.linear_b, dtype)),
                    "periodic_w": p.periodic_w, "periodic_b": p.periodic_b, "proj": p.proj})
    return enc.features(np.asarray(t, dtype=dtype))


def lete_forward(t, p: LeTEParams) -> np.ndarray:
    enc = LeTE({"freqs": p.freqs, "phases": p.phases, "amp": p.amp, "mlp_w1": p.mlp_w1,
                "mlp_b1": p.mlp_b1, "mlp_w2": p.mlp_w2, "mlp_b2": p.mlp_b2})
    return enc.forward(np.asarray(t, dtype=np.asarray(p.mlp_w2).dtype))


def make_time_encoder(name: str, d: int, rng: np.random.Generator, dtype=np.float32):
    kind, arg = parse_time_encoder(name)
    if kind == "cve":
        return CVE.init(d, rng, dtype)
    if kind == "time2vec":
        return Time2Vec.init(d, arg, rng, dtype)
    return LeTE.init(d, LETE_PRESETS[arg], rng, dtype)


# -- code sources -----------------------------------------------------------------

class TableCode:
    """Learned ``vocab_size x token_dim`` code table (Triplet)."""

    frozen: dict = {}

    def __init__(self, params: dict):
        self.params = params

    @classmethod
    def init(cls, vocab_size: int, d: int, rng: np.random.Generator, dtype=np.float32):
        return cls({"table": (rng.standard_normal((vocab_size, d)) / math.sqrt(d)).astype(dtype)})

    @property
    def vocab_size(self) -> int:
        return self.params["table"].shape[0]

    def forward(self, codes: np.ndarray) -> np.ndarray:
        self._codes = codes
        return self.params["table"][codes]

    def backward(self, g: np.ndarray) -> dict:
        table = self.params["table"]
        gt = np.zeros_like(table)
        scatter_add_rows(gt, np.ascontiguousarray(self._codes.reshape(-1), dtype=np.int64),
                         np.ascontiguousarray(g.reshape(-1, table.shape[1]), dtype=table.dtype))
        return {"table": gt}


class FrozenCode:
    """Cached description vectors (never updated) through a trainable projection."""

    def __init__(self, cache: EmbeddingCache, params: dict):
        self.cache = cache
        self.params = params
        self.frozen = {"cache": cache.rows}

    @classmethod
    def init(cls, cache: EmbeddingCache, d: int, rng: np.random.Generator, dtype=np.float32):
        proj = rng.standard_normal((cache.native_dim, d)) / math.sqrt(d)
        return cls(cache, {"proj": proj.astype(dtype)})

    @property
    def vocab_size(self) -> int:
        return self.cache.vocab_size

    def forward(self, codes: np.ndarray) -> np.ndarray:
        uniq, inv = np.unique(codes, return_inverse=True)
        self._rows = self.cache.rows[uniq].astype(self.params["proj"].dtype)
        self._inv = inv.reshape(-1)
        self.n_projected = len(uniq)
        return (self._rows @ self.params["proj"])[inv.reshape(codes.shape)]

    def backward(self, g: np.ndarray) -> dict:
        proj = self.params["proj"]
        gy = np.zeros((self._rows.shape[0], proj.shape[1]), dtype=proj.dtype)
        scatter_add_rows(gy, np.ascontiguousarray(self._inv, dtype=np.int64),
                         np.ascontiguousarray(g.reshape(-1, proj.shape[1]), dtype=proj.dtype))
        return {"proj": self._rows.T @ gy}


class TrainableCode:
    """Description encoder trained end to end: word table -> mean -> L2 norm -> projection."""

    frozen: dict = {}

    def __init__(self, desc_matrix, params: dict):
        self.desc = desc_matrix.tocsr()
        self.params = params

    @classmethod
    def init(cls, desc_matrix, words: np.ndarray, d: int, rng: np.random.Generator, dtype=np.float32):
        proj = rng.standard_normal((words.shape[1], d)) / math.sqrt(d)
        return cls(desc_matrix, {"words": words.astype(dtype), "proj": proj.astype(dtype)})

    @property
    def vocab_size(self) -> int:
        return self.desc.shape[0]

    def encode(self, uniq: np.ndarray) -> np.ndarray:
        self._du = self.desc[uniq].astype(self.params["words"].dtype)
        m = np.asarray(self._du @ self.params["words"])
        self._norm = np.linalg.norm(m, axis=1, keepdims=True)
        self._h = m / self._norm
        return self._h

    def forward(self, codes: np.ndarray) -> np.ndarray:
        uniq, inv = np.unique(codes, return_inverse=True)
        h = self.encode(uniq)
        self._inv = inv.reshape(-1)
        return (h @ self.params["proj"])[inv.reshape(codes.shape)]

    def backward(self, g: np.ndarray) -> dict:
        proj, words = self.params["proj"], self.params["words"]
        gy = np.zeros((self._h.shape[0], proj.shape[1]), dtype=proj.dtype)
        scatter_add_rows(gy, np.ascontiguousarray(self._inv, dtype=np.int64),
                         np.ascontiguousarray(g.reshape(-1, proj.shape[1]), dtype=proj.dtype))
        gh = gy @ proj.T
        h = self._h
        gm = (gh - h * (gh * h).sum(1, keepdims=True)) / self._norm
        gw = np.asarray(self._du.T @ gm).astype(words.dtype, copy=False)
        return {"proj": h.T @ gy, "words": gw}


# -- tokenizer --------------------------------------------------------------------

class Tokenizer:
    """Batched event embedding for one :class:`TokenizerSpec`.

    Parameter names are ``code.*``, ``time.*`` and ``value.*``; frozen arrays
    live in :attr:`frozen` and never receive gradients.
    """

    def __init__(self, spec: TokenizerSpec, code, time_enc=None, value_enc=None,
                 value_mean=None, value_std=None):
        self.spec = spec
        self.code = code
        self.time_enc = time_enc if spec.use_time else None
        self.value_enc = value_enc if spec.use_value else None
        v = code.vocab_size
        dtype = next(iter(code.params.values())).dtype
        self.value_mean = np.zeros(v, dtype) if value_mean is None else np.asarray(value_mean, dtype)
        self.value_std = np.ones(v, dtype) if value_std is None else np.asarray(value_std, dtype)

    @property
    def vocab_size(self) -> int:
        return self.code.vocab_size

    @property
    def parts(self) -> dict:
        out = {"code": self.code}
        if self.time_enc is not None:
            out["time"] = self.time_enc
        if self.value_enc is not None:
            out["value"] = self.value_enc
        return out

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, part in self.parts.items() for k, v in part.params.items()}

    @property
    def frozen(self) -> dict[str, np.ndarray]:
        return {f"code.{k}": v for k, v in getattr(self.code, "frozen", {}).items()}

    def fit_value_norm(self, codes: np.ndarray, values: np.ndarray, has_value: np.ndarray) -> None:
        """Per-code mean/std of measured values (call on the training split only)."""
        v = self.vocab_size
        c = codes[has_value]
        x = values[has_value].astype(np.float64)
        n = np.bincount(c, minlength=v).astype(np.float64)
        s1 = np.bincount(c, weights=x, minlength=v)
        s2 = np.bincount(c, weights=x * x, minlength=v)
        mean = np.divide(s1, n, out=np.zeros(v), where=n > 0)
        var = np.divide(s2, n, out=np.ones(v), where=n > 0) - mean ** 2
        std = np.sqrt(np.where((n > 1) & (var > 1e-12), var, 1.0))
        dtype = self.value_mean.dtype
        self.value_mean, self.value_std = mean.astype(dtype), std.astype(dtype)

    def standardize(self, codes, values, has_value):
        z = (values - self.value_mean[codes]) / self.value_std[codes]
        return np.where(has_value, z, 0).astype(self.value_mean.dtype)

    def check_codes(self, codes: np.ndarray) -> None:
        if codes.size and (codes.min() < 0 or codes.max() >= self.vocab_size):
            raise EmbeddingError("code_id out of range")

    def terms(self, codes, x_time, x_value):
        """The three additive terms; ablated terms are ``None``."""
        self.check_codes(codes)
        code_term = self.code.forward(codes)
        time_term = self.time_enc.forward(x_time) if self.time_enc is not None else None
        value_term = self.value_enc.forward(x_value) if self.value_enc is not None else None
        return code_term, time_term, value_term

    def forward(self, codes, x_time, x_value) -> np.ndarray:
        """``codes`` int array, ``x_time`` = log1p(minutes), ``x_value`` standardized (0 if missing)."""
        code_term, time_term, value_term = self.terms(codes, x_time, x_value)
        out = code_term
        if time_term is not None:
            out = out + time_term
        if value_term is not None:
            out = out + value_term
        return out

    def backward(self, g: np.ndarray) -> tuple[dict, dict]:
        """Returns (param grads by name, input grads ``{"time": ..., "value": ...}``)."""
        grads = {f"code.{k}": v for k, v in self.code.backward(g).items()}
        dx = {}
        for name, enc in (("time", self.time_enc), ("value", self.value_enc)):
            if enc is not None:
                pg, dx[name] = enc.backward(g)
                grads.update({f"{name}.{k}": v for k, v in pg.items()})
        return grads, dx


def build_tokenizer(spec: TokenizerSpec, vocab_size: int, token_dim: int, rng: np.random.Generator,
                    dtype=np.float32, resources=None) -> Tokenizer:
    """Initialize a tokenizer; ``resources`` supplies caches / description matrices for TextCode."""
    if spec.pathway == "triplet":
        code = TableCode.init(vocab_size, token_dim, rng, dtype)
    else:
        if resources is None:
            raise EmbeddingError("textcode tokenizers need encoder resources")
        if spec.code_source == "frozen":
            code = FrozenCode.init(resources.cache(spec.encoder, spec.mapping), token_dim, rng, dtype)
        else:
            desc, words = resources.trainable(spec.encoder, spec.mapping)
            code = TrainableCode.init(desc, words, token_dim, rng, dtype)
        if code.vocab_size != vocab_size:
            raise EmbeddingError("encoder resources do not match the vocabulary size")
    time_enc = make_time_encoder(spec.time_encoder, token_dim, rng, dtype) if spec.use_time else None
    value_enc = CVE.init(token_dim, rng, dtype) if spec.use_value else None
    return Tokenizer(spec, code, time_enc, value_enc)


def event_inputs(ev: Event, tok: Tokenizer):
    codes = np.array([ev.code_id], dtype=np.int64)
    x_time = np.log1p(np.array([ev.time_delta])).astype(tok.value_mean.dtype)
    x_value = tok.standardize(codes, np.array([ev.value]), np.array([ev.has_value]))
    return codes, x_time, x_value


def embed_event(ev: Event, tok: Tokenizer) -> np.ndarray:
    """Token vector for a single event under ``tok``'s spec."""
    if not 0 <= ev.code_id < tok.vocab_size:
        raise EmbeddingError(f"code_id {ev.code_id} out of range")
    return tok.forward(*event_inputs(ev, tok))[0]


def event_terms(ev: Event, tok: Tokenizer):
    """``(code_term, time_term, value_term)`` for one event; ablated terms are ``None``."""
    code_term, time_term, value_term = tok.terms(*event_inputs(ev, tok))
    return (code_term[0], None if time_term is None else time_term[0],
            None if value_term is None else value_term[0])
