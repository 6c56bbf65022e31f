"""Pre-norm transformer encoder classifier with hand-derived gradients.

tokens + learned positions -> [LN -> MHA -> residual, LN -> GELU FFN -> residual] x n_layers
-> final LN -> masked mean pool -> linear head -> one logit.

With ``n_layers == 0`` the final LayerNorm is skipped, leaving a pooled linear model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .embeddings import Tokenizer, TokenizerSpec, build_tokenizer

LN_EPS = 1e-5
NEG_INF = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 128
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.token_dim < 1 or self.n_heads < 1 or self.token_dim % self.n_heads:
            raise ModelError("token_dim must be a positive multiple of n_heads")
        if self.max_seq_len < 1:
            raise ModelError("max_seq_len must be >= 1")
        if self.n_layers < 0 or self.ffn_dim < 1:
            raise ModelError("n_layers must be >= 0 and ffn_dim >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")

    def as_dict(self) -> dict:
        return asdict(self)


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(0)
    db = dy.reshape(-1, d).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_model_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    d, f = cfg.token_dim, cfg.ffn_dim
    p = {"pos": _normal(rng, (cfg.max_seq_len, d), 1.0 / math.sqrt(d), dtype)}
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = np.ones(d, dtype)
        p[pre + "ln1.b"] = np.zeros(d, dtype)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
            p[pre + "b" + name[1]] = np.zeros(d, dtype)
        p[pre + "ln2.g"] = np.ones(d, dtype)
        p[pre + "ln2.b"] = np.zeros(d, dtype)
        p[pre + "w1"] = _normal(rng, (d, f), 1.0 / math.sqrt(d), dtype)
        p[pre + "b1"] = np.zeros(f, dtype)
        p[pre + "w2"] = _normal(rng, (f, d), 1.0 / math.sqrt(f), dtype)
        p[pre + "b2"] = np.zeros(d, dtype)
    if cfg.n_layers > 0:
        p["lnf.g"] = np.ones(d, dtype)
        p["lnf.b"] = np.zeros(d, dtype)
    p["head.w"] = _normal(rng, (d,), 0.02, dtype)
    p["head.b"] = np.zeros(1, dtype)
    return p


@dataclass
class Batch:
    codes: np.ndarray      # (B, L) int64, pads hold any valid code
    x_time: np.ndarray     # (B, L) log1p(minutes)
    x_value: np.ndarray    # (B, L) standardized value, 0 when missing
    mask: np.ndarray       # (B, L) bool, True on real events

    def __len__(self):
        return self.codes.shape[0]


class SequenceClassifier:
    """Transformer classifier; parameters are plain numpy arrays keyed by name.

    Tokenizer parameters appear in :attr:`params` with a ``tok.`` prefix.
    """

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer, body: dict):
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.body = body
        self.dtype = body["pos"].dtype

    @classmethod
    def init(cls, cfg: ModelConfig, tok_spec: TokenizerSpec, vocab_size: int, rng: np.random.Generator,
             dtype=np.float32, resources=None) -> "SequenceClassifier":
        tok = build_tokenizer(tok_spec, vocab_size, cfg.token_dim, rng, dtype, resources)
        return cls(cfg, tok, init_model_params(cfg, rng, dtype))

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"tok.{k}": v for k, v in self.tokenizer.params.items()}
        out.update(self.body)
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        target = self.params[name]
        if target.shape != value.shape:
            raise ModelError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
        target[...] = value

    def _dropout(self, x, rng, key):
        rate = self.cfg.dropout_rate
        if rng is None or rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
        return x * keep, keep

    def forward(self, batch: Batch, dropout_rng: np.random.Generator | None = None) -> np.ndarray:
        """Logits of shape (B,). Dropout is active only when ``dropout_rng`` is given."""
        cfg, p = self.cfg, self.body
        B, L = batch.codes.shape
        if L > cfg.max_seq_len:
            raise ModelError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        n_tok = batch.mask.sum(1)
        if np.any(n_tok == 0):
            raise ModelError("empty sequence")
        d, H = cfg.token_dim, cfg.n_heads
        dh = d // H
        emb = self.tokenizer.forward(batch.codes, batch.x_time, batch.x_value)
        if emb.shape[-1] != d:
            raise ModelError("tokenizer output dimension does not match token_dim")
        x = emb + p["pos"][:L]
        x, keep0 = self._dropout(x, dropout_rng, 0)
        key_bias = np.where(batch.mask, 0.0, NEG_INF).astype(self.dtype)[:, None, None, :]
        caches = []
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (h @ p[pre + "wq"] + p[pre + "bq"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            k = (h @ p[pre + "wk"] + p[pre + "bk"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            v = (h @ p[pre + "wv"] + p[pre + "bv"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + key_bias
            s = s - s.max(-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(-1, keepdims=True)
            o = (a @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            y = o @ p[pre + "wo"] + p[pre + "bo"]
            y, keep1 = self._dropout(y, dropout_rng, 1)
            x = x + y
            h2, ln2 = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = h2 @ p[pre + "w1"] + p[pre + "b1"]
            gu, tu = gelu(u)
            f = gu @ p[pre + "w2"] + p[pre + "b2"]
            f, keep2 = self._dropout(f, dropout_rng, 2)
            x = x + f
            caches.append((h, ln1, q, k, v, a, o, keep1, h2, ln2, u, gu, tu, keep2))
        if cfg.n_layers > 0:
            z, lnf = layer_norm(x, p["lnf.g"], p["lnf.b"])
        else:
            z, lnf = x, None
        m = batch.mask.astype(self.dtype)[..., None]
        pooled = (z * m).sum(1) / n_tok[:, None].astype(self.dtype)
        logits = pooled @ p["head.w"] + p["head.b"][0]
        self._cache = (batch, keep0, caches, lnf, m, n_tok, pooled)
        return logits

    def backward(self, dlogits: np.ndarray) -> tuple[dict, dict]:
        """Gradients for every parameter (``tok.``-prefixed for the tokenizer) and
        the tokenizer's scalar-input gradients."""
        cfg, p = self.cfg, self.body
        batch, keep0, caches, lnf, m, n_tok, pooled = self._cache
        B, L = batch.codes.shape
        d, H = cfg.token_dim, cfg.n_heads
        dh = d // H
        dlogits = dlogits.astype(self.dtype)
        g = {"head.w": pooled.T @ dlogits, "head.b": np.array([dlogits.sum()], self.dtype)}
        dpooled = dlogits[:, None] * p["head.w"][None, :]
        dz = (dpooled / n_tok[:, None].astype(self.dtype))[:, None, :] * m
        if lnf is not None:
            dx, g["lnf.g"], g["lnf.b"] = layer_norm_backward(dz, p["lnf.g"], lnf)
        else:
            dx = dz
        for i in reversed(range(cfg.n_layers)):
            pre = f"layer{i}."
            h, ln1, q, k, v, a, o, keep1, h2, ln2, u, gu, tu, keep2 = caches[i]
            df = dx if keep2 is None else dx * keep2
            g[pre + "w2"] = gu.reshape(-1, cfg.ffn_dim).T @ df.reshape(-1, d)
            g[pre + "b2"] = df.reshape(-1, d).sum(0)
            dgu = df @ p[pre + "w2"].T
            du = gelu_backward(dgu, u, tu)
            g[pre + "w1"] = h2.reshape(-1, d).T @ du.reshape(-1, cfg.ffn_dim)
            g[pre + "b1"] = du.reshape(-1, cfg.ffn_dim).sum(0)
            dh2 = du @ p[pre + "w1"].T
            dx_ln2, g[pre + "ln2.g"], g[pre + "ln2.b"] = layer_norm_backward(dh2, p[pre + "ln2.g"], ln2)
            dx = dx + dx_ln2
            dy = dx if keep1 is None else dx * keep1
            g[pre + "wo"] = o.reshape(-1, d).T @ dy.reshape(-1, d)
            g[pre + "bo"] = dy.reshape(-1, d).sum(0)
            do = (dy @ p[pre + "wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            da = do @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ do
            ds = a * (da - (da * a).sum(-1, keepdims=True))
            ds *= 1.0 / math.sqrt(dh)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dh1 = np.zeros((B, L, d), self.dtype)
            hf = h.reshape(-1, d)
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dflat = dproj.transpose(0, 2, 1, 3).reshape(B, L, d)
                g[pre + "w" + name] = hf.T @ dflat.reshape(-1, d)
                g[pre + "b" + name] = dflat.reshape(-1, d).sum(0)
                dh1 += dflat @ p[pre + "w" + name].T
            dx_ln1, g[pre + "ln1.g"], g[pre + "ln1.b"] = layer_norm_backward(dh1, p[pre + "ln1.g"], ln1)
            dx = dx + dx_ln1
        if keep0 is not None:
            dx = dx * keep0
        gpos = np.zeros_like(p["pos"])
        gpos[:L] = dx.sum(0)
        g["pos"] = gpos
        tok_grads, dinputs = self.tokenizer.backward(dx)
        g.update({f"tok.{k}": v for k, v in tok_grads.items()})
        return g, dinputs


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    y = labels.astype(np.float64)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (1.0 / (1.0 + np.exp(-z)) - y) / z.size
    return float(loss.mean()), grad.astype(logits.dtype)


def count_params(model: SequenceClassifier, trainable_only: bool = True) -> int:
    total = sum(int(v.size) for v in model.params.values())
    if not trainable_only:
        total += sum(int(v.size) for v in model.tokenizer.frozen.values())
    return total
