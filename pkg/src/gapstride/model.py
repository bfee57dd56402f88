"""Residual gap-aware transformer.

Histories are tokenized as (tau, k, v) triplets, embedded additively,
passed through pre-norm multi-head self-attention whose scores carry a
learned penalty ``-lambda_{l,h} |tau_a - tau_b|`` with
``lambda = softplus(eta) >= 0``, pooled by a tanh-scored softmax and read out
by a linear residual head. The final prediction adds that residual to the
mixed model's marginal fixed-effect prediction.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .cohort import N_VARIABLES, SENTINEL_ID, standardize
from .mixedfx import predict_samples


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    attn_dropout: float = 0.1
    batch_size: int = 64
    gap_init_per_year: float = 0.1
    n_vars: int = N_VARIABLES
    m_max: int = 256
    prenorm: bool = True
    ffn_residual: bool = True
    gap_penalty: bool = True
    value_embedding: str = "linear"  # "linear" (W_v v + b_v) or "ffn"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        for name in ("dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.value_embedding not in ("linear", "ffn"):
            raise ValueError("value_embedding must be 'linear' or 'ffn'")

    @property
    def d_head(self):
        return self.d // self.n_heads

    @property
    def eta_init(self):
        # per-year scale converted to per-month, then inverted through softplus
        return float(ad.inverse_softplus(self.gap_init_per_year / 12.0))

    def to_json(self):
        return asdict(self)


@dataclass
class TokenBatch:
    tau: np.ndarray     # (B, m) months relative to anchor, 0 at pads
    var: np.ndarray     # (B, m) variable ids, 0 at pads
    val: np.ndarray     # (B, m) standardized values, 0 at pads
    mask: np.ndarray    # (B, m) True at real tokens
    lengths: np.ndarray

    def __len__(self):
        return self.tau.shape[0]

    def padded(self, m):
        """Copy with ``m - width`` extra pad columns appended."""
        extra = m - self.tau.shape[1]
        if extra < 0:
            raise ValueError("cannot pad to a narrower width")
        pad = ((0, 0), (0, extra))
        return TokenBatch(np.pad(self.tau, pad), np.pad(self.var, pad),
                          np.pad(self.val, pad), np.pad(self.mask, pad), self.lengths.copy())


def tokenize(history, train_stats, m_max=256, n_vars=N_VARIABLES):
    """Turn one history into ``(tau, var, val)`` arrays of at most ``m_max`` tokens.

    Values are standardized with ``train_stats`` and clipped to +-6 SD;
    truncation keeps the ``m_max`` most recent triplets in original order.
    """
    if len(history) == 0:
        history = [type("T", (), {"tau": 0.0, "k": SENTINEL_ID, "v": 0.0})()]
    tau = np.array([t.tau for t in history], dtype=np.float64)
    var = np.array([t.k for t in history], dtype=np.int64)
    if var.min() < 0 or var.max() > n_vars:
        bad = var[(var < 0) | (var > n_vars)][0]
        raise ValueError(f"unknown variable id {bad}")
    if np.any(tau > 0):
        raise ValueError("history contains post-anchor observations (tau > 0)")
    val = np.array([standardize(t.k, t.v, train_stats) for t in history], dtype=np.float64)
    if tau.size > m_max:
        keep = np.sort(np.argsort(-tau, kind="stable")[:m_max])
        tau, var, val = tau[keep], var[keep], val[keep]
    return tau, var, val


def make_batch(rows, width=None):
    """Stack tokenized rows into a right-padded TokenBatch."""
    lengths = np.array([r[0].size for r in rows], dtype=np.int64)
    m = int(lengths.max()) if width is None else width
    B = len(rows)
    tau, val = np.zeros((B, m)), np.zeros((B, m))
    var = np.zeros((B, m), dtype=np.int64)
    mask = np.zeros((B, m), dtype=bool)
    for i, (t, k, v) in enumerate(rows):
        n = t.size
        tau[i, :n], var[i, :n], val[i, :n], mask[i, :n] = t, k, v, True
    return TokenBatch(tau, var, val, mask, lengths)


def tokenize_samples(samples, train_stats, m_max=256):
    return [tokenize(s.history, train_stats, m_max) for s in samples]


# --- parameters -----------------------------------------------------------


def _normal(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def init_encoder_params(config, rng, prefix=""):
    """Embedding, encoder layers and pooling parameters (no output head)."""
    d, H, dh = config.d, config.n_heads, config.d_head
    p = {}

    def put(name, value):
        p[prefix + name] = ad.Parameter(prefix + name, value)

    put("tau.w1", rng.normal(0.0, 1.0, d))
    put("tau.b1", rng.normal(0.0, 1.0, d))
    put("tau.W2", _normal(rng, (d, d), d))
    put("tau.b2", np.zeros(d))
    put("var_embed", rng.normal(0.0, 1.0, (config.n_vars + 1, d)))
    if config.value_embedding == "linear":
        put("val.w", rng.normal(0.0, 1.0, d))
        put("val.b", np.zeros(d))
    else:
        put("val.w1", rng.normal(0.0, 1.0, d))
        put("val.b1", rng.normal(0.0, 1.0, d))
        put("val.W2", _normal(rng, (d, d), d))
        put("val.b2", np.zeros(d))
    for layer in range(config.n_layers):
        q = f"L{layer}."
        put(q + "ln1.g", np.ones(d))
        put(q + "ln1.b", np.zeros(d))
        put(q + "WQ", _normal(rng, (H, d, dh), d))
        put(q + "WK", _normal(rng, (H, d, dh), d))
        put(q + "WV", _normal(rng, (H, d, dh), d))
        put(q + "WO", _normal(rng, (H, dh, d), d))
        if config.gap_penalty:
            put(q + "eta", np.full(H, config.eta_init))
        put(q + "ln2.g", np.ones(d))
        put(q + "ln2.b", np.zeros(d))
        put(q + "ffn.W1", _normal(rng, (d, 2 * d), d))
        put(q + "ffn.b1", np.zeros(2 * d))
        put(q + "ffn.W2", _normal(rng, (2 * d, d), 2 * d))
        put(q + "ffn.b2", np.zeros(d))
    put("pool.W", _normal(rng, (d, d), d))
    put("pool.b", np.zeros(d))
    put("pool.w", _normal(rng, (d,), d))
    return p


def init_params(config, seed=0):
    """Proposed-model parameters; the residual head starts at exactly zero."""
    rng = np.random.default_rng(seed)
    p = init_encoder_params(config, rng)
    p["head.w"] = ad.Parameter("head.w", np.zeros(config.d))
    p["head.b"] = ad.Parameter("head.b", np.zeros(()))
    return p


def gap_lambdas(params, config):
    """Learned penalties per (layer, head), in units of 1/month."""
    return np.array([ad.softplus_value(params[f"L{l}.eta"].data)
                     for l in range(config.n_layers)])


# --- forward pieces -------------------------------------------------------


def _scalar_ffn(x, w1, b1, W2, b2):
    # 1 -> d -> d with tanh in between, applied to every entry of x
    h = ad.tanh(ad.add_bias(ad.contract("bm,d->bmd", x, w1), b1))
    return ad.linear(h, W2, b2)


def embed(batch, params, config):
    """Initial token matrix ``e_tau(tau) + e_k(k) + value embedding``."""
    p = params
    e_tau = _scalar_ffn(ad.Tensor(batch.tau / 12.0), p["tau.w1"], p["tau.b1"],
                        p["tau.W2"], p["tau.b2"])
    e_k = ad.embedding(p["var_embed"], batch.var)
    v = ad.Tensor(batch.val)
    if config.value_embedding == "linear":
        e_v = ad.add_bias(ad.contract("bm,d->bmd", v, p["val.w"]), p["val.b"])
    else:
        e_v = _scalar_ffn(v, p["val.w1"], p["val.b1"], p["val.W2"], p["val.b2"])
    return ad.add(ad.add(e_tau, e_k), e_v)


def time_gaps(tau):
    """Pairwise |tau_a - tau_b| in months, shape (B, m, m)."""
    a = np.broadcast_to(tau[:, :, None], tau.shape + tau.shape[-1:])
    b = np.broadcast_to(tau[:, None, :], a.shape)
    return ad.abs_diff(a, b)


def attention_weights(q, k, gaps, mask, lam=None):
    """Per-head attention weights from projected queries/keys.

    ``q``, ``k``: (B, H, m, dh); ``gaps``: (B, m, m) months; ``lam``: (H,)
    tensor or None for plain scaled dot-product attention.
    """
    dh = q.shape[-1]
    s = ad.scale(ad.bmm(q, k, transpose_b=True), 1.0 / math.sqrt(dh))
    if lam is not None:
        s = ad.sub(s, ad.contract("h,bac->bhac", lam, gaps))
    return ad.masked_softmax(s, mask[:, None, None, :])


def gap_attention_layer(z, gaps, mask, params, layer, config, rng=None, trace=None):
    p = params
    q = f"L{layer}."
    zn = ad.layer_norm(z, p[q + "ln1.g"], p[q + "ln1.b"]) if config.prenorm else z
    Q = ad.contract("bmi,hid->bhmd", zn, p[q + "WQ"])
    K = ad.contract("bmi,hid->bhmd", zn, p[q + "WK"])
    V = ad.contract("bmi,hid->bhmd", zn, p[q + "WV"])
    lam = ad.softplus(p[q + "eta"]) if config.gap_penalty else None
    alpha = attention_weights(Q, K, gaps, mask, lam)
    if trace is not None:
        trace.append({"Q": Q.data, "K": K.data, "alpha": alpha.data,
                      "lam": None if lam is None else lam.data})
    alpha = ad.dropout(alpha, config.attn_dropout, rng)
    heads = ad.bmm(alpha, V)
    o = ad.contract("bhad,hdo->bao", heads, p[q + "WO"])
    u = ad.add(z, ad.dropout(o, config.dropout, rng))
    un = ad.layer_norm(u, p[q + "ln2.g"], p[q + "ln2.b"]) if config.prenorm else u
    f = ad.linear(ad.relu(ad.linear(un, p[q + "ffn.W1"], p[q + "ffn.b1"])),
                  p[q + "ffn.W2"], p[q + "ffn.b2"])
    f = ad.dropout(f, config.dropout, rng)
    return ad.add(u, f) if config.ffn_residual else f


def pool(z, mask, params):
    """Attention pooling ``h = sum_j pi_j z_j``; pads get weight exactly 0."""
    if not np.all(mask.any(axis=1)):
        raise ValueError("pool: a history has no valid tokens")
    u = ad.tanh(ad.linear(z, params["pool.W"], params["pool.b"]))
    pi = ad.masked_softmax(ad.contract("bmo,o->bm", u, params["pool.w"]), mask)
    return ad.contract("bm,bmd->bd", pi, z), pi


def trim(batch):
    """Drop trailing columns that are padding in every row."""
    width = int(batch.lengths.max()) if len(batch) else 0
    cols = np.flatnonzero(batch.mask.any(axis=0))
    width = max(width, int(cols[-1]) + 1 if cols.size else 0)
    if width == batch.tau.shape[1]:
        return batch
    return TokenBatch(batch.tau[:, :width], batch.var[:, :width], batch.val[:, :width],
                      batch.mask[:, :width], batch.lengths)


def encode(batch, params, config, rng=None, trace=None):
    """Pooled history representation (B, d).

    All-pad trailing columns are removed first, so appending padding leaves
    every floating-point operation (and hence the output) unchanged.
    """
    batch = trim(batch)
    z = embed(batch, params, config)
    gaps = time_gaps(batch.tau)
    for layer in range(config.n_layers):
        z = gap_attention_layer(z, gaps, batch.mask, params, layer, config, rng, trace)
    h, pi = pool(z, batch.mask, params)
    if trace is not None:
        trace.append({"pi": pi.data})
    return h


def residual_head(h, params):
    return ad.add_bias(ad.contract("bd,d->b", h, params["head.w"]), params["head.b"])


def residual(batch, params, config, rng=None):
    """``r_theta(H)`` for every history in the batch; dropout only when ``rng`` is given."""
    return residual_head(encode(batch, params, config, rng), params)


# --- model wrapper --------------------------------------------------------


class GapTransformer:
    """Parameters plus the fixed inputs needed to predict from anchors."""

    arch = "proposed"

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self):
        return list(self.params.values())

    def lambdas(self):
        return gap_lambdas(self.params, self.config)

    def forward(self, batch, rng=None):
        return residual(batch, self.params, self.config, rng)

    def residuals(self, rows, batch_size=256):
        out = []
        for i in range(0, len(rows), batch_size):
            out.append(self.forward(make_batch(rows[i:i + batch_size])).data)
        return np.concatenate(out) if out else np.zeros(0)

    def copy_params(self):
        return {k: ad.Parameter(k, v.data.copy()) for k, v in self.params.items()}


def predict(samples, lmm_fit, model, train_stats):
    """``g_stat + r_theta(H)`` for each anchor sample (evaluation mode)."""
    samples = list(samples)
    g = np.asarray(predict_samples(lmm_fit, samples), dtype=np.float64).reshape(len(samples))
    rows = tokenize_samples(samples, train_stats, model.config.m_max)
    return g + model.residuals(rows)


def with_overrides(config, **kw):
    return replace(config, **kw)
