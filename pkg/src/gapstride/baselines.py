"""GRU-D and STraTS comparators.

Both predict the target directly (no mixed-model anchoring). GRU-D works on a
monthly grid spanning the history; STraTS shares the triplet tokenization,
encoder and pooling of the proposed model but scores attention with plain
scaled dot products and embeds values through a small feed-forward map.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .cohort import N_VARIABLES, SENTINEL_ID, standardize
from .model import (ModelConfig, encode, init_encoder_params, make_batch,
                    residual_head, tokenize_samples)


# --- monthly grid ---------------------------------------------------------


@dataclass
class RegularGridSeries:
    months: np.ndarray   # (T,) grid months relative to anchor, ending at 0
    x: np.ndarray        # (T, D) standardized values, 0 where unobserved
    m: np.ndarray        # (T, D) observation mask
    delta: np.ndarray    # (T, D) months since last observation
    x_last: np.ndarray   # (T, D) most recent value strictly before t (x_bar if none)
    x_bar: np.ndarray    # (D,)

    def __len__(self):
        return self.months.size

    def observations(self):
        """(variable id, grid month, value) for every observed cell."""
        t, k = np.nonzero(self.m)
        return [(int(kk) + 1, float(self.months[tt]), float(self.x[tt, kk]))
                for tt, kk in zip(t, k)]


def grid_cell(tau):
    """Grid month of an observation time (nearest whole month, half toward the anchor)."""
    return int(math.floor(tau + 0.5))


def to_regular_grid(history, x_bar, train_stats=None, n_vars=N_VARIABLES):
    """Place a history on a monthly grid from its earliest observation to month 0.

    Values are standardized with ``train_stats`` when given. Within a grid
    cell the latest observation of a variable wins.
    """
    if len(history) == 0:
        raise ValueError("to_regular_grid: empty history")
    x_bar = np.asarray(x_bar, dtype=np.float64)
    obs = [t for t in history if t.k != SENTINEL_ID]
    start = min((grid_cell(t.tau) for t in obs), default=0)
    months = np.arange(start, 1, dtype=np.float64)
    T = months.size
    x = np.zeros((T, n_vars))
    m = np.zeros((T, n_vars))
    latest = np.full((T, n_vars), -np.inf)
    for t in obs:
        row, col = grid_cell(t.tau) - start, t.k - 1
        if t.tau >= latest[row, col]:
            latest[row, col] = t.tau
            x[row, col] = t.v if train_stats is None else standardize(t.k, t.v, train_stats)
            m[row, col] = 1.0
    delta = np.zeros((T, n_vars))
    x_last = np.empty((T, n_vars))
    prev = x_bar.copy()
    for i in range(T):
        if i > 0:
            step = months[i] - months[i - 1]
            delta[i] = np.where(m[i - 1] > 0, step, step + delta[i - 1])
            prev = np.where(m[i - 1] > 0, x[i - 1], prev)
        x_last[i] = prev
    return RegularGridSeries(months, x, m, delta, x_last, x_bar)


def training_mean(samples, train_stats, n_vars=N_VARIABLES):
    """Per-variable mean of standardized training observations (0 if never seen)."""
    tot = np.zeros(n_vars)
    cnt = np.zeros(n_vars)
    for s in samples:
        for t in s.history:
            if t.k != SENTINEL_ID:
                tot[t.k - 1] += standardize(t.k, t.v, train_stats)
                cnt[t.k - 1] += 1
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)


@dataclass
class GridBatch:
    x: np.ndarray       # (B, T, D), right-aligned so every series ends at step T-1
    m: np.ndarray
    delta: np.ndarray
    x_last: np.ndarray
    active: np.ndarray  # (B, T) True on steps inside the series
    x_bar: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def make_grid_batch(series):
    T = max(len(s) for s in series)
    B, D = len(series), series[0].x.shape[1]
    out = {k: np.zeros((B, T, D)) for k in ("x", "m", "delta", "x_last")}
    active = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(series):
        n = len(s)
        for k in out:
            out[k][i, T - n:] = getattr(s, k)
        active[i, T - n:] = True
    return GridBatch(out["x"], out["m"], out["delta"], out["x_last"], active, series[0].x_bar)


# --- GRU-D ----------------------------------------------------------------


@dataclass(frozen=True)
class GrudConfig:
    hidden: int = 48
    dropout: float = 0.2
    batch_size: int = 64
    n_vars: int = N_VARIABLES

    def to_json(self):
        return asdict(self)


def init_grud_params(config, seed=0):
    rng = np.random.default_rng(seed)
    D, Hd = config.n_vars, config.hidden
    p = {}

    def put(name, value):
        p[name] = ad.Parameter(name, value)

    # decay rates start small and positive so gamma begins near 1 for short gaps
    put("decay_x.w", rng.uniform(0.0, 0.05, D))
    put("decay_x.b", np.zeros(D))
    put("decay_h.W", rng.uniform(0.0, 0.05 / D, (D, Hd)))
    put("decay_h.b", np.zeros(Hd))
    s = 1.0 / math.sqrt(Hd)
    for gate in ("r", "q", "h"):
        put(f"{gate}.W", rng.uniform(-s, s, (D, Hd)))
        put(f"{gate}.U", rng.uniform(-s, s, (Hd, Hd)))
        put(f"{gate}.V", rng.uniform(-s, s, (D, Hd)))
        put(f"{gate}.b", np.zeros(Hd))
    put("head.w", np.zeros(Hd))
    put("head.b", np.zeros(()))
    return p


def decay(delta, W, b):
    """``gamma = exp(-max(0, W delta + b))``; W is (D,) for diagonal or (D, H)."""
    delta = ad.Tensor(delta)
    pre = ad.contract("bd,d->bd", delta, W) if W.ndim == 1 else ad.linear(delta, W)
    return ad.exp(ad.scale(ad.relu(ad.add_bias(pre, b)), -1.0))


def _gate(p, g, xt, ht, mt):
    return ad.add_bias(ad.add(ad.add(ad.linear(xt, p[g + ".W"]), ad.linear(ht, p[g + ".U"])),
                              ad.linear(mt, p[g + ".V"])), p[g + ".b"])


def grud_forward(batch, params, config, rng=None, trace=None):
    """Predicted target for each series in a GridBatch."""
    p = params
    B, T, _ = batch.x.shape
    h = ad.Tensor(np.zeros((B, config.hidden)))
    for t in range(T):
        m = batch.m[:, t]
        gx = decay(batch.delta[:, t], p["decay_x.w"], p["decay_x.b"])
        gh = decay(batch.delta[:, t], p["decay_h.W"], p["decay_h.b"])
        if trace is not None:
            trace.append((gx.data, gh.data))
        # x~ = m x + (1-m) x_bar + (1-m) gamma_x (x_last - x_bar)
        base = m * batch.x[:, t] + (1.0 - m) * batch.x_bar
        xt = ad.add_const(ad.scale(gx, (1.0 - m) * (batch.x_last[:, t] - batch.x_bar)), base)
        hd = ad.mul(gh, h)
        mt = ad.Tensor(m)
        r = ad.sigmoid(_gate(p, "r", xt, hd, mt))
        q = ad.sigmoid(_gate(p, "q", xt, hd, mt))
        hs = ad.tanh(ad.add_bias(ad.add(ad.add(ad.linear(xt, p["h.W"]),
                                               ad.linear(ad.mul(r, hd), p["h.U"])),
                                        ad.linear(mt, p["h.V"])), p["h.b"]))
        h_new = ad.add(hd, ad.mul(q, ad.sub(hs, hd)))
        # steps before a series starts leave h untouched
        act = np.broadcast_to(batch.active[:, t, None].astype(np.float64), h.shape)
        h = ad.add(h, ad.scale(ad.sub(h_new, h), act))
    h = ad.dropout(h, config.dropout, rng)
    return ad.add_bias(ad.contract("bd,d->b", h, p["head.w"]), p["head.b"])


class GrudModel:
    arch = "grud"

    def __init__(self, config, x_bar, train_stats, params=None, seed=0):
        self.config = config
        self.x_bar = np.asarray(x_bar, dtype=np.float64)
        self.train_stats = train_stats
        self.params = params if params is not None else init_grud_params(config, seed)

    def parameters(self):
        return list(self.params.values())

    def prepare(self, samples):
        return [to_regular_grid(s.history, self.x_bar, self.train_stats, self.config.n_vars)
                for s in samples]

    def forward_rows(self, rows, rng=None):
        return grud_forward(make_grid_batch(rows), self.params, self.config, rng)

    def predict(self, samples, batch_size=256):
        rows = self.prepare(samples)
        out = [self.forward_rows(rows[i:i + batch_size]).data
               for i in range(0, len(rows), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)


# --- STraTS ---------------------------------------------------------------


STRATS_CONFIG = ModelConfig(d=48, n_layers=2, n_heads=4, dropout=0.2, attn_dropout=0.1,
                            gap_penalty=False, value_embedding="ffn")


def init_strats_params(config=STRATS_CONFIG, seed=0):
    rng = np.random.default_rng(seed)
    p = init_encoder_params(config, rng)
    p["head.w"] = ad.Parameter("head.w", np.zeros(config.d))
    p["head.b"] = ad.Parameter("head.b", np.zeros(()))
    return p


def strats_forward(batch, params, config=STRATS_CONFIG, rng=None, trace=None):
    if config.gap_penalty:
        raise ValueError("STraTS uses standard attention; gap_penalty must be False")
    return residual_head(encode(batch, params, config, rng, trace), params)


class StratsModel:
    arch = "strats"

    def __init__(self, config, train_stats, params=None, seed=0):
        self.config = config
        self.train_stats = train_stats
        self.params = params if params is not None else init_strats_params(config, seed)

    def parameters(self):
        return list(self.params.values())

    def prepare(self, samples):
        return tokenize_samples(samples, self.train_stats, self.config.m_max)

    def forward_rows(self, rows, rng=None):
        return strats_forward(make_batch(rows), self.params, self.config, rng)

    def predict(self, samples, batch_size=256):
        rows = self.prepare(samples)
        out = [self.forward_rows(rows[i:i + batch_size]).data
               for i in range(0, len(rows), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)
