"""Random-intercept linear mixed model fitted by maximum likelihood.

The likelihood is profiled on ``theta = sigma_b^2 / sigma^2``: for fixed
theta, beta is the GLS solution and sigma^2 has a closed form, both built
from per-participant sums (the compound-symmetry inverse is
``I - c_i 11'`` with ``c_i = theta / (1 + n_i theta)``). The remaining
one-dimensional problem is bracketed on a log grid over ``[0, 1e4]`` and
refined by golden-section search.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

THETA_MAX = 1.0e4
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_LOG2PI = math.log(2.0 * math.pi)


class RankDeficientError(ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design is rank deficient; collinear columns: {self.columns}")


@dataclass(frozen=True)
class LmmSpec:
    fixed_effect_columns: tuple = ()

    def __post_init__(self):
        cols = tuple(self.fixed_effect_columns)
        if len(set(cols)) != len(cols):
            raise ValueError(f"duplicate fixed-effect columns in {cols}")
        object.__setattr__(self, "fixed_effect_columns", cols)

    def extended(self, columns):
        return LmmSpec(self.fixed_effect_columns + tuple(columns))


@dataclass(frozen=True)
class LmmFit:
    """Fitted model; ``beta[0]`` is the intercept, the rest follow ``columns``.

    Coefficients act on standardized covariates ``(x - x_mean) / x_scale``.
    """

    columns: tuple
    beta: np.ndarray
    sigma2_b: float
    sigma2_e: float
    loglik: float
    n_train: int
    x_mean: np.ndarray = field(default=None)
    x_scale: np.ndarray = field(default=None)
    degenerate: bool = False

    def __post_init__(self):
        p = len(self.columns)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        if self.beta.shape != (p + 1,):
            raise ValueError(f"beta must have {p + 1} entries, got {self.beta.shape}")
        for name, default in (("x_mean", 0.0), ("x_scale", 1.0)):
            val = getattr(self, name)
            val = np.full(p, default) if val is None else np.asarray(val, dtype=np.float64)
            object.__setattr__(self, name, val)

    @property
    def q(self):
        return self.beta.size + 2

    @property
    def theta(self):
        return self.sigma2_b / self.sigma2_e

    @property
    def bic(self):
        return bic(self)

    def to_json(self):
        return {
            "columns": list(self.columns),
            "beta": {"(Intercept)": float(self.beta[0]),
                     **{c: float(b) for c, b in zip(self.columns, self.beta[1:])}},
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "sigma2_b": self.sigma2_b,
            "sigma2_e": self.sigma2_e,
            "loglik": self.loglik,
            "bic": self.bic,
            "n_train": self.n_train,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_json(cls, d):
        cols = tuple(d["columns"])
        beta = [d["beta"]["(Intercept)"]] + [d["beta"][c] for c in cols]
        return cls(cols, np.array(beta), d["sigma2_b"], d["sigma2_e"], d["loglik"],
                   d["n_train"], np.array(d["x_mean"]), np.array(d["x_scale"]),
                   d.get("degenerate", False))

    def dumps(self):
        return json.dumps(self.to_json())


def bic(fit):
    return -2.0 * fit.loglik + fit.q * math.log(fit.n_train)


# --- design helpers -------------------------------------------------------


def _group_index(groups):
    _, idx = np.unique(np.asarray(groups), return_inverse=True)
    return idx


def standardize_design(X, names):
    """Column-standardize; zero-variance columns are collinear with the intercept."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0) if X.shape[1] else np.zeros(0)
    sd = X.std(axis=0) if X.shape[1] else np.ones(0)
    flat = [names[j] for j in range(X.shape[1]) if not sd[j] > 1e-12 * max(1.0, abs(mean[j]))]
    if flat:
        raise RankDeficientError(flat)
    return (X - mean) / sd, mean, sd


def check_rank(Z, names, tol=1e-9):
    """Raise naming every column that is a linear combination of earlier ones."""
    q, r = np.linalg.qr(Z)
    diag = np.abs(np.diag(r))
    scale = max(1.0, float(diag.max()) if diag.size else 1.0)
    bad = [names[j] for j in range(Z.shape[1]) if diag[j] <= tol * scale * math.sqrt(Z.shape[0])]
    if bad:
        raise RankDeficientError(bad)


# --- profiled likelihood --------------------------------------------------


class _Profile:
    """Per-group sufficient statistics for the profiled likelihood."""

    def __init__(self, Z, y, groups):
        g = _group_index(groups)
        self.Z, self.y, self.g = Z, y, g
        self.n = y.size
        self.ng = np.bincount(g).astype(np.float64)
        p = Z.shape[1]
        self.ZtZ = Z.T @ Z
        self.Zty = Z.T @ y
        self.S = np.zeros((self.ng.size, p))
        np.add.at(self.S, g, Z)
        self.t = np.bincount(g, weights=y, minlength=self.ng.size)

    def solve(self, theta):
        c = theta / (1.0 + self.ng * theta)
        A = self.ZtZ - (self.S * c[:, None]).T @ self.S
        b = self.Zty - self.S.T @ (c * self.t)
        beta = np.linalg.solve(A, b)
        # r' W r with W = I - c 11' per group
        r = self.y - self.Z @ beta
        gr = np.bincount(self.g, weights=r, minlength=self.ng.size)
        quad = float(r @ r) - float(np.sum(c * gr * gr))
        sigma2 = quad / self.n
        return beta, sigma2

    def loglik(self, theta):
        beta, sigma2 = self.solve(theta)
        ll = (-0.5 * self.n * (_LOG2PI + math.log(sigma2) + 1.0)
              - 0.5 * float(np.sum(np.log1p(self.ng * theta))))
        return ll, beta, sigma2


def _golden_max(f, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    prev = max(fc, fd)
    while True:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
        best = max(fc, fd)
        if b - a <= tol * max(1.0, abs(c)) and abs(best - prev) < 1e-10:
            break
        if b - a <= 1e-15 * max(1.0, abs(c)):
            break
        prev = best
    return (c, fc) if fc >= fd else (d, fd)


def maximize_theta(loglik_of_theta, theta_max=THETA_MAX, tol=1e-10):
    """Bracket the profiled maximum on {0} + log grid, then golden-section it."""
    grid = np.concatenate([[0.0], np.logspace(-8, math.log10(theta_max), 61)])
    vals = np.array([loglik_of_theta(t) for t in grid])
    k = int(np.argmax(vals))
    if np.ptp(vals) < 1e-10:
        return 0.0, float(vals[0]), True
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid.size - 1)]
    theta, val = _golden_max(loglik_of_theta, lo, hi, tol)
    if vals[k] > val:
        theta, val = float(grid[k]), float(vals[k])
    return float(theta), float(val), False


def fit_lmm(spec, samples=None, *, X=None, y=None, groups=None):
    """Maximum-likelihood random-intercept fit.

    Pass either ``samples`` (AnchorSample-like objects with ``x``, ``y`` and
    ``participant_id``) or the arrays ``X``, ``y``, ``groups`` directly.
    """
    cols = list(spec.fixed_effect_columns)
    if samples is not None:
        samples = list(samples)
        X = np.array([[s.x[c] for c in cols] for s in samples], dtype=np.float64)
        X = X.reshape(len(samples), len(cols))
        y = np.array([s.y for s in samples], dtype=np.float64)
        groups = [s.participant_id for s in samples]
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("fit_lmm needs at least one sample")
    X = np.asarray(X, dtype=np.float64).reshape(y.size, len(cols))
    Xs, mean, sd = standardize_design(X, cols)
    Z = np.column_stack([np.ones(y.size), Xs])
    if Z.shape[0] < Z.shape[1]:
        raise RankDeficientError(cols[Z.shape[0] - 1:])
    check_rank(Z, ["(Intercept)"] + cols)

    prof = _Profile(Z, y, groups)
    theta, ll, flat = maximize_theta(lambda t: prof.loglik(t)[0])
    degenerate = flat or bool(np.all(prof.ng == 1))
    if degenerate:
        theta = 0.0
    ll, beta, sigma2 = prof.loglik(theta)
    return LmmFit(tuple(cols), beta, theta * sigma2, sigma2, ll, int(y.size), mean, sd,
                  degenerate)


def profiled_loglik(fit, samples=None, *, X=None, y=None, groups=None, theta=None):
    """Profiled log-likelihood of the fit's design at ``theta`` (default: fitted)."""
    cols = list(fit.columns)
    if samples is not None:
        samples = list(samples)
        X = np.array([[s.x[c] for c in cols] for s in samples], dtype=np.float64)
        y = np.array([s.y for s in samples], dtype=np.float64)
        groups = [s.participant_id for s in samples]
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64).reshape(y.size, len(cols))
    Z = np.column_stack([np.ones(y.size), (X - fit.x_mean) / fit.x_scale])
    prof = _Profile(Z, y, groups)
    return prof.loglik(fit.theta if theta is None else theta)[0]


def predict_fixed(fit, x):
    """Marginal prediction ``beta0 + x'beta``; the random intercept is taken as 0.

    ``x`` is a vector (or matrix of rows) in the fit's column order, or a
    mapping from column name to value.
    """
    if isinstance(x, dict):
        x = [x[c] for c in fit.columns]
    x = np.asarray(x, dtype=np.float64)
    p = len(fit.columns)
    if x.shape[-1:] != (p,) and not (p == 0 and x.size == 0):
        raise ValueError(f"expected {p} covariates, got shape {x.shape}")
    if p == 0:
        return float(fit.beta[0]) if x.ndim <= 1 else np.full(x.shape[0], fit.beta[0])
    z = (x - fit.x_mean) / fit.x_scale
    out = fit.beta[0] + z @ fit.beta[1:]
    return float(out) if np.ndim(out) == 0 else out


def predict_samples(fit, samples):
    cols = list(fit.columns)
    X = np.array([[s.x[c] for c in cols] for s in samples], dtype=np.float64)
    return predict_fixed(fit, X.reshape(len(samples), len(cols)))


# --- BIC forward selection --------------------------------------------------


@dataclass
class SelectionStep:
    block: str
    bic: float | None
    accepted: bool
    note: str = ""


def select_by_bic(candidate_blocks, samples, log=None):
    """Forward stepwise over whole covariate blocks, starting intercept-only.

    ``candidate_blocks`` is an ordered mapping (or list of pairs) from block
    name to column names. Each round adds the block with the largest BIC
    decrease (earlier block wins ties); selection stops when no block lowers
    BIC. Columns that are constant in ``samples`` are dropped from their
    block; a block that makes the design rank deficient is skipped.
    Returns ``(spec, fit)``; ``log`` (a list) receives SelectionStep entries.
    """
    samples = list(samples)
    blocks = list(candidate_blocks.items() if isinstance(candidate_blocks, dict)
                  else candidate_blocks)
    usable = []
    for name, cols in blocks:
        keep = []
        for c in cols:
            vals = np.array([s.x[c] for s in samples], dtype=np.float64)
            if vals.size and np.ptp(vals) > 0:
                keep.append(c)
        if keep:
            usable.append((name, tuple(keep)))
        elif log is not None:
            log.append(SelectionStep(name, None, False, "all columns constant"))

    spec = LmmSpec()
    best = fit_lmm(spec, samples)
    remaining = list(usable)
    while remaining:
        round_best = None
        for i, (name, cols) in enumerate(remaining):
            cols = tuple(c for c in cols if c not in spec.fixed_effect_columns)
            try:
                cand = fit_lmm(spec.extended(cols), samples)
            except (RankDeficientError, np.linalg.LinAlgError) as exc:
                if log is not None:
                    log.append(SelectionStep(name, None, False, f"rejected: {exc}"))
                continue
            if round_best is None or cand.bic < round_best[2].bic:
                round_best = (i, cols, cand)
        if round_best is None or round_best[2].bic >= best.bic:
            break
        i, cols, cand = round_best
        if log is not None:
            log.append(SelectionStep(remaining[i][0], cand.bic, True))
        spec, best = spec.extended(cols), cand
        del remaining[i]
    return spec, best
