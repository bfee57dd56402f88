"""Brute-force references checked against the main implementations.

None of these reuse the numerical path they verify: the mixed-model oracle
works with the dense marginal covariance, gradients are checked by central
differences, attention monotonicity against its closed-form derivative, and
the encoder's smoothness by an empirical Lipschitz probe.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad

_LOG2PI = math.log(2.0 * math.pi)


@dataclass
class OracleReport:
    check: str
    instance: str
    main: float
    oracle: float
    discrepancy: float
    tolerance: float
    passed: bool

    def to_json(self):
        return {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v)
                for k, v in asdict(self).items()}


def report(check, instance, main, oracle, tolerance, discrepancy=None, passed=None):
    main, oracle = float(main), float(oracle)
    disc = abs(main - oracle) if discrepancy is None else float(discrepancy)
    ok = disc <= tolerance if passed is None else bool(passed)
    return OracleReport(check, instance, main, oracle, disc, tolerance, ok)


# --- dense mixed-model likelihood -------------------------------------------


def dense_loglik(X, y, groups, sigma2_b, sigma2_e):
    """GLS beta and exact Gaussian log-likelihood under the dense covariance."""
    n = y.size
    same = groups[:, None] == groups[None, :]
    V = sigma2_e * np.eye(n) + sigma2_b * same
    sign, logdet = np.linalg.slogdet(V)
    if sign <= 0:
        raise np.linalg.LinAlgError("singular marginal covariance")
    Vi_X = np.linalg.solve(V, X)
    Vi_y = np.linalg.solve(V, y)
    beta = np.linalg.solve(X.T @ Vi_X, X.T @ Vi_y)
    r = y - X @ beta
    quad = float(r @ np.linalg.solve(V, r))
    return beta, -0.5 * (n * _LOG2PI + logdet + quad)


def lmm_dense_oracle(columns, samples=None, *, X=None, y=None, groups=None, grid=41):
    """Maximum-likelihood random-intercept fit by grid search plus Nelder-Mead.

    Returns ``(beta, sigma2_b, sigma2_e, loglik)`` with ``beta[0]`` the
    intercept and the rest on the raw covariate scale.
    """
    columns = list(getattr(columns, "fixed_effect_columns", columns))
    if samples is not None:
        samples = list(samples)
        X = [[s.x[c] for c in columns] for s in samples]
        y = [s.y for s in samples]
        groups = [s.participant_id for s in samples]
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n > 200:
        raise ValueError("dense oracle is limited to 200 observations")
    Xd = np.column_stack([np.ones(n), np.asarray(X, dtype=np.float64).reshape(n, len(columns))])
    _, codes = np.unique(np.asarray(groups).astype(str), return_inverse=True)

    beta_ols = np.linalg.lstsq(Xd, y, rcond=None)[0]
    rv = max(float(np.mean((y - Xd @ beta_ols) ** 2)), 1e-12)
    sb_grid = np.concatenate([[0.0], rv * np.logspace(-4, 1, grid - 1)])
    se_grid = rv * np.logspace(-4, 0.5, grid)
    best = (-np.inf, 0.0, rv)
    for sb in sb_grid:
        for se in se_grid:
            _, ll = dense_loglik(Xd, y, codes, sb, se)
            if ll > best[0]:
                best = (ll, sb, se)

    def negll(p):
        s, log_se = p
        try:
            return -dense_loglik(Xd, y, codes, s * s, math.exp(log_se))[1]
        except np.linalg.LinAlgError:
            return np.inf

    x0 = np.array([math.sqrt(best[1]), math.log(best[2])])
    opt = minimize(negll, x0, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
    s, log_se = opt.x if opt.fun <= -best[0] else x0
    sb, se = s * s, math.exp(log_se)
    beta, ll = dense_loglik(Xd, y, codes, sb, se)
    return beta, sb, se, ll


# --- finite differences -----------------------------------------------------


def finite_difference_grads(loss_fn, params, h=1e-4):
    """Central-difference gradient of ``loss_fn()`` with respect to every parameter.

    ``loss_fn`` takes no arguments and returns a scalar Tensor computed from
    the current ``params``; returns ``(fd_grads, analytic_grads, max_rel_err)``
    where the relative error is ``|a - f| / max(1, |a|, |f|)``.
    """
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    fd = {}
    worst = 0.0
    for k, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            dn = loss_fn().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(dn)):
                raise ValueError(f"non-finite loss while perturbing {k}[{i}]")
            gflat[i] = (up - dn) / (2.0 * h)
        fd[k] = g
        a = analytic[k]
        err = np.abs(a - g) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(g)))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return fd, analytic, worst


# --- attention monotonicity ---------------------------------------------------


def alpha_of_gap(q, keys, tau_keys, b, d, lam):
    """Weight on key ``b`` when it sits ``d`` months from a query at month 0.

    Uses the model's own attention routine; every other key keeps its time.
    """
    from .model import attention_weights

    tau = np.array(tau_keys, dtype=np.float64)
    tau[b] = -d
    gaps = np.abs(tau)[None, None, :]
    lam_t = ad.Tensor(np.array([lam], dtype=np.float64))
    mask = np.ones((1, tau.size), dtype=bool)
    alpha = attention_weights(ad.Tensor(q[None, None, None, :]), ad.Tensor(keys[None, None]),
                              gaps, mask, lam_t)
    return float(alpha.data[0, 0, 0, b])


def alpha_derivative(lam, A, z):
    """Closed form d alpha_b / d d = -lam A z / (A + z)^2."""
    return -lam * A * z / (A + z) ** 2


def random_attention_instance(rng, lam=None):
    m = int(rng.integers(2, 9))
    dh = int(rng.integers(2, 9))
    q = rng.normal(0.0, 1.0, dh)
    keys = rng.normal(0.0, 1.0, (m, dh))
    tau = -rng.uniform(0.0, 36.0, m)
    b = int(rng.integers(0, m))
    if lam is None:
        lam = float(10.0 ** rng.uniform(-3.0, 0.0))
    return q, keys, tau, b, lam


def monotonicity_sweep(n_instances=1000, seed=0, d_grid=None, lam=None, deriv_tol=1e-6,
                       fd_step=1e-5):
    """Check strict decrease of alpha_b(d) and the closed-form derivative.

    With ``lam=0`` the check becomes exact constancy of alpha_b.
    """
    d_grid = np.arange(0.0, 36.0 + 1e-9, 0.5) if d_grid is None else np.asarray(d_grid)
    rng = np.random.default_rng(seed)
    worst_deriv = 0.0
    violations = 0
    for _ in range(n_instances):
        q, keys, tau, b, lam_i = random_attention_instance(rng, lam)
        alphas = np.array([alpha_of_gap(q, keys, tau, b, d, lam_i) for d in d_grid])
        if lam_i == 0:
            violations += int(np.any(alphas != alphas[0]))
            continue
        violations += int(np.any(np.diff(alphas) >= 0))
        # A collects the other keys' exponentiated scores, fixed while d moves
        s = keys @ q / math.sqrt(q.size) - lam_i * np.abs(tau)
        others = np.delete(s, b)
        cb = s[b] + lam_i * abs(tau[b])
        for d in d_grid[d_grid > 0][::6]:
            shift = max(others.max(), cb - lam_i * d)
            A = float(np.sum(np.exp(others - shift)))
            z = math.exp(cb - lam_i * d - shift)
            closed = alpha_derivative(lam_i, A, z)
            num = (alpha_of_gap(q, keys, tau, b, d + fd_step, lam_i)
                   - alpha_of_gap(q, keys, tau, b, d - fd_step, lam_i)) / (2.0 * fd_step)
            worst_deriv = max(worst_deriv, abs(closed - num))
    name = "monotonicity_constant" if lam == 0 else "monotonicity"
    return [
        report(name, f"{n_instances} instances, seed {seed}", violations, 0, 0.0),
        report("alpha_derivative", f"{n_instances} instances, seed {seed}", worst_deriv, 0.0,
               deriv_tol, discrepancy=worst_deriv),
    ]


# --- Lipschitz probe ----------------------------------------------------------


def history_distance(a, b):
    """``max_j |dtau_j| / 12 + |dv_j|`` over position-aligned tokens with equal ids."""
    tau_a, var_a, val_a = a
    tau_b, var_b, val_b = b
    if tau_a.shape != tau_b.shape or np.any(var_a != var_b):
        raise ValueError("histories must align token by token")
    return float(np.max(np.abs(tau_a - tau_b) / 12.0 + np.abs(val_a - val_b)))


def perturb(row, scale, rng):
    tau, var, val = row
    return (tau + rng.uniform(-5.0 * scale, 5.0 * scale, tau.size), var.copy(),
            val + rng.uniform(-scale, scale, val.size))


def random_rows(n, rng, max_len=12, n_vars=15):
    rows = []
    for _ in range(n):
        m = int(rng.integers(1, max_len + 1))
        rows.append((-np.sort(rng.uniform(0.0, 60.0, m)), rng.integers(1, n_vars + 1, m),
                     rng.normal(0.0, 1.0, m)))
    return rows


def stability_probe(params, config, base_rows, scales=(1e-1, 1e-2, 1e-3, 1e-4), seed=0,
                    max_growth=10.0):
    """Empirical Lipschitz ratios ``|r(H) - r(H')| / d_H(H, H')`` per scale."""
    from .model import make_batch, residual

    rng = np.random.default_rng(seed)
    base = residual(make_batch(base_rows, _width(base_rows)), params, config).data
    maxima = []
    reports = []
    for s in scales:
        pert = [perturb(r, s, rng) for r in base_rows]
        out = residual(make_batch(pert, _width(base_rows)), params, config).data
        ratios = []
        for r0, r1, a, b in zip(base, out, base_rows, pert):
            dist = history_distance(a, b)
            if dist > 0:
                ratios.append(abs(r0 - r1) / dist)
        mx = max(ratios) if ratios else 0.0
        maxima.append(mx)
        reports.append(report("lipschitz_ratio", f"scale {s:g}, {len(ratios)} pairs",
                              mx, 0.0, math.inf, discrepancy=mx, passed=math.isfinite(mx)))
    growth = max(maxima) / min(maxima) if min(maxima) > 0 else math.inf
    reports.append(report("lipschitz_scale_stability", f"scales {list(scales)}", growth, 1.0,
                          max_growth, discrepancy=growth, passed=growth < max_growth))
    return reports


def _width(rows):
    return max(r[0].size for r in rows)


# --- small instances for the gradient checks ----------------------------------


def _small_rows(rng, n=3, m=5, n_vars=15):
    return [(-np.sort(rng.uniform(0.0, 30.0, m)), rng.integers(0, n_vars + 1, m),
             rng.normal(0.0, 1.0, m)) for _ in range(n)]


def _randomize(params, rng, keys, sd=0.3):
    for k in keys:
        params[k].data = rng.normal(0.0, sd, params[k].data.shape)


def proposed_grad_check(seed=0, h=1e-4):
    from .model import ModelConfig, init_params, make_batch, residual

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=8, n_layers=1, n_heads=2, dropout=0.0, attn_dropout=0.0)
    params = init_params(cfg, seed)
    _randomize(params, rng, ["head.w", "head.b", "L0.ln1.b", "L0.ln2.b"])
    params["L0.eta"].data = rng.normal(-2.0, 0.5, 2)
    rows = _small_rows(rng)
    batch = make_batch(rows)
    target = rng.normal(0.0, 1.0, len(rows))
    return finite_difference_grads(
        lambda: ad.mean(ad.square(ad.sub(ad.Tensor(target), residual(batch, params, cfg)))),
        params, h)


def strats_grad_check(seed=0, h=1e-4):
    from .baselines import init_strats_params, strats_forward
    from .model import ModelConfig, make_batch

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=8, n_layers=1, n_heads=2, dropout=0.0, attn_dropout=0.0,
                      gap_penalty=False, value_embedding="ffn")
    params = init_strats_params(cfg, seed)
    _randomize(params, rng, ["head.w", "head.b", "L0.ln1.b", "L0.ln2.b"])
    batch = make_batch(_small_rows(rng))
    target = rng.normal(0.0, 1.0, len(batch))
    return finite_difference_grads(
        lambda: ad.mean(ad.square(ad.sub(ad.Tensor(target), strats_forward(batch, params, cfg)))),
        params, h)


def grud_grad_check(seed=0, h=1e-4):
    from .baselines import GrudConfig, grud_forward, init_grud_params, make_grid_batch, \
        to_regular_grid
    from .cohort import ObservationTriplet

    rng = np.random.default_rng(seed)
    cfg = GrudConfig(hidden=6, dropout=0.0, n_vars=4)
    params = init_grud_params(cfg, seed)
    # keep decay pre-activations away from the relu kink at 0
    params["decay_x.b"].data = rng.uniform(0.05, 0.3, 4)
    params["decay_h.b"].data = rng.uniform(0.05, 0.3, 6)
    _randomize(params, rng, ["head.w", "head.b"])
    series = []
    for _ in range(3):
        hist = [ObservationTriplet(-float(t), int(k), float(v))
                for t, k, v in zip(rng.integers(0, 7, 5), rng.integers(1, 5, 5), rng.normal(size=5))]
        series.append(to_regular_grid(hist, rng.normal(0.0, 0.1, 4), n_vars=4))
    batch = make_grid_batch(series)
    target = rng.normal(0.0, 1.0, 3)
    return finite_difference_grads(
        lambda: ad.mean(ad.square(ad.sub(ad.Tensor(target), grud_forward(batch, params, cfg)))),
        params, h)


# --- mixed-model instances ------------------------------------------------------


def random_lmm_instance(rng, singleton=False):
    n_groups = int(rng.integers(2, 7))
    if singleton:
        sizes = np.ones(int(rng.integers(5, 16)), dtype=int)
    else:
        sizes = rng.integers(1, 6, n_groups)
        sizes[0] = max(sizes[0], 2)
        while sizes.sum() > 30:
            sizes = np.maximum(sizes - 1, 1)
    p = int(rng.integers(1, 3))
    # keep y out of span([1, X, group dummies]) so the likelihood is bounded
    while not singleton and sizes.sum() < sizes.size + p + 3:
        sizes[int(rng.integers(0, sizes.size))] += 1
    groups = np.repeat(np.arange(sizes.size), sizes)
    n = groups.size
    X = rng.normal(0.0, 1.0, (n, p))
    b = rng.normal(0.0, rng.uniform(0.2, 1.5), sizes.size)
    y = 1.0 + X @ rng.normal(0.0, 1.0, p) + b[groups] + rng.normal(0.0, 1.0, n)
    return X, y, groups


def lmm_oracle_checks(n_instances=20, seed=0, n_singleton=5):
    from .mixedfx import LmmSpec, fit_lmm

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        X, y, groups = random_lmm_instance(rng)
        cols = [f"x{j}" for j in range(X.shape[1])]
        fit = fit_lmm(LmmSpec(tuple(cols)), X=X, y=y, groups=groups)
        beta_o, sb, se, ll = lmm_dense_oracle(cols, X=X, y=y, groups=groups)
        tag = f"instance {i}: n={y.size}, groups={np.unique(groups).size}"
        out.append(report("lmm_loglik", tag, fit.loglik, ll, 1e-6))
        raw = raw_coefficients(fit)
        out.append(report("lmm_beta", tag, 0.0, 0.0, 1e-5,
                          discrepancy=float(np.max(np.abs(raw - beta_o)))))
    for i in range(n_singleton):
        X, y, groups = random_lmm_instance(rng, singleton=True)
        cols = [f"x{j}" for j in range(X.shape[1])]
        fit = fit_lmm(LmmSpec(tuple(cols)), X=X, y=y, groups=groups)
        Xd = np.column_stack([np.ones(y.size), X])
        beta = np.linalg.lstsq(Xd, y, rcond=None)[0]
        s2 = float(np.mean((y - Xd @ beta) ** 2))
        ll = -0.5 * y.size * (_LOG2PI + math.log(s2) + 1.0)
        tag = f"singleton instance {i}: n={y.size}"
        out.append(report("lmm_ols_loglik", tag, fit.loglik, ll, 1e-8))
        out.append(report("lmm_ols_beta", tag, 0.0, 0.0, 1e-8,
                          discrepancy=float(np.max(np.abs(raw_coefficients(fit) - beta)))))
    return out


def raw_coefficients(fit):
    """Intercept and slopes of an LmmFit expressed on the raw covariate scale."""
    slopes = fit.beta[1:] / fit.x_scale
    return np.concatenate([[fit.beta[0] - float(np.sum(slopes * fit.x_mean))], slopes])


# --- full suite -------------------------------------------------------------------


def run_verification(seed=0, n_monotone=1000, n_probe=1000, n_lmm=20):
    """Run every oracle check; returns ``(reports, all_passed)``."""
    from .model import ModelConfig, init_params

    reports = []
    reports += lmm_oracle_checks(n_lmm, seed)
    for name, fn in (("proposed", proposed_grad_check), ("grud", grud_grad_check),
                     ("strats", strats_grad_check)):
        _, _, err = fn(seed)
        reports.append(report("gradient_fd", name, err, 0.0, 1e-4, discrepancy=err))
    reports += monotonicity_sweep(n_monotone, seed)
    reports += monotonicity_sweep(max(n_monotone // 10, 1), seed + 1, lam=0.0)
    cfg = ModelConfig(dropout=0.0, attn_dropout=0.0)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    params["head.w"].data = rng.normal(0.0, 1.0 / math.sqrt(cfg.d), cfg.d)
    reports += stability_probe(params, cfg, random_rows(n_probe, rng), seed=seed)
    return reports, all(r.passed for r in reports)
