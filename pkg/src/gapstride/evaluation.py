"""Participant-level splits, test metrics, seed aggregation and gain tables."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

SEEDS = (42, 43, 44, 45, 46)
METRICS = ("mse", "mae", "rmse", "corr")
LOWER_IS_BETTER = {"mse": True, "mae": True, "rmse": True, "corr": False}

# two-sided 95% Student-t critical values t_{df, 0.975}, df = 1..30
T_975 = (
    12.7062047, 4.3026527, 3.1824463, 2.7764451, 2.5705818, 2.4469119, 2.3646243,
    2.3060041, 2.2621572, 2.2281389, 2.2009852, 2.1788128, 2.1603687, 2.1447867,
    2.1314495, 2.1199053, 2.1098156, 2.1009220, 2.0930241, 2.0859634, 2.0796138,
    2.0738731, 2.0686576, 2.0638986, 2.0595386, 2.0555294, 2.0518305, 2.0484071,
    2.0452296, 2.0422725,
)


def t_quantile_975(df):
    if not 1 <= df <= len(T_975):
        raise ValueError(f"t table covers df 1..{len(T_975)}, got {df}")
    return T_975[df - 1]


# --- splits -----------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train: frozenset
    val: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("split partitions overlap")

    @property
    def pool(self):
        return self.train | self.val

    def partition_of(self, pid):
        for name in ("train", "val", "test"):
            if pid in getattr(self, name):
                return name
        raise KeyError(pid)

    def partition(self, anchors):
        """Split anchors into (train, val, test) lists by participant."""
        out = {"train": [], "val": [], "test": []}
        for a in anchors:
            out[self.partition_of(a.participant_id)].append(a)
        return out["train"], out["val"], out["test"]

    def to_json(self):
        return {"seed": self.seed, **{k: sorted(getattr(self, k)) for k in ("train", "val", "test")}}


def split_participants(participant_ids, seed, test_fraction=0.2, val_fraction=0.25):
    """Deterministic participant-level train/validation/test split.

    ``round(test_fraction * N)`` participants go to test; the remaining
    pool is split ``1 - val_fraction`` / ``val_fraction`` into train and
    validation.
    """
    ids = sorted(set(participant_ids))
    n = len(ids)
    if n < 5:
        raise ValueError(f"need at least 5 participants to split, got {n}")
    n_test = int(math.floor(test_fraction * n + 0.5))
    n_val = int(math.floor(val_fraction * (n - n_test) + 0.5))
    if n_test < 1 or n_val < 1 or n - n_test - n_val < 1:
        raise ValueError(f"{n} participants cannot fill all three partitions")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    test = frozenset(shuffled[:n_test])
    val = frozenset(shuffled[n_test:n_test + n_val])
    train = frozenset(shuffled[n_test + n_val:])
    return SplitPlan(seed, train, val, test)


# --- metrics ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    mse: float
    mae: float
    rmse: float
    corr: float | None   # None when either series has zero variance
    n_test: int

    def get(self, metric):
        return getattr(self, metric)

    def to_json(self):
        return asdict(self)


def compute_metrics(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0 or y.size != y_hat.size:
        raise ValueError(f"need equal nonzero lengths, got {y.size} and {y_hat.size}")
    e = y - y_hat
    mse = float(np.mean(e * e))
    mae = float(np.mean(np.abs(e)))
    dy, dp = y - y.mean(), y_hat - y_hat.mean()
    den = math.sqrt(float(np.sum(dy * dy)) * float(np.sum(dp * dp)))
    corr = None
    if den > 0:
        corr = float(np.clip(np.sum(dy * dp) / den, -1.0, 1.0))
    return MetricReport(mse, mae, math.sqrt(mse), corr, int(y.size))


# --- seed aggregation ---------------------------------------------------------


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    se: float
    half_width: float
    values: tuple
    n_seeds: int

    def render(self, digits=3):
        return f"{self.mean:.{digits}f} ± {self.half_width:.{digits}f}"


@dataclass
class SeedSummary:
    metrics: dict = field(default_factory=dict)   # name -> MetricSummary
    excluded: dict = field(default_factory=dict)  # name -> seeds dropped as undefined

    def __getitem__(self, metric):
        return self.metrics[metric]

    def to_json(self):
        return {
            name: {**asdict(s), "values": list(s.values), "excluded_seeds": self.excluded.get(name, []),
                   "label": "approximate 95% split-level interval"}
            for name, s in self.metrics.items()
        }


def summarize_values(values):
    """Mean, SE (sd with ddof 1 over sqrt S) and t half-width of a seed series."""
    x = np.asarray(values, dtype=np.float64)
    S = x.size
    if S < 2:
        raise ValueError("S ≥ 2 required for a seed interval")
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1)) / math.sqrt(S)
    return MetricSummary(mean, se, t_quantile_975(S - 1) * se, tuple(float(v) for v in x), S)


def aggregate_seeds(per_seed, seeds=None):
    """Summarize a list of MetricReports (or metric dicts), one per seed.

    Seeds with an undefined correlation are left out of the correlation
    summary with a warning.
    """
    per_seed = list(per_seed)
    if len(per_seed) < 2:
        raise ValueError("S ≥ 2 required for a seed interval")
    seeds = list(seeds) if seeds is not None else list(range(len(per_seed)))
    out = SeedSummary()
    for m in METRICS:
        vals, dropped = [], []
        for s, rep in zip(seeds, per_seed):
            v = rep[m] if isinstance(rep, dict) else rep.get(m)
            (dropped if v is None else vals).append(s if v is None else v)
        if dropped:
            warnings.warn(f"{m} undefined for seeds {dropped}; excluded from the summary")
            out.excluded[m] = dropped
        if len(vals) >= 2:
            out.metrics[m] = summarize_values(vals)
    return out


def relative_gains(reference, candidate):
    """Absolute and percent change of seed means from ``reference`` to ``candidate``.

    Negative deltas on error metrics and positive deltas on correlation are
    improvements.
    """
    means_a = _means(reference)
    means_b = _means(candidate)
    if set(means_a) != set(means_b):
        raise ValueError("summaries carry different metric sets")
    out = {}
    for m in means_a:
        a, b = means_a[m], means_b[m]
        delta = b - a
        pct = 100.0 * delta / abs(a) if a != 0 else None
        out[m] = {"reference": a, "candidate": b, "delta": delta, "percent": pct,
                  "improved": (delta < 0) if LOWER_IS_BETTER.get(m, True) else (delta > 0)}
    return out


def _means(summary):
    if isinstance(summary, SeedSummary):
        return {m: s.mean for m, s in summary.metrics.items()}
    return {m: (s.mean if isinstance(s, MetricSummary) else float(s)) for m, s in summary.items()}


def render_gain(g, digits=3):
    """``-0.291 (-13.1%)`` style rendering of one gain entry."""
    pct = "n/a" if g["percent"] is None else f"{g['percent']:+.1f}%"
    return f"{g['delta']:+.{digits}f} ({pct})"


# --- result files -------------------------------------------------------------


def comment_header(digest, seed=None, extra=None):
    parts = [f"config_digest={digest}"]
    if seed is not None:
        parts.append(f"seed={seed}")
    if extra:
        parts.extend(f"{k}={v}" for k, v in extra.items())
    return "# " + " ".join(parts)


def metrics_csv(results, digest):
    """CSV with one row per (method, seed, metric). ``results[method][seed]`` is a MetricReport."""
    buf = io.StringIO()
    buf.write(comment_header(digest, ",".join(str(s) for s in _all_seeds(results))) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "metric", "value"])
    for method, by_seed in results.items():
        for seed, rep in sorted(by_seed.items()):
            for m in METRICS:
                v = rep.get(m)
                w.writerow([method, seed, m, "NA" if v is None else repr(float(v))])
    return buf.getvalue()


def _all_seeds(results):
    return sorted({s for by_seed in results.values() for s in by_seed})


def summary_table(results):
    """Table-4-shaped mapping: method -> metric -> summary JSON."""
    out = {}
    for method, by_seed in results.items():
        seeds = sorted(by_seed)
        out[method] = aggregate_seeds([by_seed[s] for s in seeds], seeds).to_json()
    return out


def gains_table(summaries, reference="lmm", candidate="proposed"):
    """Table-5-shaped gains of ``candidate`` against every other method."""
    if candidate not in summaries:
        return {}
    cand = {m: s["mean"] for m, s in summaries[candidate].items()}
    return {
        f"{candidate}_vs_{other}": relative_gains({m: s["mean"] for m, s in summ.items()}, cand)
        for other, summ in summaries.items() if other != candidate
    }


def render_markdown(summaries, gains=None, digits=3):
    cols = [m for m in METRICS]
    lines = ["| Method | " + " | ".join(c.upper() if c != "corr" else "Corr" for c in cols) + " |",
             "|---" * (len(cols) + 1) + "|"]
    for method, summ in summaries.items():
        cells = [f"{summ[m]['mean']:.{digits}f} ± {summ[m]['half_width']:.{digits}f}"
                 if m in summ else "NA" for m in cols]
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Values are mean ± approximate 95% split-level interval.")
    if gains:
        lines += ["", "| Comparison | " + " | ".join(f"Δ{c.upper() if c != 'corr' else 'Corr'}"
                                                  for c in cols) + " |",
                  "|---" * (len(cols) + 1) + "|"]
        for name, g in gains.items():
            lines.append(f"| {name} | " + " | ".join(render_gain(g[m], digits) if m in g else "NA"
                                                    for m in cols) + " |")
    return "\n".join(lines) + "\n"


def target_histogram_csv(y, digest, bins=20):
    counts, edges = np.histogram(np.asarray(y, dtype=np.float64), bins=bins)
    buf = io.StringIO()
    buf.write(comment_header(digest) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return buf.getvalue()


def seed_lines_csv(results, digest):
    """Wide per-seed table: one row per (metric, seed), one column per method."""
    methods = list(results)
    buf = io.StringIO()
    buf.write(comment_header(digest) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "seed", *methods])
    for m in METRICS:
        for s in _all_seeds(results):
            row = []
            for meth in methods:
                rep = results[meth].get(s)
                v = None if rep is None else rep.get(m)
                row.append("NA" if v is None else repr(float(v)))
            w.writerow([m, s, *row])
    return buf.getvalue()


def read_metrics_csv(text):
    """Inverse of ``metrics_csv``: ``{method: {seed: MetricReport-like dict}}``."""
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    out = {}
    for r in list(csv.DictReader(rows)):
        v = None if r["value"] == "NA" else float(r["value"])
        out.setdefault(r["method"], {}).setdefault(int(r["seed"]), {})[r["metric"]] = v
    return out


def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=False)


# --- experiment driver ----------------------------------------------------------


@dataclass
class PairResult:
    method: str
    seed: int
    metrics: MetricReport
    y: np.ndarray
    y_hat: np.ndarray
    test_ids: list
    trained: object = None
    seconds: float = 0.0


def run_pair(anchors, method, seed, train_config=None, model_config=None, baseline_configs=None,
             plan=None):
    """Train ``method`` on seed ``seed``'s split of ``anchors`` and score it on the test set."""
    import time

    from .training import TrainConfig, fit_lmm_baseline, train_baseline, train_proposed

    anchors = list(anchors)
    start = time.perf_counter()
    plan = plan or split_participants([a.participant_id for a in anchors], seed)
    train, val, test = plan.partition(anchors)
    if plan.test & plan.pool:
        raise AssertionError("test participants leaked into the training pool")
    tc = train_config or TrainConfig(seed=seed)
    if method == "lmm":
        trained = fit_lmm_baseline(train)
    elif method == "proposed":
        kw = {} if model_config is None else {"model_config": model_config}
        trained = train_proposed(train, val, tc, **kw)
    elif method in ("grud", "strats"):
        cfg = (baseline_configs or {}).get(method)
        trained = train_baseline(method, train, val, tc, cfg)
    else:
        raise ValueError(f"unknown method {method!r}")
    y = np.array([a.y for a in test])
    y_hat = np.asarray(trained.predict(test), dtype=np.float64)
    return PairResult(method, seed, compute_metrics(y, y_hat), y, y_hat,
                      [(a.participant_id, a.anchor_month) for a in test], trained,
                      time.perf_counter() - start)


def run_experiment(anchors, seeds=SEEDS, methods=("lmm", "proposed"), **kw):
    """``{method: {seed: PairResult}}`` over every (method, seed) pair."""
    anchors = list(anchors)
    out = {m: {} for m in methods}
    for seed in seeds:
        for m in methods:
            out[m][seed] = run_pair(anchors, m, seed, **kw)
    return out


def metrics_of(results):
    return {m: {s: r.metrics for s, r in by_seed.items()} for m, by_seed in results.items()}
