"""Command-line entry point: ``gapstride synth|anchors|fit|eval|verify|report``.

Configuration comes from defaults, then an optional JSON file (``--config``),
then flags. Every artifact carries the config digest and seed in its
header (a leading ``#`` line for CSV/Markdown, a ``header`` key for JSON).
Exit codes: 0 ok, 1 usage or config error, 2 verification failure,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import STRATS_CONFIG, GrudConfig
from .cohort import (SyntheticConfig, build_anchors, generate_synthetic, ingest_long_table,
                     read_anchors, summarize_cohort, write_anchors)
from .evaluation import (METRICS, SEEDS, compute_metrics, gains_table, metrics_csv,
                         read_metrics_csv, render_markdown, run_pair, seed_lines_csv,
                         summary_table, target_histogram_csv)
from .model import ModelConfig
from .training import NumericAbort, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
METHODS = ("lmm", "grud", "strats", "proposed")
COMMANDS = ("synth", "anchors", "fit", "eval", "verify", "report")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    out: str = ""
    input: str = ""
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grud: GrudConfig = field(default_factory=GrudConfig)
    strats: ModelConfig = field(default_factory=lambda: STRATS_CONFIG)
    seeds: tuple = SEEDS
    methods: tuple = METHODS
    jobs: int = 1

    def payload(self):
        """Everything that determines results (paths and command excluded)."""
        return {
            "synthetic": asdict(self.synthetic), "model": asdict(self.model),
            "train": asdict(self.train), "grud": asdict(self.grud),
            "strats": asdict(self.strats), "seeds": list(self.seeds),
            "methods": list(self.methods),
        }

    @property
    def digest(self):
        blob = json.dumps(self.payload(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self, seed=None):
        h = {"config_digest": self.digest}
        if seed is not None:
            h["seed"] = seed
        return h


# --- config loading -------------------------------------------------------------


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)) and value is not None:
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return None if value is None else float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _merge(path, obj, overrides):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name: f for f in fields(obj)}
    kw = {}
    for key, value in overrides.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown field")
        kw[key] = _coerce(f"{path}.{key}", value, getattr(obj, key))
    try:
        return replace(obj, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(data, base=None):
    """Apply a config mapping (parsed JSON) on top of ``base``."""
    cfg = base or RunConfig()
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    for key, value in data.items():
        if key in ("synthetic", "model", "train", "grud", "strats"):
            setattr(cfg, key, _merge(key, getattr(cfg, key), value))
        elif key == "seeds":
            cfg.seeds = _parse_seeds(value, "seeds")
        elif key == "methods":
            cfg.methods = _parse_methods(value, "methods")
        elif key in ("out", "input"):
            setattr(cfg, key, _coerce(key, value, ""))
        elif key == "jobs":
            cfg.jobs = _coerce(key, value, 1)
        else:
            raise ConfigError(f"{key}: unknown field")
    return cfg


def _parse_seeds(value, path="--seed"):
    if isinstance(value, str):
        try:
            value = [int(v) for v in value.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"{path}: expected comma-separated integers") from exc
    if not isinstance(value, (list, tuple)) or not value or \
            not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{path}: expected a nonempty list of integers")
    return tuple(value)


def _parse_methods(value, path="--methods"):
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{path}: expected a nonempty list of methods")
    for m in value:
        if m not in METHODS:
            raise ConfigError(f"{path}: unknown method {m!r} (choose from {', '.join(METHODS)})")
    return tuple(value)


def build_parser():
    p = argparse.ArgumentParser(prog="gapstride", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", help="seed or comma-separated seeds (default 42-46)")
    p.add_argument("--methods", help="comma-separated subset of lmm,grud,strats,proposed")
    p.add_argument("--out", help="output root (default $GAPSTRIDE_OUT or ./gapstride_out)")
    p.add_argument("--input", help="directory holding visits.csv and static.csv (anchors)")
    p.add_argument("--jobs", type=int, help="worker processes for fit")
    return p


def resolve_config(args):
    cfg = RunConfig(command=args.command)
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON: {exc}") from exc
        cfg = load_config(data, cfg)
    if args.seed is not None:
        cfg.seeds = _parse_seeds(args.seed)
    if args.methods is not None:
        cfg.methods = _parse_methods(args.methods)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        cfg.jobs = args.jobs
    if args.input is not None:
        cfg.input = args.input
    cfg.out = args.out or cfg.out or os.environ.get("GAPSTRIDE_OUT") or "gapstride_out"
    return cfg


# --- paths and artifact helpers ---------------------------------------------------


def _paths(cfg):
    root = Path(cfg.out)
    return {
        "root": root,
        "cohort": root / "cohort",
        "anchors": root / "anchors" / "anchors.jsonl",
        "anchor_summary": root / "anchors" / "summary.json",
        "runs": root / "runs",
        "results": root / "results",
        "verify": root / "verify" / "report.json",
    }


def _write_json(path, obj, header):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"header": header, **obj}, indent=2))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"missing input {path}; run the preceding command first") from exc


def _load_anchors(cfg):
    path = _paths(cfg)["anchors"]
    if not path.exists():
        raise ConfigError(f"missing input {path}; run `gapstride anchors` first")
    return read_anchors(path)


# --- commands ------------------------------------------------------------------


def cmd_synth(cfg, out=sys.stdout):
    p = _paths(cfg)
    p["cohort"].mkdir(parents=True, exist_ok=True)
    cohort = generate_synthetic(cfg.synthetic)
    header = f"config_digest={cfg.digest} seed={cfg.synthetic.seed}"
    cohort.write(p["cohort"] / "visits.csv", p["cohort"] / "static.csv", header)
    print(f"wrote {len(cohort.visits)} visit rows for {len(cohort.static)} participants "
          f"to {p['cohort']}", file=out)
    return EXIT_OK


def cmd_anchors(cfg, out=sys.stdout):
    p = _paths(cfg)
    src = Path(cfg.input) if cfg.input else p["cohort"]
    visits, static = src / "visits.csv", src / "static.csv"
    if not visits.exists() or not static.exists():
        raise ConfigError(f"missing cohort tables in {src}; run `gapstride synth` or pass --input")
    cohort = ingest_long_table(visits, static)
    anchors = build_anchors(cohort)
    p["anchors"].parent.mkdir(parents=True, exist_ok=True)
    write_anchors(p["anchors"], anchors, cfg.header(cfg.synthetic.seed))
    summary = summarize_cohort(anchors, cohort)
    _write_json(p["anchor_summary"], {"summary": summary.to_json(),
                                      "exclusions": dict(anchors.exclusions)}, cfg.header())
    print(f"{summary.n_anchors} anchors from {summary.n_participants} participants "
          f"-> {p['anchors']}", file=out)
    return EXIT_OK


def _fit_job(payload):
    cfg, method, seed = payload
    anchors = _load_anchors(cfg)
    return method, seed, fit_one(cfg, anchors, method, seed)


def fit_one(cfg, anchors, method, seed):
    """Train one (method, seed) pair and write its artifacts; returns the run directory."""
    run_dir = _paths(cfg)["runs"] / method / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = replace(cfg.train, seed=seed)
    res = run_pair(anchors, method, seed, train_config=tc, model_config=cfg.model,
                   baseline_configs={"grud": cfg.grud, "strats": cfg.strats})
    header = cfg.header(seed)
    trained = res.trained
    buf = io.StringIO()
    buf.write(f"# config_digest={cfg.digest} seed={seed} method={method}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["participant_id", "anchor_month", "y", "y_hat"])
    for (pid, month), y, yh in zip(res.test_ids, res.y, res.y_hat):
        w.writerow([pid, repr(float(month)), repr(float(y)), repr(float(yh))])
    (run_dir / "predictions.csv").write_text(buf.getvalue())
    _write_json(run_dir / "metrics.json", {"method": method, "metrics": res.metrics.to_json(),
                                           "seconds": res.seconds}, header)
    if method == "lmm":
        _write_json(run_dir / "lmm.json", {"fit": trained.fit.to_json(),
                                           "selection": [asdict(s) for s in trained.selection]},
                    header)
        return str(run_dir)
    meta = {"arch": method, **header}
    (run_dir / "checkpoint.json").write_text(json.dumps(ad.params_to_dict(trained.model.params, meta)))
    with open(run_dir / "log.jsonl", "w", encoding="utf-8") as fh:
        for rec in trained.result.log:
            fh.write(json.dumps({**header, **rec.to_json()}) + "\n")
    sidecar = {"arch": method, "best_epoch": trained.result.best_epoch,
               "best_val_mse": trained.result.best_val_mse,
               "model_config": asdict(trained.model.config)}
    if method == "proposed":
        lam = trained.model.lambdas()
        stats_blob = json.dumps({str(k): v for k, v in trained.train_stats.items()}, sort_keys=True)
        sidecar.update({
            "train_stats_digest": hashlib.sha256(stats_blob.encode()).hexdigest()[:16],
            "lmm_fit": trained.lmm.fit.to_json(),
            "lambda_per_month": lam.tolist(),
            "lambda_per_year": (12.0 * lam).tolist(),
        })
    _write_json(run_dir / "sidecar.json", sidecar, header)
    return str(run_dir)


def cmd_fit(cfg, out=sys.stdout):
    anchors = _load_anchors(cfg)
    pairs = [(m, s) for s in cfg.seeds for m in cfg.methods]
    manifest = []
    if cfg.jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for method, seed, path in pool.map(_fit_job, [(cfg, m, s) for m, s in pairs]):
                manifest.append({"method": method, "seed": seed, "path": path})
                print(f"fit {method} seed {seed} -> {path}", file=out)
    else:
        for m, s in pairs:
            path = fit_one(cfg, anchors, m, s)
            manifest.append({"method": m, "seed": s, "path": path})
            print(f"fit {m} seed {s} -> {path}", file=out)
    _write_json(_paths(cfg)["runs"] / "manifest.json", {"runs": manifest}, cfg.header())
    return EXIT_OK


def _collect_metrics(cfg):
    runs = _paths(cfg)["runs"]
    results = {}
    for m in cfg.methods:
        for s in cfg.seeds:
            path = runs / m / f"seed{s}" / "predictions.csv"
            if not path.exists():
                raise ConfigError(f"missing run {path}; run `gapstride fit` first")
            rows = [r for r in path.read_text().splitlines() if r and not r.startswith("#")]
            data = list(csv.DictReader(rows))
            y = [float(r["y"]) for r in data]
            yh = [float(r["y_hat"]) for r in data]
            results.setdefault(m, {})[s] = compute_metrics(y, yh)
    return results


def cmd_eval(cfg, out=sys.stdout):
    if len(cfg.seeds) < 2:
        raise ConfigError("eval: S ≥ 2 required for a seed interval; pass at least two seeds")
    p = _paths(cfg)
    results = _collect_metrics(cfg)
    p["results"].mkdir(parents=True, exist_ok=True)
    (p["results"] / "metrics.csv").write_text(metrics_csv(results, cfg.digest))
    summaries = summary_table(results)
    gains = gains_table(summaries)
    _write_json(p["results"] / "summary.json", {"label": "approximate 95% split-level interval",
                                                "seeds": list(cfg.seeds), "methods": summaries},
                cfg.header())
    _write_json(p["results"] / "gains.json", {"gains": gains}, cfg.header())
    print(render_markdown(summaries, gains), file=out)
    return EXIT_OK


def cmd_verify(cfg, out=sys.stdout):
    from .oracles import run_verification

    reports, ok = run_verification(seed=0)
    _write_json(_paths(cfg)["verify"], {"passed": ok, "reports": [r.to_json() for r in reports]},
                cfg.header())
    for r in reports:
        if not r.passed or r.check in ("gradient_fd", "monotonicity", "lipschitz_scale_stability"):
            print(f"{'PASS' if r.passed else 'FAIL'} {r.check} [{r.instance}] "
                  f"discrepancy={r.discrepancy:.3g} tol={r.tolerance:g}", file=out)
    n_fail = sum(not r.passed for r in reports)
    print(f"{len(reports) - n_fail}/{len(reports)} oracle checks passed", file=out)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_report(cfg, out=sys.stdout):
    p = _paths(cfg)
    summary = _read_json(p["results"] / "summary.json")
    gains = _read_json(p["results"] / "gains.json")["gains"]
    text = f"# config_digest={cfg.digest}\n\n" + render_markdown(summary["methods"], gains)
    (p["results"] / "report.md").write_text(text)
    metrics_text = (p["results"] / "metrics.csv").read_text()
    results = read_metrics_csv(metrics_text)
    (p["results"] / "plot_seed_lines.csv").write_text(seed_lines_csv(results, cfg.digest))
    if p["anchors"].exists():
        y = [a.y for a in read_anchors(p["anchors"])]
        (p["results"] / "plot_target_hist.csv").write_text(target_histogram_csv(y, cfg.digest))
    print(text, file=out)
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "anchors": cmd_anchors, "fit": cmd_fit, "eval": cmd_eval,
            "verify": cmd_verify, "report": cmd_report}


def main(argv=None, out=sys.stdout, err=sys.stderr):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"gapstride: error: {exc}", file=err)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"gapstride: numerical abort: {exc}", file=err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
