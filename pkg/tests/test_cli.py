import io
import json

import pytest

from gapstride import cli
from gapstride.oracles import report
from gapstride.training import NumericAbort

TINY = {
    "synthetic": {"n_participants": 60, "seed": 1},
    "model": {"d": 8, "n_layers": 1, "n_heads": 2, "m_max": 32},
    "train": {"epochs": 1},
    "grud": {"hidden": 4},
    "strats": {"d": 8, "n_layers": 1, "n_heads": 2, "m_max": 32},
}


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--config", str(cfg), "--out", str(root / "out"), "--seed", "42,43"]
    codes = [run("synth", *common)[0], run("anchors", *common)[0],
             run("fit", *common, "--methods", "lmm,grud,strats,proposed")[0],
             run("eval", *common)[0], run("report", *common)[0]]
    return root / "out", codes, common


def test_pipeline_exit_codes(pipeline):
    _, codes, _ = pipeline
    assert codes == [0, 0, 0, 0, 0]


def test_artifacts_carry_digest_and_seed(pipeline):
    out, _, _ = pipeline
    digest = json.loads((out / "results" / "summary.json").read_text())["header"]["config_digest"]
    assert len(digest) == 16
    assert (out / "cohort" / "visits.csv").read_text().startswith(f"# config_digest={digest} seed=1")
    first = json.loads((out / "anchors" / "anchors.jsonl").read_text().splitlines()[0])
    assert first["config_digest"] == digest
    for method in ("lmm", "grud", "strats", "proposed"):
        run_dir = out / "runs" / method / "seed43"
        assert (run_dir / "predictions.csv").read_text().startswith(
            f"# config_digest={digest} seed=43")
        assert json.loads((run_dir / "metrics.json").read_text())["header"] == {
            "config_digest": digest, "seed": 43}
    side = json.loads((out / "runs" / "proposed" / "seed42" / "sidecar.json").read_text())
    assert len(side["lambda_per_month"]) == 1
    assert side["lambda_per_year"][0][0] == pytest.approx(12 * side["lambda_per_month"][0][0])
    log = (out / "runs" / "proposed" / "seed42" / "log.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in log] == [0, 1]
    assert (out / "results" / "report.md").read_text().startswith(f"# config_digest={digest}")


def test_summary_is_table_shaped(pipeline):
    out, _, _ = pipeline
    summary = json.loads((out / "results" / "summary.json").read_text())
    assert set(summary["methods"]) == {"lmm", "grud", "strats", "proposed"}
    assert set(summary["methods"]["lmm"]) >= {"mse", "mae", "rmse"}
    gains = json.loads((out / "results" / "gains.json").read_text())["gains"]
    assert "proposed_vs_lmm" in gains
    for name in ("plot_seed_lines.csv", "plot_target_hist.csv"):
        assert (out / "results" / name).exists()


def test_eval_single_seed_rejected(pipeline):
    _, _, common = pipeline
    code, _, err = run("eval", *common[:-2], "--seed", "42")
    assert code == 1
    assert "S ≥ 2 required" in err


def test_unknown_command_is_usage_error(capsys):
    assert run("train")[0] == 1


def test_config_field_path_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"dd": 3}}))
    code, _, err = run("synth", "--config", str(bad), "--out", str(tmp_path))
    assert code == 1 and "model.dd: unknown field" in err
    bad.write_text(json.dumps({"train": {"epochs": "many"}}))
    code, _, err = run("synth", "--config", str(bad), "--out", str(tmp_path))
    assert code == 1 and "train.epochs" in err


def test_bad_flags(tmp_path):
    assert run("synth", "--methods", "lmm,xgb", "--out", str(tmp_path))[0] == 1
    assert run("synth", "--seed", "a,b", "--out", str(tmp_path))[0] == 1
    assert run("fit", "--out", str(tmp_path / "empty"))[0] == 1


def test_precedence_flags_over_file(tmp_path, monkeypatch):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seeds": [1, 2], "out": "from_file"}))
    monkeypatch.setenv("GAPSTRIDE_OUT", "from_env")
    args = cli.build_parser().parse_args(["synth", "--config", str(f), "--seed", "7,8"])
    cfg = cli.resolve_config(args)
    assert cfg.seeds == (7, 8) and cfg.out == "from_file"
    cfg = cli.resolve_config(cli.build_parser().parse_args(["synth"]))
    assert cfg.out == "from_env" and cfg.seeds == (42, 43, 44, 45, 46)


def test_digest_ignores_paths_but_tracks_settings():
    a = cli.RunConfig(out="x")
    b = cli.RunConfig(out="y")
    assert a.digest == b.digest
    c = cli.load_config({"train": {"epochs": 3}})
    assert c.digest != a.digest


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    import gapstride.oracles as oracles

    monkeypatch.setattr(oracles, "run_verification",
                        lambda seed=0: ([report("x", "forced", 1.0, 0.0, 0.1)], False))
    code, out, _ = run("verify", "--out", str(tmp_path))
    assert code == 2 and "FAIL x" in out
    saved = json.loads((tmp_path / "verify" / "report.json").read_text())
    assert saved["passed"] is False


def test_numeric_abort_exit_code(pipeline, monkeypatch):
    out, _, common = pipeline

    def boom(*a, **k):
        raise NumericAbort(3, 7, "loss")

    monkeypatch.setattr(cli, "fit_one", boom)
    code, _, err = run("fit", *common, "--methods", "proposed")
    assert code == 3 and "epoch 3, batch 7" in err
