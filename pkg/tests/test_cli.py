import csv
import io
import json

import pytest
import yaml
from click.testing import CliRunner

from agil.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


@pytest.fixture(scope="module")
def dot_data(workdir):
    out = workdir / "dots"
    r = run("synth", "--task", "dot_gaze", "--frames", 60, "--seed", 0, "--out", out)
    assert r.exit_code == 0, r.output
    return out


@pytest.fixture(scope="module")
def toy_data(workdir):
    out = workdir / "toy"
    r = run("synth", "--task", "disambiguation", "--frames", 160, "--frames-per-trial", 40,
            "--seed", 0, "--out", out)
    assert r.exit_code == 0, r.output
    return out


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_ingest_check(dot_data):
    r = run("ingest", dot_data, "--check")
    assert r.exit_code == 0 and "3 trials, 0 with errors" in r.output


def test_ingest_reports_corrupt_trial(workdir, dot_data):
    import shutil
    bad = workdir / "bad"
    shutil.copytree(dot_data, bad)
    trial = sorted(bad.iterdir())[0]
    (trial / "meta.json").write_text("{}")
    r = CliRunner().invoke(main, ["ingest", str(bad), "--check"])
    assert r.exit_code == 1 and "1 with errors" in r.output


def test_render_gaze_and_features(workdir, dot_data):
    trial = sorted(dot_data.iterdir())[0]
    r = run("render-gaze", trial, "--out", workdir / "maps", "--frames", "0,1")
    assert r.exit_code == 0
    assert sorted(p.name for p in (workdir / "maps").iterdir()) == [
        "000000.npy", "000000.png", "000001.npy", "000001.png"]
    r = run("features", trial, "--out", workdir / "feat")
    assert r.exit_code == 0
    meta = json.loads((workdir / "feat" / "features.json").read_text())
    assert meta["flow"]["version"] >= 1


def test_eval_gaze_baseline_and_report(workdir, dot_data):
    out = workdir / "s.csv"
    assert run("eval-gaze", "--model", "S", "--data", dot_data, "--out", out).exit_code == 0
    table = rows(out)
    assert list(table[0]) == ["game", "model", "metric", "mean", "std", "n_frames"]
    assert {r["metric"] for r in table} == {"NSS", "AUC", "KL", "CC"}
    r = run("report", "--data", out, "--out", workdir / "s.md", "--seed", 0, "--reference")
    assert r.exit_code == 0 and "**NSS**" in (workdir / "s.md").read_text()


def test_train_and_play_pipeline(workdir, toy_data):
    gm = workdir / "gaze"
    r = run("train-gaze", "--channels", "I+M", "--data", toy_data, "--seed", 0, "--out", gm,
            "--epochs", 1)
    assert r.exit_code == 0 and (gm / "params.pt").is_file()
    assert run("eval-gaze", "--model", gm, "--data", toy_data, "--out", workdir / "g.csv").exit_code == 0
    for variant in ("plain", "attention"):
        extra = ["--gaze-model", gm] if variant == "attention" else []
        r = run("train-policy", "--variant", variant, *extra, "--data", toy_data, "--seed", 0,
                "--out", workdir / variant, "--epochs", 1)
        assert r.exit_code == 0, r.output
    out = workdir / "t2.csv"
    r = run("eval-policy", "--policy", workdir / "plain", "--policy", workdir / "attention",
            "--data", toy_data, "--out", out)
    assert r.exit_code == 0
    assert [r["variant"] for r in rows(out)] == ["plain", "attention"]
    scores = workdir / "scores.csv"
    r = run("play", "--policy", workdir / "attention", "--env", "toy", "--episodes", 2,
            "--seed", 0, "--max-steps", 10, "--out", scores)
    assert r.exit_code == 0
    table = rows(scores)
    assert list(table[0]) == ["episode_index", "seed", "score", "steps", "status"]
    assert [t["status"] for t in table] == ["ok", "ok"]


def test_attention_policy_without_gaze_model_fails_cleanly(workdir, toy_data):
    r = CliRunner().invoke(main, ["train-policy", "--variant", "attention", "--data",
                                  str(toy_data), "--out", str(workdir / "x")])
    assert r.exit_code == 1 and "gaze model" in r.output


def test_protocol_commands_with_config(workdir, dot_data):
    cfg = workdir / "curve.yaml"
    cfg.write_text(yaml.safe_dump({"protocol": "curve", "fractions": [0.5, 1.0],
                                   "channels": "I", "gaze_train": {"epochs": 1}}))
    out = workdir / "curve.csv"
    r = run("curve", "--config", cfg, "--data", dot_data, "--seed", 0, "--out", out)
    assert r.exit_code == 0, r.output
    assert rows(out)[0].keys() == {"game", "channels", "training_frames", "auc"}
    r = CliRunner().invoke(main, ["ablation", "--config", str(cfg), "--out", str(out)])
    assert r.exit_code == 1 and "protocol" in r.output


def test_play_rejects_unknown_env(workdir, toy_data):
    r = CliRunner().invoke(main, ["play", "--policy", str(workdir / "plain"), "--env", "gym:x",
                                  "--out", str(workdir / "y.csv")])
    assert r.exit_code != 0
