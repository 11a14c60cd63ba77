import csv
import re

import pytest
import tomli

from awm import cli, nn, scenario


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "data.jsonl"
    assert cli.main(["gen", "--kinds", "straight,arc,fork", "--count", "3", "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture
def ckpt(tmp_path):
    path = tmp_path / "init.awmc"
    nn.save_checkpoint(nn.init_params(nn.NetConfig(), 0), path)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_count_zero_is_valid(tmp_path):
    out = tmp_path / "empty.jsonl"
    assert cli.main(["gen", "--count", "0", "--out", str(out)]) == 0
    assert scenario.load_dataset(out) == []


def test_gen_rejects_bad_kind_and_count(tmp_path, capsys):
    assert cli.main(["gen", "--kinds", "roundabout", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["gen", "--count", "-1", "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_gen_uses_awm_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("AWM_SEED", "42")
    out = tmp_path / "d.jsonl"
    assert cli.main(["gen", "--kinds", "arc", "--count", "1", "--out", str(out)]) == 0
    assert scenario.load_dataset(out)[0].seed == 42
    monkeypatch.setenv("AWM_SEED", "forty-two")
    assert cli.main(["gen", "--count", "1", "--out", str(out)]) == 2


def test_eval_replay_expert_has_zero_ade(tmp_path, data, ckpt):
    out = tmp_path / "run"
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out), "--replay-expert"]) == 0
    rows = read_rows(out / "reports" / "eval.csv")
    assert len(rows) == 3
    assert all(float(r["ade"]) == 0.0 and r["overlap"] == "0" and r["offroad"] == "0" for r in rows)
    for d in ("checkpoints", "logs", "reports"):
        assert (out / d).is_dir()
    conf = tomli.loads((out / "config.toml").read_text())
    assert conf["eval"]["replay_expert"] is True and conf["eval"]["seed"] == 0


def test_eval_multi_rollout_requires_route_none(tmp_path, data, ckpt):
    args = ["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(tmp_path / "r"), "--rollouts", "4"]
    assert cli.main(args) == 2
    assert cli.main(args + ["--route-conditioning", "none"]) == 0
    rows = read_rows(tmp_path / "r" / "reports" / "eval.csv")
    assert all(r["rollouts"] == "4" for r in rows)


def test_usage_errors_exit_2(tmp_path, data, ckpt):
    out = str(tmp_path / "o")
    assert cli.main(["eval", "--data", str(tmp_path / "missing.jsonl"), "--ckpt", str(ckpt), "--out", out]) == 2
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(tmp_path / "missing"), "--out", out]) == 2
    assert cli.main(["mpc", "--data", str(data), "--ckpt", str(ckpt), "--out", out, "--grid", "2,3,4"]) == 2
    assert cli.main(["mpc", "--data", str(data), "--ckpt", str(ckpt), "--out", out, "--grid", "x"]) == 2
    assert cli.main(["render", "--data", str(data), "--ckpt", str(ckpt), "--out", out, "--scenario-id", "9"]) == 2
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", out, "--workers", "0"]) == 2
    assert cli.main(["train", "--data", str(data), "--out", out, "--config", str(tmp_path / "nope.toml")]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_internal_failure_exit_1(tmp_path, data, capsys):
    bad = tmp_path / "bad.awmc"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "BadMagicError" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "0", "--points", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and re.search(r"(\d+)/\1 checks passed", out)


def test_gradcheck_fails_with_impossible_tolerance():
    assert cli.main(["gradcheck", "--points", "1", "--tol", "1e-30"]) == 1


def test_config_precedence(tmp_path, data):
    conf = tmp_path / "c.toml"
    conf.write_text('seed = 5\n[train]\napg_epochs = 1\nawm_epochs = 1\nbatch_size = 2\nlr = 0.01\n'
                    '[net]\nhidden = 4\nencoder_hidden = 4\nhead_hidden = 4\nmixture = 2\n')
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--config", str(conf), "--lr", "0.002"]) == 0
    echoed = tomli.loads((out / "config.toml").read_text())
    assert echoed["train"]["lr"] == 0.002  # flag beats file
    assert echoed["train"]["apg_epochs"] == 1 and echoed["train"]["seed"] == 5  # file beats default
    assert echoed["train"]["beta1"] == 0.9  # default
    assert echoed["net"]["hidden"] == 4
    assert (out / "checkpoints" / "final.awmc").is_file()
    log = read_rows(out / "logs" / "train.csv")
    assert len(log) == 2


def test_config_rejects_unknown_keys(tmp_path, data):
    conf = tmp_path / "c.toml"
    conf.write_text("[train]\nlearning_speed = 3\n")
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(conf)]) == 2


def test_workers_do_not_change_reports(tmp_path, data, ckpt):
    for w in ("1", "2"):
        assert cli.main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(tmp_path / w),
                         "--workers", w, "--seed", "3"]) == 0
    a = (tmp_path / "1" / "reports" / "eval.csv").read_bytes()
    assert a == (tmp_path / "2" / "reports" / "eval.csv").read_bytes()


def test_mpc_report(tmp_path, data, ckpt):
    out = tmp_path / "m"
    assert cli.main(["mpc", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out), "--grid", "1,1,1;2,1,3"]) == 0
    rows = read_rows(out / "reports" / "mpc.csv")
    assert len(rows) == 6
    assert {(r["N"], r["k"], r["H"]) for r in rows} == {("1", "1", "1"), ("2", "1", "3")}


def test_render_outputs_self_contained_svg(tmp_path, data, ckpt):
    out = tmp_path / "r"
    assert cli.main(["render", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out), "--scenario-id", "1"]) == 0
    rows = read_rows(out / "reports" / "render_1.csv")
    series = {r["series"] for r in rows}
    assert series == {"expert", "realized", "imagined"}
    svg = (out / "reports" / "render_1.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    # no fonts, images or stylesheets pulled from elsewhere; only in-document references
    assert "<image" not in svg and "@import" not in svg and "<text" not in svg
    refs = re.findall(r'href="([^"]*)"', svg)
    assert all(r.startswith("#") for r in refs)
