import filecmp
import json

import pytest

from uwadv import cli


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["gen-data", "--out", str(root / "d"), "--count", "6", "--size", "24", "--seed", "7"]) == 0
    assert cli.run(["train", "--data", str(root / "d"), "--out", str(root / "m"), "--epochs", "1"]) == 0
    return root


def test_gen_data_reproducible(workspace, tmp_path):
    assert cli.run(["gen-data", "--out", str(tmp_path / "d"), "--count", "6", "--size", "24", "--seed", "7"]) == 0
    assert tree_bytes(workspace / "d") == tree_bytes(tmp_path / "d")


def test_train_writes_checkpoint(workspace):
    names = {p.name for p in (workspace / "m").iterdir()}
    assert {"model.json", "model.bin", "train_log.csv", "meta.json"} <= names


def test_adversarial_finetune_reproducible(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "d"), "--epochs", "1", "--adv", "--iters", "2", "--init-from", str(workspace / "m")]
    assert cli.run(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_zero_budget_attack_copies_inputs(workspace, tmp_path):
    out = tmp_path / "adv"
    assert cli.run(["attack", "--model", str(workspace / "m"), "--input", str(workspace / "d"), "--out", str(out), "--method", "pixel", "--eps", "0"]) == 0
    for p in (workspace / "d" / "degraded").iterdir():
        assert filecmp.cmp(p, out / p.name, shallow=False)


@pytest.mark.parametrize("method", ["pixel", "color", "channel-r", "gaussian", "uniform"])
def test_attack_methods(workspace, tmp_path, method):
    src = workspace / "d"
    args = ["attack", "--model", str(workspace / "m"), "--input", str(src / "degraded" / "0000.png"),
            "--target", str(src / "clean" / "0000.png"), "--out", str(tmp_path), "--method", method]
    if method not in ("gaussian", "uniform"):
        args += ["--iters", "2"]
    assert cli.run(args) == 0
    assert (tmp_path / "0000.png").exists()


def test_eval_and_sweep_reproducible(workspace, tmp_path):
    base = ["--model", str(workspace / "m"), "--data", str(workspace / "d"), "--iters", "2"]
    for out in ("a", "b"):
        assert cli.run(["eval", *base, "--out", str(tmp_path / out), "--reports", "noise,hist,impercept"]) == 0
        assert cli.run(["sweep", *base[:4], "--out", str(tmp_path / out / "sw"), "--eps-list", "1,8", "--iters-list", "1,2"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    rows = (tmp_path / "a" / "sw" / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 4


def test_config_file_and_override(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"attack.method": "pixel", "attack.eps": 4, "attack.iters": 2}))
    out = tmp_path / "o"
    code = cli.run(["eval", "--config", str(cfg), "--eps", "2", "--model", str(workspace / "m"), "--data", str(workspace / "d"), "--out", str(out)])
    assert code == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["config"]["attack.eps"] == 2.0 and meta["config"]["attack.iters"] == 2


def test_defaults_normalize_to_standard_settings(tmp_path):
    rc = cli.validate_config("eval", {"out": str(tmp_path), "model.checkpoint": "m", "data.dir": "d"})
    a = cli.attack_config(rc)
    assert a.epsilon == pytest.approx(8 / 255) and a.alpha == pytest.approx(2 / 255) and a.iters == 20
    assert rc["seed"] == 42


def test_missing_method_is_named(tmp_path, capsys):
    assert cli.run(["attack", "--model", "m", "--input", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert "method" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["attack", "--model", "m", "--input", "i", "--out", "o", "--method", "pixel", "--eps", "300"],
        ["attack", "--model", "m", "--input", "i", "--out", "o", "--method", "gaussian", "--alpha", "2"],
        ["attack", "--model", "m", "--input", "i", "--out", "o", "--method", "laser"],
        ["eval", "--bogus-flag"],
        ["train", "--data", "d", "--out", "o", "--lambda", "-1", "--adv"],
        ["train", "--data", "d", "--out", "o", "--lambda", "0.5"],
        ["sweep", "--model", "m", "--data", "d", "--out", "o", "--iters-list", "0"],
        [],
    ],
)
def test_validation_errors_exit_1(argv):
    assert cli.run(argv) == 1


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"attack.method": "pixel", "attack.colour": 1}))
    assert cli.run(["eval", "--config", str(cfg), "--model", "m", "--data", "d", "--out", str(tmp_path / "o")]) == 1


def test_validation_has_no_side_effects(tmp_path):
    out = tmp_path / "never"
    assert cli.run(["gen-data", "--out", str(out), "--count", "0"]) == 1
    assert not out.exists()


def test_runtime_error_exit_2(tmp_path):
    assert cli.run(["eval", "--model", str(tmp_path / "missing"), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
