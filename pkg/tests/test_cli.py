import json
import subprocess
import sys
from pathlib import Path

import pytest

from qtw import cli
from qtw.evaluation import CSV_COLUMNS, read_report

GEN = ["--train", "12", "--test", "4", "--T", "80"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out.split(), out.err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(d), *GEN]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    p = tmp_path_factory.mktemp("ck") / "k.qckp"
    assert cli.main(["train", "--data", str(data), "--out", str(p), "--hidden", "4", "--epochs", "2",
                     "--batch", "4"]) == 0
    return p


def test_config_precedence(tmp_path, monkeypatch):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nhidden = 7\nepochs = 3\n")
    cp = cli.load_config(ini, env={})
    assert cli._get(cp, "train", "hidden", int) == 7
    cp = cli.load_config(ini, env={"QTW_TRAIN_HIDDEN": "9", "QTW_SEED": "4"})
    assert cli._get(cp, "train", "hidden", int) == 9 and cli._get(cp, "train", "seed", int) == 4
    assert cli._get(cp, "train", "hidden", int, 11) == 11 and cp["train"]["hidden"] == "11"
    assert cli._get(cp, "train", "epochs", int) == 3


def test_config_errors(tmp_path):
    bad = tmp_path / "b.ini"
    bad.write_text("[nope]\nx = 1\n")
    with pytest.raises(cli.CliError) as e:
        cli.load_config(bad, env={})
    assert e.value.code == cli.EXIT_CONFIG
    bad.write_text("[train]\nhiden = 1\n")
    with pytest.raises(cli.CliError):
        cli.load_config(bad, env={})
    with pytest.raises(cli.CliError) as e:
        cli.load_config(tmp_path / "missing.ini", env={})
    assert e.value.code == cli.EXIT_IO


def test_gen_outputs_and_stdout(data, capsys, tmp_path):
    code, paths, _ = run(capsys, "gen", "--out", tmp_path / "g", *GEN)
    assert code == 0
    assert {Path(p).name for p in paths} >= {"train.qtrj", "test.qtrj", "stats.json", "manifest.json",
                                              "run_manifest.json"}
    assert all(Path(p).exists() for p in paths)
    man = json.loads((tmp_path / "g" / "run_manifest.json").read_text())
    assert man["subcommand"] == "gen" and man["config"]["data"]["T"] == "80"


def test_gen_independent_of_workers(data, tmp_path, capsys):
    code, _, _ = run(capsys, "gen", "--out", tmp_path / "w", *GEN, "--workers", "3")
    assert code == 0
    for name in ("train.qtrj", "test.qtrj", "stats.json", "manifest.json"):
        assert (tmp_path / "w" / name).read_bytes() == (data / name).read_bytes()


def test_bad_env_value_exit_2(data, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("QTW_TRAIN_HIDDEN", "many")
    code, out, err = run(capsys, "train", "--data", data, "--out", tmp_path / "x.qckp")
    assert code == 2 and out == [] and "hidden" in err


def test_missing_input_exit_3(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", tmp_path / "none", "--out", tmp_path / "x.qckp")
    assert code == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_4(data, tmp_path, capsys):
    out = tmp_path / "d.qckp"
    code, _, err = run(capsys, "train", "--data", data, "--out", out, "--hidden", "4", "--epochs", "3",
                       "--lr", "1e300", "--head", "direct")
    assert code == 4 and "diverged" in err


def test_eval_on_training_set_exit_5(data, ckpt, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", data / "train.qtrj", "--out", tmp_path / "e.json")
    assert code == 5


def test_tampered_dataset_exit_5(data, ckpt, tmp_path, capsys):
    import shutil

    d = tmp_path / "copy"
    shutil.copytree(data, d)
    raw = bytearray((d / "test.qtrj").read_bytes())
    raw[-1] ^= 1
    (d / "test.qtrj").write_bytes(bytes(raw))
    code, _, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", d, "--out", tmp_path / "e.json")
    assert code == 5


def test_eval_baseline_report(data, ckpt, tmp_path, capsys):
    code, paths, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", data, "--out", tmp_path / "k.json")
    assert code == 0 and Path(paths[0]).name == "k.json" and paths[1].endswith(".run.json")
    rep = read_report(tmp_path / "k.json")
    assert rep.head == "kraus" and rep.physical
    code, _, _ = run(capsys, "baseline", "--data", data, "--mode", "known", "--out", tmp_path / "s.json")
    assert code == 0
    code, paths, _ = run(capsys, "report", "--inputs", tmp_path / "k.json", tmp_path / "s.json",
                         "--out", tmp_path / "table.csv")
    assert code == 0
    assert (tmp_path / "table.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    delta = (tmp_path / "table.delta.csv").read_text().splitlines()
    assert delta[0].startswith("kraus_model") and len(delta) == 2


def test_check_command(capsys):
    code, out, err = run(capsys, "check", "--seed", "1")
    assert code == 0 and out == []
    assert "gradients" in err


def test_unknown_subcommand_is_config_error(capsys):
    assert cli.main(["frobnicate"]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "qtw", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("qtw ")
