import csv
import hashlib
import json
import math
import os

import pytest
import yaml

from octopus import cli

TINY = ["dataset.shape=[1,8,8]", "dataset.samples_per_cell=10", "model.K=8", "model.M=4", "model.hidden=[3,4]",
        "training.steps=10", "training.batch_size=20", "downstream.steps=20", "downstream.hidden=[8]",
        "privacy.steps=20", "privacy.hidden=[8]"]


def run(command, out, *sets, config=None):
    argv = [command, "--output-dir", str(out)]
    if config:
        argv += ["--config", str(config)]
    for s in list(TINY) + list(sets):
        argv += ["--set", s]
    return cli.main(argv)


def digest(folder):
    return {name: hashlib.sha256(open(os.path.join(folder, name), "rb").read()).hexdigest()
            for name in sorted(os.listdir(folder))}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config

def test_default_hyperparameters():
    cfg = cli.resolve_config()
    assert cfg["training"]["lr"] == 0.001 and cfg["training"]["batch_size"] == 100
    assert cfg["model"]["lam"] == 0.01 and cfg["model"]["K"] == 10 and cfg["model"]["M"] == 64


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"model": {"K": 32}, "seed": 4}))
    cfg = cli.resolve_config(path, ["model.K=16", "dataset.shape=[1,4,4]"])
    assert cfg["model"]["K"] == 16 and cfg["seed"] == 4 and cfg["dataset"]["shape"] == [1, 4, 4]


@pytest.mark.parametrize("override,key", [("model.bogus=1", "model.bogus"), ("extra=2", "extra"),
                                          ("model.K=abc", "model.K"), ("training.lr=true", "training.lr")])
def test_bad_keys_and_types_rejected(override, key):
    with pytest.raises(cli.ConfigError, match=key.replace(".", r"\.")):
        cli.resolve_config(None, [override])


def test_missing_dataset_path_exit_2(tmp_path, capsys):
    assert cli.main(["train-global", "--output-dir", str(tmp_path / "o"), "--set", "dataset.kind=idx"]) == 2
    assert "dataset.path" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()  # nothing computed or written


def test_fine_tune_needs_model(tmp_path, capsys):
    assert run("fine-tune", tmp_path) == 2
    assert "model.path" in capsys.readouterr().err


def test_invalid_semantics_fail_fast(tmp_path):
    assert run("simulate", tmp_path, "federation.partition=random") == 2
    assert run("simulate", tmp_path, "fine_tune.mode=both") == 2
    assert run("train-global", tmp_path, "model.G=3") == 2
    assert run("eval-privacy", tmp_path, "privacy.views=[raw]") == 2


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.resolve_config(None, ["output_dir=elsewhere"])["output_dir"] == str(tmp_path / "env")
    assert cli.main(["cost-report"]) == 0
    assert (tmp_path / "env" / "cost_report.csv").exists()
    assert cli.resolve_config(None, [], str(tmp_path / "flag"))["output_dir"] == str(tmp_path / "flag")


# ---------------------------------------------------------------- commands

def test_cost_report_examples(tmp_path):
    out = tmp_path / "c"
    sets = ["cost.N_C=2", "cost.N_M=10", "cost.N_E=3", "cost.N_S=1", "cost.N_D=[5,100]", "cost.eta=0.5",
            "cost.N_Z=2", "cost.pi=3", "cost.N_B=4", "cost.N_A=10"]
    assert cli.main(["cost-report", "--output-dir", str(out)] + [a for s in sets for a in ("--set", s)]) == 0
    rows = read_csv(out / "cost_report.csv")
    assert len(rows) == 2
    assert float(rows[0]["cost_fl"]) == 120
    assert float(rows[1]["cost_octopus"]) == 232
    for r in rows:
        assert float(r["rho"]) == float(r["cost_fl"]) / float(r["cost_split"])
    sets2 = ["cost.N_S=1", "cost.N_D=5", "cost.eta=0.5", "cost.N_C=2", "cost.N_M=10", "cost.N_E=2"]
    assert cli.main(["cost-report", "--output-dir", str(out)] + [a for s in sets2 for a in ("--set", s)]) == 0
    assert float(read_csv(out / "cost_report.csv")[0]["cost_split"]) == 40


def test_train_global_outputs(tmp_path):
    assert run("train-global", tmp_path) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["config"]["model"]["K"] == 8 and doc["command"] == "train-global"
    assert len(read_csv(tmp_path / "loss_curve.csv")) == 10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_global_divergence_exit_3(tmp_path, capsys):
    assert run("train-global", tmp_path, "training.lr=1e100", "training.steps=20") == 3
    assert "diverged" in capsys.readouterr().err


def test_simulate_sync_zero_and_ledger(tmp_path):
    assert run("simulate", tmp_path / "a", "federation.sync_period=0") == 0
    rows = read_csv(tmp_path / "a" / "ledger.csv")
    sync = [r for r in rows if r["phase"] == "codebook_sync"]
    assert sync and all(float(r["bytes"]) == 0 for r in sync)
    for r in rows:
        assert float(r["bytes"]) == float(r["analytic_bytes"])
    doc = json.loads((tmp_path / "a" / "ledger.json").read_text())
    assert doc["metrics"]["privacy_scan_violations"] == 0


def test_simulate_phase_failure(tmp_path, capsys):
    assert run("simulate", tmp_path, "model.K=100000") == 3
    assert "global_init" in capsys.readouterr().err


def test_eval_privacy_rows(tmp_path):
    assert run("eval-privacy", tmp_path) == 0
    rows = read_csv(tmp_path / "privacy.csv")
    assert [r["view"] for r in rows] == ["public", "private", "both", "uniform"]
    assert float(rows[-1]["entropy_bits"]) == math.log2(4)
    assert set(rows[0]) == set(cli.PRIVACY_FIELDS)


def test_fine_tune_and_downstream(tmp_path):
    assert run("train-global", tmp_path / "g") == 0
    model = str(tmp_path / "g" / "model.octm")
    assert run("fine-tune", tmp_path / "f", f"model.path={model}") == 0
    m = json.loads((tmp_path / "f" / "metrics.json").read_text())["metrics"]
    assert m["atoms_changed"] is False
    assert run("train-downstream", tmp_path / "d", f"model.path={model}") == 0
    assert (tmp_path / "d" / "classifier.octc").exists()


@pytest.mark.parametrize("command,extra", [("train-global", []), ("simulate", ["federation.sync_period=1"]),
                                           ("train-downstream", []), ("eval-privacy", []), ("cost-report", [])])
def test_rerun_byte_identical(tmp_path, command, extra):
    assert run(command, tmp_path / "one", *extra) == 0
    assert run(command, tmp_path / "two", *extra) == 0
    a, b = digest(tmp_path / "one"), digest(tmp_path / "two")
    # metrics.json embeds the output directory, everything else must match as-is
    a.pop("metrics.json"), b.pop("metrics.json")
    assert a == b
    ma = json.loads((tmp_path / "one" / "metrics.json").read_text())
    mb = json.loads((tmp_path / "two" / "metrics.json").read_text())
    ma["config"].pop("output_dir"), mb["config"].pop("output_dir")
    assert ma == mb


def test_print_config(capsys):
    assert cli.main(["cost-report", "--print-config", "--set", "seed=3"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["seed"] == 3
