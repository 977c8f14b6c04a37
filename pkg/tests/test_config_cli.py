import json
import subprocess
import sys
import time

import pytest

from fedep.cli import main
from fedep.config import ConfigError, ExperimentConfig, dump_config, parse_config

TOY = """
[experiment]
rounds = 5
clients_per_round = 2
[data]
source = toy
[inference]
backend = exact
[optimizer]
server_momentum = 0.0
"""

SMALL = """
[experiment]
rounds = 4
burn_in = 1
clients_per_round = 2
damping = 0.2
[data]
n_clients = 4
examples_per_client = 15
input_dim = 3
num_classes = 3
test_size = 30
[inference]
client_epochs = 2
alpha_cov = 5.0
[optimizer]
server_momentum = 0.0
"""


def test_defaults_and_empty_text():
    assert parse_config("") == ExperimentConfig()


def test_empty_strategy_names_field():
    with pytest.raises(ConfigError) as err:
        parse_config("[experiment]\nstrategy =\n")
    assert err.value.field == "strategy"
    assert "strategy" in str(err.value)


@pytest.mark.parametrize(
    "text, field",
    [
        ("[experiment]\ndamping = 0\n", "damping"),
        ("[experiment]\nrounds = -1\n", "rounds"),
        ("[experiment]\nrounds = many\n", "rounds"),
        ("[inference]\nbackend = magic\n", "backend"),
        ("[experiment]\nclients_per_round = 60\n", "clients_per_round"),
        ("[data]\nsource = csv\n", "train_csv"),
        ("[experiment]\nthresholds = 0.5, x\n", "thresholds"),
    ],
)
def test_invalid_values_name_field(text, field):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == field


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="foo"):
        parse_config("[experiment]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[nope]\nrounds = 1\n")
    with pytest.raises(ConfigError, match=r"\[experiment\]"):
        parse_config("[data]\nrounds = 1\n")


def test_parse_error_has_line_number():
    with pytest.raises(ConfigError) as err:
        parse_config("[experiment]\nrounds = 1\nthis line is broken\n")
    assert err.value.line == 3
    with pytest.raises(ConfigError) as err:
        parse_config("[experiment]\nrounds = 1\nrounds = 2\n")
    assert err.value.line == 3


def test_preset_file_override_precedence():
    cfg = parse_config("[experiment]\npreset = cifar100\n")
    assert (cfg.clients_per_round, cfg.burn_in, cfg.server_lr) == (20, 400, 0.5)
    cfg = parse_config("[experiment]\npreset = cifar100\nburn_in = 3\n", {"experiment.clients_per_round": "7"})
    assert (cfg.clients_per_round, cfg.burn_in) == (7, 3)
    assert parse_config("[experiment]\npreset = stackoverflow\n").server_optim == "adagrad"
    with pytest.raises(ConfigError, match="preset"):
        parse_config("[experiment]\npreset = imagenet\n")


@pytest.mark.parametrize("text", ["", TOY, SMALL, "[experiment]\npreset = emnist62\nthresholds = 0.5, 0.7\n[data]\nn_clients = 200\n"])
def test_resolved_config_is_fixed_point(text):
    cfg = parse_config(text)
    dumped = dump_config(cfg)
    assert parse_config(dumped) == cfg
    assert dump_config(parse_config(dumped)) == dumped


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_run_outputs(tmp_path):
    cfg = write(tmp_path, SMALL)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--set", f"output_dir={out}"]) == 0
    assert {"trace.jsonl", "timing.jsonl", "report.json", "config.resolved"} <= {p.name for p in out.iterdir()}
    lines = [json.loads(x) for x in (out / "trace.jsonl").read_text().splitlines()]
    assert [r["round"] for r in lines] == [1, 2, 3, 4]
    assert all(r["schema"] == 1 and "wall_ms" not in r for r in lines)
    assert parse_config((out / "config.resolved").read_text()).output_dir == str(out)
    report = json.loads((out / "report.json").read_text())
    assert 0 <= report["point_accuracy"] <= 1


def test_cli_seed_and_strategy_flags(tmp_path):
    cfg = write(tmp_path, SMALL)

    def trace(name, *extra):
        assert main(["run", "--config", cfg, "--set", f"output_dir={tmp_path / name}", *extra]) == 0
        return (tmp_path / name / "trace.jsonl").read_bytes()

    assert trace("a", "--seed", "3") == trace("b", "--seed", "3")
    assert trace("a", "--seed", "3") != trace("c", "--seed", "4")
    assert main(["run", "--config", cfg, "--strategy", "fedpa", "--set", f"output_dir={tmp_path / 'd'}"]) == 0
    assert "strategy = fedpa" in (tmp_path / "d" / "config.resolved").read_text()
    assert json.loads((tmp_path / "d" / "trace.jsonl").read_text().splitlines()[-1])["phase"] == "fedpa"


def test_cli_repeats(tmp_path):
    cfg = write(tmp_path, TOY)
    out = tmp_path / "rep"
    assert main(["run", "--config", cfg, "--set", f"output_dir={out}", "--set", "n_repeats=2"]) == 0
    assert (out / "seed_0" / "trace.jsonl").exists() and (out / "seed_1" / "report.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_repeats"] == 2 and "eval_loss" in summary["fields"]


def test_cli_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDEP_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = write(tmp_path, TOY)
    assert main(["run", "--config", cfg, "--set", "output_dir=rel"]) == 0
    assert (tmp_path / "root" / "rel" / "trace.jsonl").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["run"]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["run", "--config", write(tmp_path, "[experiment]\nfoo = 1\n")]) == 1
    assert main(["run", "--config", write(tmp_path, TOY), "--set", "nonsense"]) == 1
    assert main(["toy-study", "--draws", "0"]) == 1
    bad = write(tmp_path, "[data]\nsource = csv\ntrain_csv = /nonexistent/a.csv\ntest_csv = /nonexistent/b.csv\n")
    assert main(["run", "--config", bad, "--set", f"output_dir={tmp_path / 'x'}"]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_toy_study_cli_fast(tmp_path):
    out = tmp_path / "toy.json"
    start = time.perf_counter()
    assert main(["toy-study", "--draws", "10", "--out", str(out)]) == 0
    assert time.perf_counter() - start < 5
    res = json.loads(out.read_text())
    for name in ("fedavg", "fedpa", "fedep"):
        assert {"mean", "sd"} <= set(res["strategies"][name])


def test_gen_data(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    train = (tmp_path / "data" / "train.csv").read_text().splitlines()
    test = (tmp_path / "data" / "test.csv").read_text().splitlines()
    assert len(train) == 1 + 4 * 15 and len(test) == 1 + 30
    text = SMALL.replace(
        "n_clients = 4", f"source = csv\ntrain_csv = {tmp_path / 'data' / 'train.csv'}\ntest_csv = {tmp_path / 'data' / 'test.csv'}"
    )
    assert main(["run", "--config", write(tmp_path, text, "csv.ini"), "--set", f"output_dir={tmp_path / 'o'}"]) == 0
    assert main(["gen-data", "--config", write(tmp_path, TOY, "t.ini")]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedep", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "toy-study" in proc.stdout
