import hashlib
import json

import numpy as np
import pytest

from ssil.checkpoint import load_checkpoint
from ssil.cli import METRICS_HEADER, main
from ssil.config import OUTPUT_ENV, ConfigError, parse_config

MINIMAL = """\
dataset: {num_classes: 4, dim: 4, per_class: 20}
layout: {tasks: 2, classes_per_task: 2}
memory: 8
model: {hidden: [8, 6]}
train: {epochs: 2, lr_drop_epochs: [1], new_batch_size: 8, replay_batch_size: 2}
methods: [FT]
seeds: [0]
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_minimal_run_layout(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    run = out / "FT" / "0"
    names = {p.name for p in run.iterdir()}
    assert {"report_t1.json", "report_t2.json", "checkpoint.bin", "metrics.csv", "bias.json",
            "log.jsonl", "confusion_t1.csv", "confusion_t2.csv"} <= names
    assert not (run / "report_t3.json").exists()
    assert (run / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    model, mem, meta = load_checkpoint(run / "checkpoint.bin")
    assert model.num_tasks == 2 and len(mem) == 8 and meta == {"method": "FT", "seed": 0}
    log = [json.loads(line) for line in (run / "log.jsonl").read_text().splitlines()]
    assert len(log) == 4 and {"task", "epoch", "lr", "loss", "ce"} <= set(log[0])


def test_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, MINIMAL.replace("[FT]", "[FT, SSIL]"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_class_count_mismatch_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL.replace("tasks: 2", "tasks: 3"))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("edit", [
    ("memory: 8", "memory: 3"),
    ("methods: [FT]", "methods: [NOPE]"),
    ("seeds: [0]", "seeds: []"),
    ("epochs: 2", "epochs: 0"),
    ("memory: 8", "memory: 8\nbogus: 1"),
    ("hidden: [8, 6]", "hidden: [8, 6], head_init: odd"),
    ("dim: 4,", "dim: four,"),
])
def test_invalid_configs_exit_2(tmp_path, edit):
    cfg = write(tmp_path, MINIMAL.replace(*edit))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_unparseable_yaml(tmp_path):
    cfg = write(tmp_path, "dataset: [unclosed\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_config_file_untouched(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    before = cfg.read_bytes()
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert cfg.read_bytes() == before


def test_numeric_failure_exit_3(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL.replace("epochs: 2,", "epochs: 2, base_lr: 1.0e+300,"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "method=FT" in err and "seed=0" in err and "task=1" in err


def test_env_output_override(tmp_path, monkeypatch):
    cfg = write(tmp_path, MINIMAL)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "envout"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "envout" / "FT" / "0" / "metrics.csv").exists()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "FT" / "0").exists()


def test_default_output_relative_to_config(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = write(tmp_path, MINIMAL + "output_dir: results\n")
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "results" / "summary.csv").exists()


def test_seed_override_and_method_filter(tmp_path):
    cfg = write(tmp_path, MINIMAL.replace("[FT]", "[FT, SSIL]"))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed-override", "3,4",
                 "--method-filter", "SSIL"]) == 0
    assert sorted(p.name for p in (out / "SSIL").iterdir()) == ["3", "4"]
    assert not (out / "FT").exists()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--method-filter", "CE_GKD"]) == 2


def test_csv_dataset(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("train.csv", "test.csv"):
        y = np.repeat(np.arange(4), 10)
        x = rng.normal(size=(40, 3)) + y[:, None]
        (tmp_path / name).write_text("".join(",".join(repr(float(v)) for v in r) + f",{c}\n" for r, c in zip(x, y)))
    cfg = write(tmp_path, MINIMAL.replace("dataset: {num_classes: 4, dim: 4, per_class: 20}",
                                          "dataset: {kind: csv, train: train.csv, test: test.csv, "
                                          "num_classes: 4, dim: 3}"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    (tmp_path / "train.csv").write_text("1,2,NaN,0\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2
    assert not (tmp_path / "p").exists()


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--instances", "40"]) == 0
    out = capsys.readouterr().out
    for name in ("ce", "gkd", "tkd", "ce_ss", "ssil"):
        assert name in out


def test_gradcheck_fault_injection(capsys):
    assert main(["gradcheck", "--instances", "5", "--inject-fault", "ce_ss"]) == 1
    err = capsys.readouterr().err
    assert "ce_ss" in err and "seed" in err
    assert "FAIL ce " not in err


@pytest.fixture
def two_runs(tmp_path):
    cfg = write(tmp_path, MINIMAL.replace("[FT]", "[FT, SSIL]"))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_compare_self_zero_delta(two_runs, tmp_path):
    run = two_runs / "FT" / "0"
    before = tree(two_runs)
    assert main(["compare", str(run), str(run), "--out", str(tmp_path / "cmp")]) == 0
    rows = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
    assert all(float(r.split(",")[-1]) == 0.0 for r in rows[1:])
    assert tree(two_runs) == before


def test_compare_methods(two_runs, tmp_path):
    assert main(["compare", str(two_runs), "--out", str(tmp_path / "cmp")]) == 0
    summary = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    assert set(summary["methods"]) == {"FT", "SSIL"}
    assert all(0.0 <= r["final_old_predicted_latest"] <= 1.0 for r in summary["runs"])


def test_compare_errors(two_runs, tmp_path):
    run = two_runs / "FT" / "0"
    assert main(["compare", str(run), "--out", str(tmp_path / "c1")]) == 2
    assert main(["compare", str(run), str(tmp_path / "missing"), "--out", str(tmp_path / "c2")]) == 2
    (run / "report_t2.json").write_text("{not json")
    assert main(["compare", str(run), str(two_runs / "SSIL" / "0"), "--out", str(tmp_path / "c3")]) == 2


def test_report_rerenders_metrics(two_runs, tmp_path, capsys):
    run = two_runs / "SSIL" / "0"
    assert main(["report", str(run)]) == 0
    assert capsys.readouterr().out == (run / "metrics.csv").read_text()
    assert main(["report", str(run), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "confusion_t2.csv").read_bytes() == (run / "confusion_t2.csv").read_bytes()
    assert main(["report", str(tmp_path / "nothing")]) == 2


def test_parse_config_defaults():
    cfg = parse_config({})
    assert cfg.layout.total_tasks == 5 and cfg.capacity == 50 and cfg.layer_dims == (16, 64, 32)
    assert cfg.train.base_lr == 0.1 and cfg.train.lr_drop_epochs == (25, 35)
    with pytest.raises(ConfigError):
        parse_config([])
