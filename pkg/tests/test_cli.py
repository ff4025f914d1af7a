"""Command-line interface: subcommands, config files, exit codes."""

import json
import os

import numpy as np
import pytest

from templateconv.cli import main


def run(args):
    return main(args)


@pytest.fixture(scope="module")
def trained_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = run(["--out", str(out), "--seed", "0", "train", "--synthetic",
                "--epochs", "2", "--samples", "96", "--classes", "4"])
    assert code == 0
    return str(out / "checkpoint")


class TestEquivCheck:
    def test_passes(self, tmp_path, capsys):
        code = run(["--out", str(tmp_path), "equiv-check", "--configs", "5"])
        out = capsys.readouterr().out
        assert code == 0
        assert "max deviation" in out

    def test_injected_fault_fails_with_repro_line(self, tmp_path, capsys):
        code = run(["--out", str(tmp_path), "--seed", "1", "equiv-check",
                    "--configs", "3", "--inject-fault"])
        out = capsys.readouterr().out
        assert code == 1
        assert "reproduce with" in out


class TestTrain:
    def test_writes_metrics_and_checkpoint(self, tmp_path):
        code = run(["--out", str(tmp_path), "train", "--synthetic",
                    "--epochs", "1", "--samples", "64"])
        assert code == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,train_loss")
        assert len(lines) == 2
        assert (tmp_path / "checkpoint" / "manifest.json").exists()
        assert (tmp_path / "resolved_config.json").exists()

    def test_pruned_training_records_m_trace(self, tmp_path):
        code = run(["--out", str(tmp_path), "train", "--synthetic",
                    "--epochs", "3", "--samples", "64", "--rate", "0.5",
                    "--ramp-epochs", "2", "--min-templates", "2"])
        assert code == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()[1:]
        traces = [line.split(",")[-1] for line in lines]
        assert traces[0] == "8;16;16"
        assert traces[-1] == "4;8;8"


class TestPrune:
    def test_writes_plan_and_converted_network(self, tmp_path,
                                               trained_checkpoint, capsys):
        code = run(["--out", str(tmp_path), "prune", "--checkpoint",
                    trained_checkpoint, "--rate", "0.5",
                    "--min-templates", "2"])
        out = capsys.readouterr().out
        assert code == 0
        assert (tmp_path / "plan.txt").exists()
        assert (tmp_path / "converted" / "manifest.json").exists()
        assert "flops ratio" in out


class TestBench:
    def test_writes_csv(self, tmp_path):
        code = run(["--out", str(tmp_path), "bench", "--rates", "0.5",
                    "--reps", "2", "--channels", "8", "--filters", "8",
                    "--side", "8"])
        assert code == 0
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0].startswith("rate,impl,median_us")
        assert len(lines) == 3


class TestCostReport:
    def test_report_on_checkpoint(self, tmp_path, trained_checkpoint, capsys):
        code = run(["--out", str(tmp_path), "cost-report", "--checkpoint",
                    trained_checkpoint])
        out = capsys.readouterr().out
        assert code == 0
        assert (tmp_path / "cost.csv").exists()
        assert "total" in out

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        code = run(["--out", str(tmp_path), "cost-report", "--checkpoint",
                    str(tmp_path / "nope")])
        assert code == 3


class TestVizFilters:
    def test_writes_figures(self, tmp_path, trained_checkpoint):
        code = run(["--out", str(tmp_path), "viz-filters", "--checkpoint",
                    trained_checkpoint, "--rate", "0.5",
                    "--min-templates", "1"])
        assert code == 0
        names = os.listdir(tmp_path)
        for variant in ("original", "reconstructed", "pruned"):
            assert any(n.endswith(f"_{variant}.pgm") for n in names)
            assert any(n.endswith(f"_{variant}.csv") for n in names)


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"samples": 48, "epochs": 1}))
        out = tmp_path / "out"
        code = run(["--config", str(cfg), "--out", str(out), "train",
                    "--synthetic"])
        assert code == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["samples"] == 48
        assert resolved["epochs"] == 1

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus_key": 1}))
        with pytest.raises(SystemExit) as e:
            run(["--config", str(cfg), "--out", str(tmp_path), "train",
                 "--synthetic"])
        assert e.value.code == 2

    def test_invalid_value_is_usage_error(self, tmp_path):
        code = run(["--out", str(tmp_path), "train", "--synthetic",
                    "--rate", "1.5"])
        assert code == 2
