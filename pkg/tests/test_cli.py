import csv
import hashlib
import json
import subprocess
import sys
import time

import pytest

from itemlab.cli import REPORT_COLUMNS, main

SMOKE = """schema_version = 1
data.class_count = 4
data.sizes = 250,175,110,65
data.dim = 8
data.test_per_class = 50
train.epochs = 5
train.warmup_epochs = 2
"""


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def smoke(tmp_path):
    path = tmp_path / "smoke.txt"
    path.write_text(SMOKE)
    return path


class TestGenData:
    def test_rows_and_rerun(self, tmp_path, smoke):
        assert main(["gen-data", "--config", str(smoke), "--out", str(tmp_path / "a")]) == 0
        assert main(["gen-data", "--config", str(smoke), "--out", str(tmp_path / "b")]) == 0
        lines = (tmp_path / "a" / "train.csv").read_text().splitlines()
        assert len(lines) - 1 == 600
        assert digest(tmp_path / "a" / "train.csv") == digest(tmp_path / "b" / "train.csv")

    def test_bad_spec(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("schema_version = 1\ndata.class_count = 3\ndata.sizes = 5,5\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "data.sizes" in capsys.readouterr().err


class TestInjectNoise:
    def test_rate_and_truth_preserved(self, tmp_path, smoke):
        main(["gen-data", "--config", str(smoke), "--out", str(tmp_path / "d")])
        assert main(["inject-noise", str(tmp_path / "d" / "train.csv"), "--config", str(smoke), "--out", str(tmp_path / "n")]) == 0
        stats = json.loads((tmp_path / "n" / "noise.json").read_text())
        assert stats["rows"] == 600
        assert abs(stats["realized_rate"] - 0.4) < 0.07

    def test_missing_input(self, tmp_path, smoke, capsys):
        assert main(["inject-noise", str(tmp_path / "none.csv"), "--config", str(smoke), "--out", str(tmp_path)]) == 1
        assert "none.csv" in capsys.readouterr().err


class TestTrain:
    def test_outputs_repeat_and_time(self, tmp_path, smoke):
        t0 = time.perf_counter()
        assert main(["train", "--config", str(smoke), "--out", str(tmp_path / "r1")]) == 0
        assert time.perf_counter() - t0 < 10
        assert main(["train", "--config", str(smoke), "--out", str(tmp_path / "r2")]) == 0
        for name in ("metrics.csv", "summary.json", "checkpoint.bin", "config.txt"):
            assert digest(tmp_path / "r1" / name) == digest(tmp_path / "r2" / name)
        summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
        for key in (
            "final_test_accuracy",
            "best_test_accuracy",
            "final_macro_selection_f",
            "final_imbalance_ratio",
            "final_class_accuracy",
            "final_class_fscore",
        ):
            assert key in summary

    def test_seed_override_changes_output(self, tmp_path, smoke):
        main(["train", "--config", str(smoke), "--out", str(tmp_path / "a")])
        main(["train", "--config", str(smoke), "--out", str(tmp_path / "b"), "--seed", "99"])
        assert digest(tmp_path / "a" / "metrics.csv") != digest(tmp_path / "b" / "metrics.csv")
        assert json.loads((tmp_path / "b" / "summary.json").read_text())["seed"] == 99

    def test_unknown_criterion(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("schema_version = 1\ntrain.criterion = median\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "train.criterion" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_exit_code(self, tmp_path, smoke, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text(SMOKE + "optim.lr = 1e6\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "non-finite" in capsys.readouterr().err

    def test_bad_log_level(self, tmp_path, smoke, monkeypatch):
        monkeypatch.setenv("ITEM_LOG_LEVEL", "chatty")
        assert main(["train", "--config", str(smoke), "--out", str(tmp_path / "o")]) == 1

    def test_usage_error_is_config_error(self):
        with pytest.raises(SystemExit) as err:
            main(["train"])
        assert err.value.code == 1

    def test_console_entry_point(self, tmp_path, smoke):
        proc = subprocess.run(
            [sys.executable, "-m", "itemlab.cli", "train", "--config", str(smoke), "--out", str(tmp_path / "o")],
            capture_output=True,
            text=True,
            env={"ITEM_LOG_LEVEL": "error", "PATH": "/usr/bin:/bin"},
        )
        assert proc.returncode == 0, proc.stderr
        assert proc.stderr == ""


class TestAblate:
    def test_shape_and_shared_data(self, tmp_path, smoke):
        manifest = tmp_path / "m.txt"
        manifest.write_text(SMOKE + "ablate.arms = item,baseline_ce,no_mixed_sampling,no_mixup\nablate.seeds = 0,1\n")
        assert main(["ablate", str(manifest), "--out", str(tmp_path / "ab")]) == 0
        runs = [p for p in (tmp_path / "ab").iterdir() if p.is_dir()]
        assert len(runs) == 8
        with open(tmp_path / "ab" / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["arm"] for r in rows] == ["item", "baseline_ce", "no_mixed_sampling", "no_mixup"]
        assert all(r["runs"] == "2" for r in rows)
        table = json.loads((tmp_path / "ab" / "ablation.json").read_text())
        assert set(table["dataset_hashes"]) == {"0", "1"}
        assert len(table["rows"]) == 4

    def test_duplicate_seed(self, tmp_path, capsys):
        manifest = tmp_path / "m.txt"
        manifest.write_text(SMOKE + "ablate.arms = item\nablate.seeds = 3,3\n")
        assert main(["ablate", str(manifest), "--out", str(tmp_path / "ab")]) == 1
        assert "ablate.seeds" in capsys.readouterr().err


class TestReport:
    def test_merge_two_runs(self, tmp_path, smoke):
        for name in ("runA", "runB"):
            main(["train", "--config", str(smoke), "--out", str(tmp_path / name)])
        paths = [str(tmp_path / n / "metrics.csv") for n in ("runA", "runB")]
        assert main(["report", *paths, "--out", str(tmp_path / "rep")]) == 0
        with open(tmp_path / "rep" / "report.csv") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert header == REPORT_COLUMNS == ["run_id", "epoch", "metric", "class", "value"]
        assert {r[0] for r in rows} == {"runA", "runB"}
        metrics = {r[2] for r in rows}
        assert {"selected_count", "selection_fscore", "test_accuracy", "imbalance_ratio"} <= metrics

    def test_missing_file(self, tmp_path, capsys):
        missing = tmp_path / "nowhere" / "metrics.csv"
        assert main(["report", str(missing), "--out", str(tmp_path / "rep")]) == 1
        assert str(missing) in capsys.readouterr().err
