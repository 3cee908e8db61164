import json
import shutil

import numpy as np
import pytest

from soh_twin.cli import main
from soh_twin.dataset import parse_battery
from soh_twin.regressor import load

TINY = [
    "--set", "synth.n_cycles=30",
    "--set", "synth.base_length=70",
    "--set", "train.max_epochs=3",
    "--set", "train.hidden=6",
    "--seed", "7",
]


def run(out, *args):
    return main([*TINY, "--out-dir", str(out), *args])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Run synth, sync, importance, train, evaluate and a short stream once."""
    out = tmp_path_factory.mktemp("cli")
    for cmd in (["synth"], ["sync"], ["importance"], ["train"], ["evaluate"], ["stream", "--limit", "2"]):
        assert run(out, *cmd) == 0, cmd
    return out


def snapshot(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


class TestStages:
    def test_synth_files(self, pipeline_dir):
        rec = parse_battery(pipeline_dir / "cycles.csv", pipeline_dir / "labels.csv")
        assert len(rec) == 30

    def test_synced_rows(self, pipeline_dir):
        lines = (pipeline_dir / "synced.csv").read_text().splitlines()
        k_ref = int(lines[-1].split(",")[1])
        assert len(lines) - 1 == 30 * k_ref

    def test_importance_outputs(self, pipeline_dir):
        meta = json.loads((pipeline_dir / "importance_meta.json").read_text())
        assert 1 <= meta["k_start"] <= meta["k_end"]
        grid = json.loads((pipeline_dir / "grid.json").read_text())
        assert grid["L"] == 200 and len(grid["ranges"]) == 2

    def test_train_outputs(self, pipeline_dir):
        params = load(pipeline_dir / "model.bin")
        assert params.hidden == 6
        head = (pipeline_dir / "predictions.csv").read_text().splitlines()[0]
        assert head == "cycle,split,capacity_ah,estimate_ah"
        metrics = json.loads((pipeline_dir / "metrics.json").read_text())
        assert {"rmse_percent", "r_squared", "K_ID"} <= set(metrics)
        hist = (pipeline_dir / "history.csv").read_text().splitlines()
        assert hist[0] == "epoch,train_rmse,val_rmse" and len(hist) >= 2

    def test_evaluate_matches_train(self, pipeline_dir):
        a = json.loads((pipeline_dir / "metrics.json").read_text())
        b = json.loads((pipeline_dir / "evaluation.json").read_text())
        assert a["rmse_percent"] == b["rmse_percent"] and a["r_squared"] == b["r_squared"]

    def test_stream_outputs(self, pipeline_dir):
        files = sorted((pipeline_dir / "stream").glob("cycle_*.csv"))
        assert len(files) == 2
        err = (pipeline_dir / "stream" / "error_by_step.csv").read_text().splitlines()
        assert err[0] == "k,mean_abs_error_ah,n_cycles,in_important_interval"
        assert err[1].startswith("1,")


def test_rerun_is_byte_identical(pipeline_dir, tmp_path):
    out = tmp_path / "again"
    for cmd in (["synth"], ["sync"], ["importance"], ["train"], ["evaluate"], ["stream", "--limit", "2"]):
        assert run(out, *cmd) == 0
    assert snapshot(out) == snapshot(pipeline_dir)


def test_stream_selection(pipeline_dir, tmp_path):
    out = tmp_path / "sel"
    shutil.copytree(pipeline_dir, out)
    shutil.rmtree(out / "stream")
    assert run(out, "stream", "--every", "10", "--from", "3") == 0
    names = sorted(p.name for p in (out / "stream").glob("cycle_*.csv"))
    assert names == ["cycle_13.csv", "cycle_23.csv", "cycle_3.csv"]
    assert run(out, "stream", "--cycle", "999") == 2


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny battery\nsynth.n_cycles = 12\nsynth.base_length = 55  # samples\n")
    assert main(["--config", str(cfg), "--out-dir", str(tmp_path / "o"), "synth"]) == 0
    assert len(parse_battery(tmp_path / "o" / "cycles.csv", tmp_path / "o" / "labels.csv")) == 12


class TestErrors:
    def error(self, capsys):
        return capsys.readouterr().err.strip()

    def test_unknown_key(self, tmp_path, capsys):
        assert main(["--out-dir", str(tmp_path), "--set", "train.speed=3", "synth"]) == 2
        assert self.error(capsys).startswith("error: ")

    def test_missing_labels(self, tmp_path, capsys):
        (tmp_path / "c.csv").write_text("cycle,t,voltage,temperature\n1,0,3.6,30\n1,1,3.5,30\n")
        code = main(["--set", f"cycles={tmp_path / 'c.csv'}", "--set", f"labels={tmp_path / 'l.csv'}", "ingest"])
        assert code == 2
        assert "labels-not-found" in self.error(capsys)

    def test_sync_before_synth(self, tmp_path, capsys):
        assert run(tmp_path, "importance") == 2

    def test_stream_before_train(self, pipeline_dir, tmp_path, capsys):
        out = tmp_path / "nomodel"
        shutil.copytree(pipeline_dir, out)
        (out / "model.bin").unlink()
        assert run(out, "stream") == 4

    def test_corrupt_model(self, pipeline_dir, tmp_path, capsys):
        out = tmp_path / "corrupt"
        shutil.copytree(pipeline_dir, out)
        raw = bytearray((out / "model.bin").read_bytes())
        raw[-5] ^= 0x10
        (out / "model.bin").write_bytes(bytes(raw))
        assert run(out, "evaluate") == 4
        assert self.error(capsys).startswith("error: ")

    def test_grid_mismatch(self, pipeline_dir, tmp_path, capsys):
        out = tmp_path / "grid"
        shutil.copytree(pipeline_dir, out)
        grid = json.loads((out / "grid.json").read_text())
        grid["ranges"][0][1] += 0.5
        (out / "grid.json").write_text(json.dumps(grid))
        assert run(out, "stream", "--limit", "1") == 4
        assert "grid-mismatch" in self.error(capsys)

    def test_empty_test_split(self, pipeline_dir, tmp_path, capsys):
        out = tmp_path / "split"
        shutil.copytree(pipeline_dir, out)
        code = main([*TINY, "--out-dir", str(out), "--set", "split.degradation_start_cycle=30", "train"])
        assert code == 2
        assert "split" in self.error(capsys)


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for name in ("ingest", "synth", "sync", "importance", "train", "evaluate", "stream"):
        assert name in text


def test_predictions_cover_every_cycle(pipeline_dir):
    rows = [r.split(",") for r in (pipeline_dir / "predictions.csv").read_text().splitlines()[1:]]
    cycles = sorted(int(r[0]) for r in rows)
    assert cycles == list(range(1, 31))
    assert all(np.isfinite(float(r[3])) for r in rows)
