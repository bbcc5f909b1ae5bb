"""Benchmark harness and command-line interface."""
import csv
from dataclasses import replace

import numpy as np
import pytest

from voxelprune.bench import (EXPERIMENT_KINDS, ExperimentSpec, ResultRow,
                              ResultTable, run_experiment)
from voxelprune.cli import main
from voxelprune.config import ConfigError, load_config, write_config
from voxelprune.scenesim import SceneParams
from voxelprune.trainer import TrainConfig

TINY_SCENE = SceneParams(extent=(-8.0, 8.0, -8.0, 8.0, 0.0, 3.0), n_boxes=3,
                         beams=10, azimuths=60)


def _tiny_cfg(**kw):
    base = dict(sweeps=3, n_scenes=4, epochs=1, widths=(4, 4, 4, 4),
                scene=TINY_SCENE, voxel_size=0.5, grid_dims=(32, 32, 8))
    base.update(kw)
    return TrainConfig(**base)


def _write_tiny_config(path, extra_train="", bench=""):
    path.write_text(
        "[train]\n"
        "sweeps = 3\nn_scenes = 4\nepochs = 1\nwidths = 4,4,4,4\n"
        "voxel_size = 0.5\ngrid_dims = 32,32,8\n" + extra_train +
        "[scene]\n"
        "extent = -8,8,-8,8,0,3\nn_boxes = 3\nbeams = 10\nazimuths = 60\n"
        + bench)


class TestResultTable:
    def test_csv_round_trip_is_exact(self, tmp_path):
        table = ResultTable(rows=[
            ResultRow(label="gsp", miou=0.123456789012345, gflops=1 / 3,
                      latency_ms=7.25, aux_ops=42.0, breakdown="stem=0.1"),
            ResultRow(label="bad", miou=float("nan"), gflops=float("nan"),
                      latency_ms=float("nan"), failed=True),
        ])
        path = tmp_path / "results.csv"
        table.to_csv(path)
        back = ResultTable.from_csv(path)
        assert back.rows[0].miou == table.rows[0].miou
        assert back.rows[0].gflops == table.rows[0].gflops
        assert back.rows[0].breakdown == "stem=0.1"
        assert back.rows[1].failed and np.isnan(back.rows[1].miou)
        assert back.any_failed

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ExperimentSpec(kind="ablate-everything", base=_tiny_cfg())

    def test_kind_list_is_stable(self):
        assert set(EXPERIMENT_KINDS) == {
            "method-compare", "t-sweep", "voxelization-compare",
            "latency-breakdown", "sampling-compare"}


class TestExperiments:
    def test_voxelization_compare(self, tmp_path):
        spec = ExperimentSpec(kind="voxelization-compare", base=_tiny_cfg(),
                              out_dir=str(tmp_path))
        table = run_experiment(spec)
        labels = [r.label for r in table.rows]
        assert labels == ["hard", "dynamic"]
        assert all(r.latency_ms > 0 for r in table.rows)
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "plotdata.csv").exists()

    def test_t_sweep_writes_plot_series(self, tmp_path):
        spec = ExperimentSpec(kind="t-sweep", base=_tiny_cfg(prune_kind="gsp"),
                              sweep_values=(1.0, 0.5), out_dir=str(tmp_path))
        table = run_experiment(spec)
        assert [r.label for r in table.rows] == ["t=1.0", "t=0.5"]
        with open(tmp_path / "plotdata.csv") as f:
            rows = list(csv.DictReader(f))
        series = {r["series"] for r in rows}
        assert series == {"miou", "gflops", "latency_ms"}
        xs = sorted({float(r["x"]) for r in rows})
        assert xs == [0.5, 1.0]

    def test_failed_subrun_marks_row(self, tmp_path, monkeypatch):
        from voxelprune import bench

        def boom(label, cfg, dataset=None):
            raise RuntimeError("injected")

        monkeypatch.setattr(bench, "_eval_row", boom)
        spec = ExperimentSpec(kind="latency-breakdown", base=_tiny_cfg())
        table = run_experiment(spec)
        assert len(table.rows) == 2
        assert table.any_failed


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = _tiny_cfg(prune_kind="gsp", targets=(0.5, 0.5, 0.5, 1.0),
                        classifier_lr_scale=50.0)
        path = tmp_path / "run.cfg"
        write_config(path, cfg, bench_opts={"kind": "t-sweep",
                                            "t_values": (1.0, 0.5)})
        loaded, bench_opts = load_config(path)
        assert loaded.prune_kind == "gsp"
        assert loaded.targets == (0.5, 0.5, 0.5, 1.0)
        assert loaded.classifier_lr_scale == 50.0
        assert loaded.grid_dims == (32, 32, 8)
        assert bench_opts["kind"] == "t-sweep"
        assert bench_opts["t_values"] == (1.0, 0.5)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[optimizer]\nlr = 0.1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_bad_value_reported_with_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nepochs = soon\n")
        with pytest.raises(ConfigError, match="epochs"):
            load_config(path)


class TestCli:
    def test_generate_then_inspect(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        _write_tiny_config(cfg_path)
        out = tmp_path / "data"
        assert main(["generate", "--scenes", "3", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
        clouds = sorted(out.glob("scene_*.cloud"))
        labels = sorted(out.glob("scene_*.labels.csv"))
        assert len(clouds) == 3 and len(labels) == 3
        assert (out / "dataset.cfg").exists()
        assert main(["inspect", "--cloud", str(clouds[0])]) == 0
        text = capsys.readouterr().out
        assert "points:" in text and "delta_t range:" in text

    def test_train_eval_inspect_flow(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        _write_tiny_config(cfg_path)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
        assert (out / "epochs.csv").exists()
        assert (out / "rates_per_layer.csv").exists()
        ckpt = out / "checkpoint.vp"
        assert ckpt.exists()

        eval_out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(ckpt), "--config",
                     str(cfg_path), "--out", str(eval_out)]) == 0
        with open(eval_out / "eval.csv") as f:
            rows = list(csv.DictReader(f))
        assert float(rows[0]["mean_flops"]) > 0

        assert main(["inspect", "--checkpoint", str(ckpt)]) == 0
        text = capsys.readouterr().out
        assert "stem_w" in text and "head_w" in text

    def test_eval_deterministic(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        _write_tiny_config(cfg_path)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg_path), "--out", str(out)])
        mious = []
        for d in ("e1", "e2"):
            eval_out = tmp_path / d
            assert main(["eval", "--checkpoint", str(out / "checkpoint.vp"),
                         "--config", str(cfg_path), "--out", str(eval_out)]) == 0
            with open(eval_out / "eval.csv") as f:
                mious.append(list(csv.DictReader(f))[0]["val_miou"])
        assert mious[0] == mious[1]

    def test_bench_command(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        _write_tiny_config(cfg_path,
                           bench="[bench]\nkind = voxelization-compare\n")
        out = tmp_path / "bench"
        assert main(["bench", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
        assert (out / "results.csv").exists()

    def test_bench_without_kind_is_usage_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        _write_tiny_config(cfg_path)
        assert main(["bench", "--config", str(cfg_path),
                     "--out", str(tmp_path / "b")]) == 2

    def test_bad_config_is_usage_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("[train]\nlearning_rate = 0.1\n")
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_generate_zero_scenes_is_usage_error(self, tmp_path, capsys):
        assert main(["generate", "--scenes", "0",
                     "--out", str(tmp_path / "d")]) == 2

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        _write_tiny_config(cfg_path)
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.vp"),
                     "--config", str(cfg_path),
                     "--out", str(tmp_path / "o")]) == 1

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
