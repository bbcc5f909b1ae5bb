"""Training loop: config validation, dataset determinism, loss plumbing,
activation-rate dynamics, persistence."""
import csv
from dataclasses import replace

import numpy as np
import pytest

from voxelprune.autodiff import SGD, Var
from voxelprune.scenesim import SceneParams
from voxelprune.trainer import (EpochReport, SegModel, Sample, TrainConfig,
                                TrainingDiverged, build_dataset, evaluate,
                                load_model, miou, save_model, seg_loss, train,
                                train_step, write_epoch_csv)

TINY_SCENE = SceneParams(extent=(-8.0, 8.0, -8.0, 8.0, 0.0, 3.0), n_boxes=3,
                         beams=10, azimuths=60)


def _tiny(**kw):
    base = dict(sweeps=3, n_scenes=5, epochs=2, widths=(4, 4, 4, 4),
                scene=TINY_SCENE, voxel_size=0.5, grid_dims=(32, 32, 8),
                lr=0.05)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_bad_prune_kind(self):
        with pytest.raises(ValueError):
            TrainConfig(prune_kind="dropout")

    def test_bad_sampling(self):
        with pytest.raises(ValueError):
            TrainConfig(sampling="random")

    def test_bad_target(self):
        with pytest.raises(ValueError):
            TrainConfig(targets=(0.5, 0.0, 0.5, 1.0))

    def test_negative_reg_weight(self):
        with pytest.raises(ValueError):
            TrainConfig(reg_weight=-1.0)

    def test_target_one_stage_gets_no_classifier(self):
        cfg = _tiny(prune_kind="gsp", targets=(0.5, 0.5, 0.5, 1.0))
        enc_cfg = cfg.encoder_config()
        assert enc_cfg.prune_kinds == ("gsp", "gsp", "gsp", "none")

    def test_bev_grid_requires_divisible_dims(self):
        with pytest.raises(ValueError):
            _tiny(grid_dims=(30, 32, 8)).bev_grid()

    def test_grid_is_ego_centric(self):
        cfg = _tiny()
        grid = cfg.grid()
        # symmetric about the sensor in x/y
        assert grid.origin[0] == -grid.grid_dims[0] * cfg.voxel_size / 2.0
        assert grid.origin[1] == -grid.grid_dims[1] * cfg.voxel_size / 2.0


class TestSegLossAndMiou:
    def test_grid_mismatch_raises(self):
        with pytest.raises(ValueError):
            seg_loss(None, Var(np.zeros((4, 2))), np.zeros((3,), dtype=int))

    def test_empty_labels_raise(self):
        with pytest.raises(ValueError):
            seg_loss(None, Var(np.zeros((0, 2))), np.zeros((0,), dtype=int))

    def test_miou_perfect(self):
        labels = np.array([[0, 1], [1, 0]])
        assert miou(labels, labels) == 1.0

    def test_miou_oracle(self):
        pred = np.array([1, 1, 0, 0])
        labels = np.array([1, 0, 0, 0])
        # class 0: tp=2 fp=1 fn=0 -> 2/3; class 1: tp=1 fp=1 fn=0 -> 1/2
        assert abs(miou(pred, labels) - (2 / 3 + 1 / 2) / 2) < 1e-12

    def test_miou_absent_class_counts_as_one(self):
        assert miou(np.zeros(4, dtype=int), np.zeros(4, dtype=int)) == 1.0


class TestDataset:
    def test_deterministic(self):
        cfg = _tiny()
        a_train, a_val = build_dataset(cfg)
        b_train, b_val = build_dataset(cfg)
        for a, b in zip(a_train + a_val, b_train + b_val):
            assert np.array_equal(a.tensor.coords, b.tensor.coords)
            assert np.array_equal(a.tensor.feature_array, b.tensor.feature_array)
            assert np.array_equal(a.labels, b.labels)

    def test_split_sizes(self):
        train_set, val_set = build_dataset(_tiny(n_scenes=10, val_fraction=0.2))
        assert len(train_set) == 8 and len(val_set) == 2

    def test_labels_have_objects(self):
        train_set, _ = build_dataset(_tiny())
        assert any(s.labels.sum() > 0 for s in train_set)

    def test_hard_voxelizer_path(self):
        train_set, _ = build_dataset(_tiny(voxelizer="hard",
                                           max_points_per_voxel=4))
        assert train_set[0].tensor.num_active > 0


class TestTraining:
    def test_baseline_loss_decreases(self):
        cfg = _tiny(epochs=4)
        reports, model = train(cfg)
        assert len(reports) == 4
        assert reports[-1].mean_task_loss < reports[0].mean_task_loss
        assert all(np.isfinite(r.mean_task_loss) for r in reports)

    def test_gsp_rates_near_half_without_reg(self):
        # lambda = 0: nothing pulls the mean activation away from the
        # zero-init 0.5, so training rates stay in a loose band around it
        cfg = _tiny(prune_kind="gsp", reg_weight=0.0, epochs=2,
                    classifier_lr_scale=1.0)
        reports, _ = train(cfg)
        for r in reports[-1].activation_rates[:3]:
            assert 0.3 < r < 0.7

    def test_reg_pulls_rates_toward_target(self):
        # identical setup, two targets: the lower target must yield the
        # lower final training rate in every pruned layer
        low_cfg = _tiny(prune_kind="gsp", targets=(0.3, 0.3, 0.3, 1.0), epochs=3)
        high_cfg = replace(low_cfg, targets=(0.7, 0.7, 0.7, 1.0))
        low, _ = train(low_cfg)
        high, _ = train(high_cfg)
        for lo, hi in zip(low[-1].activation_rates[:3],
                          high[-1].activation_rates[:3]):
            assert lo < hi

    def test_divergence_reports_layer(self):
        cfg = _tiny()
        ds = build_dataset(cfg)
        model = SegModel(cfg)
        model.head_w.value[:] = np.nan
        opt = SGD(model.params(), lr=cfg.lr)
        with pytest.raises(TrainingDiverged, match="head"):
            train_step(model, ds[0][0], opt, np.random.default_rng(0))

    def test_train_deterministic_for_fixed_config(self):
        cfg = _tiny(epochs=2, prune_kind="gsp")
        ds = build_dataset(cfg)
        a_reports, a_model = train(cfg, dataset=ds)
        b_reports, b_model = train(cfg, dataset=ds)
        for a, b in zip(a_reports, b_reports):
            # everything except wall-clock latency must match bitwise
            assert (a.mean_task_loss, a.mean_reg_loss, a.activation_rates,
                    a.val_miou, a.mean_flops) == (
                b.mean_task_loss, b.mean_reg_loss, b.activation_rates,
                b.val_miou, b.mean_flops)
        for k, v in a_model.param_dict().items():
            assert np.array_equal(v.value, b_model.param_dict()[k].value)


class TestEvaluate:
    def test_deterministic_and_reports_flops(self):
        cfg = _tiny()
        ds = build_dataset(cfg)
        model = SegModel(cfg)
        a = evaluate(model, ds[1], warmup=0)
        b = evaluate(model, ds[1], warmup=0)
        assert a.val_miou == b.val_miou
        assert a.mean_flops == b.mean_flops > 0

    def test_empty_dataset(self):
        model = SegModel(_tiny())
        rep = evaluate(model, [], warmup=0)
        assert np.isnan(rep.val_miou) and rep.mean_flops == 0.0


class TestPersistence:
    def test_model_round_trip(self, tmp_path):
        cfg = _tiny(prune_kind="gsp", epochs=1)
        ds = build_dataset(cfg)
        _, model = train(cfg, dataset=ds)
        path = tmp_path / "model.vp"
        save_model(path, model)
        loaded = load_model(path, cfg)
        a = evaluate(model, ds[1], warmup=0)
        b = evaluate(loaded, ds[1], warmup=0)
        assert a.val_miou == b.val_miou and a.mean_flops == b.mean_flops

    def test_epoch_csv_round_trip(self, tmp_path):
        reports = [EpochReport(epoch=0, mean_task_loss=0.5, mean_reg_loss=0.01,
                               activation_rates=(0.4, 0.5, 0.6, 1.0),
                               val_miou=0.7, mean_flops=1e8,
                               mean_latency_ms=3.25)]
        path = tmp_path / "epochs.csv"
        write_epoch_csv(path, reports, n_layers=4)
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1
        row = rows[0]
        assert float(row["mean_task_loss"]) == 0.5
        assert float(row["rate_layer3"]) == 0.6
        assert float(row["val_miou"]) == 0.7
