"""Schedules, optimizer, pretraining wiring, probes, and checkpoints."""

import numpy as np
import pytest

from pcon.autograd import Tensor
from pcon.config import ConfigError
from pcon.data import Dataset, gen_synthetic_images, gen_tree_dataset, TreeDatasetSpec
from pcon.models import build_model
from pcon.train import (
    SGD,
    DivergenceError,
    TrainConfig,
    cosine_lr,
    curvature_sweep,
    encode_features,
    linear_probe,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    probe_accuracy,
    robust_eval,
    save_checkpoint,
    train_probe,
)

TREE_CFG = TrainConfig(
    loss="hcl", epochs=5, batch_size=64, widths=(64, 32), proj_dim=16,
    tree_samples_per_leaf=20, view_noise=0.25, dtype="float64", seed=0,
)


def _tree_sets(cfg, n_train=20, n_test=5):
    spec = TreeDatasetSpec(
        cfg.tree_branching, cfg.tree_depth, cfg.tree_class_level,
        cfg.tree_feature_dim, cfg.tree_edge_noise, cfg.tree_obs_noise,
    )
    full = gen_tree_dataset(spec, n_train + n_test, cfg.seed)
    per = n_train + n_test
    tr = np.concatenate([np.arange(i * per, i * per + n_train) for i in range(spec.n_leaves)])
    te = np.setdiff1d(np.arange(len(full)), tr)
    return (
        Dataset(full.x[tr], full.y[tr], "vector"),
        Dataset(full.x[te], full.y[te], "vector"),
    )


class TestSchedule:
    def test_cosine_endpoints_exact(self):
        assert cosine_lr(0.5, 0, 100) == 0.5
        assert cosine_lr(0.5, 100, 100) == 0.0

    def test_cosine_midpoint(self):
        assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5, abs=1e-15)

    def test_monotone_decreasing(self):
        values = [cosine_lr(0.3, t, 40) for t in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestSGD:
    def test_momentum_update_matches_hand_calculation(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = SGD([p], momentum=0.9, weight_decay=0.0)
        p.grad = np.array([0.5, 0.5])
        opt.step(lr=0.1)
        assert np.allclose(p.data, [1.0 - 0.05, -2.0 - 0.05], atol=1e-15)
        p.grad = np.array([0.5, 0.5])
        opt.step(lr=0.1)
        # velocity = 0.9*0.5 + 0.5 = 0.95
        assert np.allclose(p.data, [0.95 - 0.095, -2.05 - 0.095], atol=1e-12)

    def test_weight_decay_pulls_toward_zero(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        opt = SGD([p], momentum=0.0, weight_decay=0.1)
        p.grad = np.zeros(1)
        opt.step(lr=1.0)
        assert p.data[0] == pytest.approx(9.0, abs=1e-12)


class TestPretrain:
    def test_zero_epochs_returns_initialization(self):
        cfg = TrainConfig(**{**TREE_CFG.to_dict(), "epochs": 0})
        cfg.widths = tuple(cfg.widths)
        train_set, _ = _tree_sets(cfg)
        model, metrics = pretrain(cfg, train_set)
        fresh = build_model("mlp", train_set.x.shape[1:], cfg.widths, cfg.proj_dim,
                            cfg.seed, cfg.stem_channels, np.float64)
        for (name, a), (_, b) in zip(sorted(model.parameters().items()),
                                     sorted(fresh.parameters().items())):
            assert np.array_equal(a.data, b.data), name
        assert metrics == []

    def test_tree_loss_decreases(self):
        train_set, _ = _tree_sets(TREE_CFG)
        _, metrics = pretrain(TREE_CFG, train_set)
        losses = [m["value"] for m in metrics if m["metric"] == "loss_mean"]
        assert losses[-1] < losses[0]

    def test_metrics_stream_is_bit_identical_across_runs(self):
        train_set, _ = _tree_sets(TREE_CFG)
        _, m1 = pretrain(TREE_CFG, train_set)
        _, m2 = pretrain(TREE_CFG, train_set)
        assert m1 == m2

    def test_supervised_loss_requires_labels(self):
        cfg = TrainConfig(**{**TREE_CFG.to_dict(), "loss": "shcl"})
        train_set, _ = _tree_sets(cfg)
        unlabeled = Dataset(train_set.x, None, "vector")
        with pytest.raises(ConfigError):
            pretrain(cfg, unlabeled)

    def test_rhcl_requires_images(self):
        cfg = TrainConfig(**{**TREE_CFG.to_dict(), "loss": "rhcl"})
        train_set, _ = _tree_sets(cfg)
        with pytest.raises(ConfigError):
            pretrain(cfg, train_set)

    def test_divergence_guard_raises(self):
        cfg = TrainConfig(**{**TREE_CFG.to_dict(), "lr": 1e18, "epochs": 3})
        train_set, _ = _tree_sets(cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError):
                pretrain(cfg, train_set)

    def test_supervised_families_run(self):
        for loss in ("supcon", "shcl", "infonce-cos"):
            cfg = TrainConfig(**{**TREE_CFG.to_dict(), "loss": loss, "epochs": 2})
            train_set, _ = _tree_sets(cfg)
            _, metrics = pretrain(cfg, train_set)
            assert len([m for m in metrics if m["metric"] == "loss_mean"]) == 2


class TestProbe:
    def test_random_encoder_probe_is_near_chance(self):
        rng = np.random.default_rng(0)
        # balanced 10-class labels with unstructured features
        feats = rng.normal(size=(500, 32)).astype(np.float64)
        labels = np.repeat(np.arange(10), 50)
        cfg = TrainConfig(probe_epochs=10, probe_lr=0.1, seed=0)
        probe = train_probe(feats[:400], labels[:400], 10, cfg)
        acc = probe_accuracy(probe, feats[400:], labels[400:])
        assert abs(acc - 0.10) <= 0.08

    def test_probe_learns_separable_tree_classes(self):
        train_set, test_set = _tree_sets(TREE_CFG)
        model, _ = pretrain(TREE_CFG, train_set)
        _, acc = linear_probe(model, train_set, test_set, TREE_CFG)
        assert acc >= 0.8

    def test_probe_training_leaves_encoder_untouched(self):
        train_set, test_set = _tree_sets(TREE_CFG)
        model, _ = pretrain(TREE_CFG, train_set)
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        linear_probe(model, train_set, test_set, TREE_CFG)
        for name, tensor in model.parameters().items():
            assert np.array_equal(before[name], tensor.data), name


class TestRobustEval:
    def test_zero_epsilon_equals_clean(self):
        cfg = TrainConfig(
            loss="hcl", epochs=2, batch_size=32, widths=(64, 32), proj_dim=16,
            data_kind="synth-image", dtype="float64", seed=0,
            attack_epsilon=0.0, attack_alpha=0.0, eval_attack_steps=3,
        )
        train_set = gen_synthetic_images(10, n_classes=4, seed=0)
        test_set = gen_synthetic_images(5, n_classes=4, seed=0, start_index=10)
        model, _ = pretrain(cfg, train_set)
        probe, _ = linear_probe(model, train_set, test_set, cfg)
        clean, robust = robust_eval(model, probe, test_set, cfg.attack_config(False), cfg)
        assert clean == robust


class TestCheckpoint:
    def test_round_trip_reproduces_forward_exactly(self, tmp_path):
        cfg = TrainConfig(**{**TREE_CFG.to_dict(), "dtype": "float32", "epochs": 2})
        train_set, _ = _tree_sets(cfg)
        model, _ = pretrain(cfg, train_set)
        path = tmp_path / "m.pcon"
        save_checkpoint(path, model, cfg, epoch=2)
        ckpt = load_checkpoint(path)
        assert ckpt.epoch == 2
        loaded, loaded_cfg = model_from_checkpoint(ckpt, train_set.x.shape[1:])
        assert loaded_cfg.loss == cfg.loss
        x = train_set.x[:8].astype(np.float32)
        a = model.forward(Tensor(x)).data
        b = loaded.forward(Tensor(x)).data
        assert np.array_equal(a, b)

    def test_save_load_fixpoint(self, tmp_path):
        cfg = TrainConfig(**TREE_CFG.to_dict())
        train_set, _ = _tree_sets(cfg)
        model, _ = pretrain(cfg, train_set)
        p1, p2 = tmp_path / "a.pcon", tmp_path / "b.pcon"
        save_checkpoint(p1, model, cfg, epoch=5)
        m1, _ = model_from_checkpoint(load_checkpoint(p1), train_set.x.shape[1:])
        save_checkpoint(p2, m1, cfg, epoch=5)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_is_checked(self, tmp_path):
        path = tmp_path / "bad.pcon"
        path.write_bytes(b"WRONG" + b"\x00" * 10)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestSweep:
    def test_single_value_one_row(self):
        cfg = TrainConfig(**{**TREE_CFG.to_dict(), "epochs": 2})
        train_set, test_set = _tree_sets(cfg)
        rows = curvature_sweep(cfg, [0.1], train_set, test_set)
        assert len(rows) == 1 and rows[0]["c"] == 0.1
        assert 0.0 <= rows[0]["accuracy"] <= 1.0


class TestEncoders:
    def test_conv_stem_shapes_and_training_step(self):
        cfg = TrainConfig(
            loss="infonce-cos", encoder="conv-stem-mlp", widths=(32,), proj_dim=8,
            stem_channels=4, epochs=1, batch_size=8, dtype="float64", seed=0,
        )
        train_set = gen_synthetic_images(4, n_classes=2, seed=0)
        model, metrics = pretrain(cfg, train_set)
        feats = encode_features(model, train_set.x[:4], np.float64)
        assert feats.shape == (4, 32)
        assert np.isfinite(metrics[0]["value"])
