import math

import numpy as np
import pytest

from hebbfw.backbones import build_model, preset_config
from hebbfw.checkpoint import (CheckpointFormatError, CheckpointSchemaError, dumps, load_checkpoint, load_into,
                               parse, save_checkpoint)
from hebbfw.data import PreprocessConfig, synth_glyphs
from hebbfw.fewshot import EpisodeConfig, run_episode, split_classes
from hebbfw.tensor import NumericalError, Tensor
from hebbfw.train import (MetricsRow, OptimConfig, OptimizerState, ScheduleConfig, adamw_step, clip_grads,
                          decayed_names, evaluate, global_norm, lr_at, train_loop)

from oracles import adam_loop


def param(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


class TestAdamW:
    def test_single_step_hand_value(self):
        p = {"w": param([[1.0]])}
        adamw_step(p, {"w": np.array([[1.0]])}, OptimizerState(), OptimConfig(lr=0.1, weight_decay=0.01))
        assert p["w"].data.item() == pytest.approx(0.899, abs=1e-6)

    def test_null_update(self):
        p = {"w": param([[1.0, -2.0]])}
        adamw_step(p, {"w": np.zeros((1, 2))}, OptimizerState(), OptimConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, [[1.0, -2.0]])

    def test_matches_adam_without_decay(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(size=6)
        grads = [rng.normal(size=6) for _ in range(25)]
        p = {"w": param(theta.reshape(2, 3).copy())}
        state = OptimizerState()
        cfg = OptimConfig(lr=0.01, weight_decay=0.0)
        for g in grads:
            adamw_step(p, {"w": g.reshape(2, 3)}, state, cfg)
        np.testing.assert_allclose(p["w"].data.reshape(-1), adam_loop(theta, grads, 0.01), atol=1e-12)

    def test_decay_skips_vectors_and_logits(self):
        params = {"m": param(np.ones((2, 2))), "b": param(np.ones(2)), "logit": param(1.0)}
        assert decayed_names(params) == {"m"}
        adamw_step(params, {k: np.zeros_like(v.data) for k, v in params.items()}, OptimizerState(),
                   OptimConfig(lr=0.1, weight_decay=0.5), decay=decayed_names(params))
        np.testing.assert_allclose(params["m"].data, 0.95)
        np.testing.assert_array_equal(params["b"].data, 1.0)
        assert params["logit"].data == 1.0

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError, match="w"):
            adamw_step({"w": param([1.0])}, {"w": np.array([np.nan])}, OptimizerState(), OptimConfig())


class TestSchedule:
    cfg = ScheduleConfig(10, 60)

    def test_warmup_end(self):
        assert lr_at(9, self.cfg, 5e-4) == pytest.approx(5e-4)
        assert lr_at(0, self.cfg, 5e-4) == pytest.approx(5e-5)

    def test_cosine_start(self):
        assert lr_at(10, self.cfg, 5e-4) == pytest.approx(5e-4)

    def test_last_epoch(self):
        expected = 5e-4 * 0.5 * (1 + math.cos(49 * math.pi / 50))
        assert lr_at(59, self.cfg, 5e-4) == pytest.approx(expected)
        assert expected == pytest.approx(4.933e-7, rel=1e-3)

    def test_monotone_after_warmup(self):
        values = [lr_at(e, self.cfg, 1.0) for e in range(10, 60)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("warmup,total", [(0, 0), (5, 5), (-1, 3)])
    def test_invalid(self, warmup, total):
        with pytest.raises(ValueError):
            ScheduleConfig(warmup, total)

    def test_outside_range(self):
        with pytest.raises(ValueError):
            lr_at(60, self.cfg, 1.0)


class TestClip:
    def test_halves(self):
        grads = {"a": np.array([2.0 * math.sqrt(0.5)]), "b": np.array([2.0 * math.sqrt(0.5)])}
        assert clip_grads(grads, 1.0) == pytest.approx(2.0)
        np.testing.assert_allclose(grads["a"], math.sqrt(0.5))

    def test_no_op(self):
        grads = {"a": np.array([0.3, 0.4])}
        clip_grads(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])

    def test_post_norm(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            grads = {k: rng.normal(0, rng.uniform(0.01, 10), size=(3, 4)) for k in "abc"}
            before = global_norm(grads.values())
            clip_grads(grads, 1.0)
            assert global_norm(grads.values()) == pytest.approx(min(before, 1.0), abs=1e-10)


def tiny_setup(hebbian=False, seed=0):
    preset = "desk_vit_hebbian" if hebbian else "desk_vit"
    model = build_model(preset_config(preset, {"depth": 1, "d": 16, "heads": 2, "patch": 4, "image_size": 12}),
                        seed=seed)
    ds = synth_glyphs(15, 8, 12, seed=3)
    split = split_classes(ds.class_ids, (10 / 15, 5 / 15, 0.0), seed=0, remainder="test")
    ep = EpisodeConfig(n_way=3, k_shot=1, n_query=3, train_episodes=4, val_episodes=3)
    pp = PreprocessConfig(target=12, crop_pad=1, rotation_deg=5)
    return model, ds, split, ep, pp


class TestTrainLoop:
    def test_history_and_best(self, tmp_path):
        model, ds, split, ep, pp = tiny_setup()
        res = train_loop(model, ds, split, ep, OptimConfig(lr=1e-3), ScheduleConfig(1, 3), 15, pp,
                         checkpoint_path=tmp_path / "best.hfwckpt")
        assert [(r.epoch, r.split) for r in res.history] == [(e, s) for e in range(3) for s in ("train", "val")]
        vals = [r.acc_mean for r in res.history if r.split == "val"]
        assert res.best_val_acc == max(vals)
        _, meta = load_checkpoint(tmp_path / "best.hfwckpt")
        assert meta["best_val_acc"] == res.best_val_acc
        assert meta["epoch"] == res.best_epoch

    def test_early_stop_keeps_best(self):
        model, ds, split, ep, pp = tiny_setup()
        res = train_loop(model, ds, split, ep, OptimConfig(lr=1e-9), ScheduleConfig(0, 10), 1, pp)
        assert res.stopped_early
        vals = [r.acc_mean for r in res.history if r.split == "val"]
        assert len(vals) < 10 and res.best_val_acc == max(vals)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model, ds, split, ep, pp = tiny_setup(hebbian=True)
            res = train_loop(model, ds, split, ep, OptimConfig(), ScheduleConfig(0, 2), 5, pp, record_time=False)
            runs.append([r.to_dict() for r in res.history])
        assert runs[0] == runs[1]

    def test_non_finite_loss_reports_plasticity(self):
        model, ds, split, ep, pp = tiny_setup(hebbian=True)
        model.params["norm.gamma"].data[:] = np.nan
        with pytest.raises(NumericalError, match="eta="):
            train_loop(model, ds, split, ep, OptimConfig(), ScheduleConfig(0, 1), 5, pp)

    def test_metrics_columns(self):
        assert MetricsRow.columns() == [
            "run_id", "epoch", "split", "episodes", "acc_mean", "acc_ci95", "precision_macro",
            "recall_macro", "f1_macro", "loss_mean", "lr", "eta_values", "lambda_values", "wall_seconds"]

    def test_evaluate_fixed_episodes(self):
        model, ds, split, ep, pp = tiny_setup()
        a, _ = evaluate(model, ds, split.val, ep, 4, pp, seed=1)
        b, _ = evaluate(model, ds, split.val, ep, 4, pp, seed=1, threads=2)
        assert a == b

    def test_loss_drops_on_desk_run(self):
        model = build_model(preset_config("desk_vit"))
        ds = synth_glyphs(30, 20, 28, seed=7)
        split = split_classes(ds.class_ids, (4 / 6, 1 / 6, 1 / 6), seed=42)
        ep = EpisodeConfig(train_episodes=50, val_episodes=5)
        pp = PreprocessConfig(target=28, crop_pad=2)
        res = train_loop(model, ds, split, ep, OptimConfig(lr=2e-4), ScheduleConfig(1, 3), 15, pp)
        losses = [r.loss_mean for r in res.history if r.split == "train"]
        assert min(losses) < math.log(5)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model(preset_config("desk_vit_hebbian"))
        x = np.random.default_rng(2).normal(size=(2, 3, 28, 28)).astype(np.float32)
        save_checkpoint(model, {"note": "x"}, tmp_path / "m.hfwckpt")
        loaded, meta = load_checkpoint(tmp_path / "m.hfwckpt")
        assert meta["note"] == "x"
        np.testing.assert_array_equal(loaded(x).data, model(x).data)

    def test_memory_not_serialized(self):
        model = build_model(preset_config("desk_vit_hebbian", hfw={"memory_scope": "per_episode"}))
        _, _, before = parse(dumps(model))
        rng = np.random.default_rng(3)
        for _ in range(10):
            s = rng.normal(size=(5, 3, 28, 28)).astype(np.float32)
            q = rng.normal(size=(5, 3, 28, 28)).astype(np.float32)
            run_episode(model, s, np.arange(5), q, np.arange(5), 5)
        _, _, after = parse(dumps(model))
        assert before == after

    def test_tamper_detected(self, tmp_path):
        blob = bytearray(dumps(build_model(preset_config("desk_vit"))))
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(CheckpointFormatError, match="checksum"):
            parse(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError) as info:
            parse(b"NOTACKPT" + bytes(20))
        assert info.value.offset == 0

    def test_unknown_name(self):
        model = build_model(preset_config("desk_vit"))
        tensors = {k: v.data for k, v in model.params.items()}
        tensors["extra.weight"] = np.zeros(2, dtype=np.float32)
        with pytest.raises(CheckpointSchemaError, match="extra.weight"):
            load_into(model, tensors)

    def test_missing_name(self):
        model = build_model(preset_config("desk_vit"))
        tensors = {k: v.data for k, v in model.params.items() if k != "norm.beta"}
        with pytest.raises(CheckpointSchemaError, match="norm.beta"):
            load_into(model, tensors)

    def test_shape_mismatch(self):
        model = build_model(preset_config("desk_vit"))
        tensors = {k: v.data for k, v in model.params.items()}
        tensors["norm.beta"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(CheckpointSchemaError):
            load_into(model, tensors)

    def test_no_partial_file_on_save(self, tmp_path):
        save_checkpoint(build_model(preset_config("desk_vit")), None, tmp_path / "a.hfwckpt")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["a.hfwckpt"]
