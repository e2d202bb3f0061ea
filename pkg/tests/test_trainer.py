import json
import math
from pathlib import Path

import numpy as np
import pytest

from tbloc.errors import IntegrityError, NumericError
from tbloc.engine import Tensor
from tbloc.network import build_model
from tbloc.trainer import (Adam, TrainConfig, TrainingHistory, _epoch_order,
                           adam_update, apply_checkpoint, build_examples,
                           load_checkpoint, make_checkpoint, make_optimizers,
                           model_from_checkpoint, run_training,
                           save_checkpoint, train_epoch_two_phase)
from conftest import tiny_model_config


class TestTrainConfig:
    @pytest.mark.parametrize("bad", [
        dict(learning_rate=0.0),
        dict(epochs=0),
        dict(batch_size=0),
        dict(pos_thresh=0.3, neg_thresh=0.4),
        dict(neg_thresh=-0.1),
    ])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()

    def test_defaults_valid(self):
        cfg = TrainConfig().validate()
        assert cfg.learning_rate == 1e-4
        assert cfg.loss.alpha == 0.40


class TestAdamUpdate:
    def test_first_step_oracle(self):
        # constant unit gradient gives m_hat = v_hat = 1 exactly, so the
        # step is lr / (1 + eps)
        value, m, v = adam_update(1.0, 1.0, 0.0, 0.0, t=1, lr=0.1)
        assert value == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert m == pytest.approx(0.1)
        assert v == pytest.approx(0.001)

    def test_constant_gradient_steps_linearly(self):
        value, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            value, m, v = adam_update(value, 1.0, m, v, t=t, lr=0.1)
        assert value == pytest.approx(1.0 - 3 * 0.1 / (1.0 + 1e-8), abs=1e-12)

    def test_descends_against_gradient_sign(self):
        up, _, _ = adam_update(0.0, -2.0, 0.0, 0.0, t=1, lr=0.01)
        down, _, _ = adam_update(0.0, 2.0, 0.0, 0.0, t=1, lr=0.01)
        assert up > 0.0 > down

    def test_array_update(self):
        g = np.array([1.0, -1.0])
        value, _, _ = adam_update(np.zeros(2), g, np.zeros(2), np.zeros(2),
                                  t=1, lr=0.5)
        assert value[0] < 0 < value[1]


class TestAdamOptimizer:
    def make_model(self):
        return build_model(tiny_model_config(), seed=0)

    def test_step_moves_only_params_with_gradients(self):
        model = self.make_model()
        opt = Adam({n: model.params[n] for n in ("cls_head.out.bias",)},
                   TrainConfig(learning_rate=0.1))
        before = model.param_digests()
        model["cls_head.out.bias"].grad = np.ones(9)
        opt.step()
        after = model.param_digests()
        changed = {n for n in before if before[n] != after[n]}
        assert changed == {"cls_head.out.bias"}

    def test_none_gradient_skipped(self):
        model = self.make_model()
        opt = Adam({n: model.params[n] for n in ("cls_head.out.bias",)},
                   TrainConfig())
        before = model.param_digests()
        opt.step()
        assert model.param_digests() == before

    def test_non_finite_gradient_names_parameter(self):
        model = self.make_model()
        opt = Adam({n: model.params[n] for n in ("cls_head.out.bias",)},
                   TrainConfig())
        model["cls_head.out.bias"].grad = np.full(9, np.nan)
        with pytest.raises(NumericError, match="cls_head.out.bias"):
            opt.step()

    def test_zero_grad_clears(self):
        model = self.make_model()
        opt = Adam(model.params, TrainConfig())
        model["cls_head.out.bias"].grad = np.ones(9)
        opt.zero_grad()
        assert not model["cls_head.out.bias"].grad.any()

    def test_make_optimizers_partition(self):
        model = self.make_model()
        det, fp = make_optimizers(model, TrainConfig())
        assert set(det.params) | set(fp.params) == set(model.params)
        assert not set(det.params) & set(fp.params)
        assert all(n.startswith("fp_head.") for n in fp.params)

    def test_make_optimizers_finetune_widens_fp_set(self):
        model = self.make_model()
        _, fp = make_optimizers(model, TrainConfig(phase2_finetune_trunk=True))
        assert set(fp.params) == set(model.params)


class TestEpochOrder:
    def test_deterministic(self):
        a = _epoch_order(10, seed=3, epoch=5, phase=1)
        assert np.array_equal(a, _epoch_order(10, seed=3, epoch=5, phase=1))

    def test_is_permutation(self):
        order = _epoch_order(17, seed=0, epoch=1, phase=2)
        assert sorted(order) == list(range(17))

    def test_varies_with_epoch_and_phase(self):
        base = _epoch_order(32, seed=0, epoch=1, phase=1)
        assert not np.array_equal(base, _epoch_order(32, seed=0, epoch=2, phase=1))
        assert not np.array_equal(base, _epoch_order(32, seed=0, epoch=1, phase=2))


class TestBuildExamples:
    def test_examples_mirror_records(self, dataset4):
        cfg = tiny_model_config()
        examples = build_examples(dataset4, cfg)
        assert [e.id for e in examples] == [r.id for r in dataset4]
        for ex, rec in zip(examples, dataset4):
            assert ex.label == rec.label
            assert ex.image.shape == (1, 1, 32, 32)

    def test_tb_studies_have_positive_anchors(self, dataset4):
        examples = build_examples(dataset4, tiny_model_config())
        for ex in examples:
            if ex.label == "tb":
                assert ex.match.num_positive >= 1
                assert ex.reg_targets.shape == (ex.match.num_positive, 4)
            else:
                assert ex.match.num_positive == 0
                assert ex.reg_targets.shape == (0, 4)


class StepDigestProbe:
    """Optimizer wrapper recording digests of a named subset around step()."""

    def __init__(self, inner, model, watch_names):
        self.inner, self.model, self.watch = inner, model, watch_names
        self.violations = 0
        self.steps = 0

    def zero_grad(self):
        self.inner.zero_grad()

    def step(self):
        before = self.model.param_digests(self.watch)
        self.inner.step()
        self.steps += 1
        if self.model.param_digests(self.watch) != before:
            self.violations += 1


class TestTwoPhaseEpoch:
    def run_epoch(self, model, examples, config, epoch=1, optimizers=None):
        optimizers = optimizers or make_optimizers(model, config)
        return train_epoch_two_phase(model, examples, config, epoch, optimizers)

    def test_needs_a_tb_study(self, dataset4):
        cfg = tiny_model_config()
        model = build_model(cfg, seed=0)
        healthy = [r for r in dataset4 if r.label == "healthy"]
        examples = build_examples(healthy, cfg)
        with pytest.raises(ValueError):
            self.run_epoch(model, examples, TrainConfig())

    def test_step_counts(self, dataset4):
        cfg = tiny_model_config()
        model = build_model(cfg, seed=0)
        examples = build_examples(dataset4, cfg)
        summary = self.run_epoch(model, examples, TrainConfig(learning_rate=1e-3))
        n_tb = sum(1 for r in dataset4 if r.label == "tb")
        assert summary.phase1_steps == n_tb
        assert summary.phase2_steps == len(dataset4)
        assert summary.phase1_loss > 0
        assert summary.phase2_loss > 0

    def test_phase_isolation_digests(self, dataset4):
        # phase-1 steps must leave the study head untouched and phase-2
        # steps must leave everything else untouched
        cfg = tiny_model_config()
        model = build_model(cfg, seed=0)
        examples = build_examples(dataset4, cfg)
        config = TrainConfig(learning_rate=1e-3)
        det, fp = make_optimizers(model, config)
        det_probe = StepDigestProbe(det, model, model.fp_param_names())
        fp_probe = StepDigestProbe(fp, model, model.detector_param_names())
        for epoch in (1, 2):
            train_epoch_two_phase(model, examples, config, epoch,
                                  (det_probe, fp_probe))
        assert det_probe.steps > 0 and fp_probe.steps > 0
        assert det_probe.violations == 0
        assert fp_probe.violations == 0

    def test_phases_do_change_their_own_params(self, dataset4):
        cfg = tiny_model_config()
        model = build_model(cfg, seed=0)
        examples = build_examples(dataset4, cfg)
        before = model.param_digests()
        self.run_epoch(model, examples, TrainConfig(learning_rate=1e-3))
        after = model.param_digests()
        assert any(before[n] != after[n] for n in model.detector_param_names())
        assert any(before[n] != after[n] for n in model.fp_param_names())

    def test_no_fp_head_skips_phase2(self, dataset4):
        cfg = tiny_model_config(fp_head=False)
        model = build_model(cfg, seed=0)
        examples = build_examples(dataset4, cfg)
        summary = self.run_epoch(model, examples, TrainConfig())
        assert summary.phase2_loss is None
        assert summary.phase2_steps == 0

    def test_epoch_is_deterministic(self, dataset4):
        cfg = tiny_model_config()
        results = []
        for _ in range(2):
            model = build_model(cfg, seed=0)
            examples = build_examples(dataset4, cfg)
            config = TrainConfig(learning_rate=1e-3)
            train_epoch_two_phase(model, examples, config, 1,
                                  make_optimizers(model, config))
            results.append(model.param_digests())
        assert results[0] == results[1]


class TestCheckpointIO:
    def roundtrip(self, tmp_path, model, epoch=3, val_ap=0.5):
        ckpt = make_checkpoint(model, epoch, val_ap=val_ap,
                               train_config=TrainConfig())
        path = save_checkpoint(ckpt, tmp_path / "model.ckpt")
        return path, load_checkpoint(path)

    def test_round_trip_preserves_quantized_params(self, tmp_path):
        model = build_model(tiny_model_config(), seed=2)
        _, loaded = self.roundtrip(tmp_path, model)
        assert set(loaded.params) == set(model.params)
        for name, arr in loaded.params.items():
            assert arr.dtype == np.float32
            assert np.array_equal(arr, model.params[name].data.astype(np.float32))
        assert loaded.epoch == 3
        assert loaded.val_ap == 0.5

    def test_manifest_is_compact_sorted_json(self, tmp_path):
        model = build_model(tiny_model_config(), seed=0)
        path, _ = self.roundtrip(tmp_path, model)
        text = path.read_text()
        manifest = json.loads(text)
        assert manifest["format"] == "tbloc-checkpoint-v1"
        assert json.dumps(manifest, sort_keys=True,
                          separators=(",", ":")) + "\n" == text

    def test_model_from_checkpoint_matches_quantized_source(self, tmp_path):
        model = build_model(tiny_model_config(), seed=2)
        _, loaded = self.roundtrip(tmp_path, model)
        rebuilt = model_from_checkpoint(loaded)
        quantized = {n: p.data.astype(np.float32).astype(np.float64)
                     for n, p in model.params.items()}
        for name, arr in quantized.items():
            assert np.array_equal(rebuilt.params[name].data, arr)
        assert rebuilt.config == model.config

    def test_apply_checkpoint_into_fresh_model(self, tmp_path):
        model = build_model(tiny_model_config(), seed=2)
        _, loaded = self.roundtrip(tmp_path, model)
        fresh = build_model(tiny_model_config(), seed=9)
        apply_checkpoint(fresh, loaded)
        assert fresh.param_digests() == model_from_checkpoint(loaded).param_digests()

    def test_unknown_format_rejected(self, tmp_path):
        model = build_model(tiny_model_config(), seed=0)
        path, _ = self.roundtrip(tmp_path, model)
        manifest = json.loads(path.read_text())
        manifest["format"] = "something-else"
        path.write_text(json.dumps(manifest))
        with pytest.raises(IntegrityError, match="format"):
            load_checkpoint(path)

    def test_truncated_buffer_rejected(self, tmp_path):
        model = build_model(tiny_model_config(), seed=0)
        path, _ = self.roundtrip(tmp_path, model)
        bin_path = Path(str(path) + ".bin")
        bin_path.write_bytes(bin_path.read_bytes()[:-8])
        with pytest.raises(IntegrityError, match="bytes"):
            load_checkpoint(path)

    def test_tensor_extent_checked(self, tmp_path):
        model = build_model(tiny_model_config(), seed=0)
        path, _ = self.roundtrip(tmp_path, model)
        manifest = json.loads(path.read_text())
        manifest["tensors"][0]["shape"] = [9999]
        path.write_text(json.dumps(manifest))
        with pytest.raises(IntegrityError, match="extent"):
            load_checkpoint(path)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_garbage_manifest_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("{not json")
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_apply_mismatch_rejected(self, tmp_path):
        model = build_model(tiny_model_config(), seed=0)
        _, loaded = self.roundtrip(tmp_path, model)
        other = build_model(tiny_model_config(fp_head=False), seed=0)
        with pytest.raises(IntegrityError, match="mismatch"):
            apply_checkpoint(other, loaded)


class TestHistoryCsv:
    def test_format_and_none_handling(self, tmp_path):
        hist = TrainingHistory()
        hist.epochs.append((1, 1.5, None, 0.25))
        hist.epochs.append((2, 1.25, 0.7, None))
        path = tmp_path / "log.csv"
        hist.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,phase1_loss,phase2_loss,val_ap"
        assert lines[1] == "1,1.5,,0.25"
        assert lines[2] == "2,1.25,0.7,"

    def test_float_repr_round_trips(self, tmp_path):
        value = 1.0 / 3.0
        hist = TrainingHistory()
        hist.epochs.append((1, value, value, value))
        path = tmp_path / "log.csv"
        hist.write_csv(path)
        cell = path.read_text().splitlines()[1].split(",")[1]
        assert float(cell) == value


class TestRunTraining:
    def test_best_selection_prefers_earliest_tie(self, dataset4, tmp_path):
        aps = iter([0.2, 0.9, 0.9])

        def fake_eval(ckpt, records):
            return next(aps)

        best, history = run_training(
            dataset4, dataset4, tiny_model_config(),
            TrainConfig(epochs=3, learning_rate=1e-3),
            tmp_path / "run", eval_fn=fake_eval)
        assert best.epoch == 2
        assert best.val_ap == 0.9
        assert len(history.epochs) == 3
        assert (tmp_path / "run" / "best.ckpt").exists()
        assert (tmp_path / "run" / "training_log.csv").exists()

    def test_best_files_match_epoch_checkpoint(self, dataset4, tmp_path):
        def fake_eval(ckpt, records):
            return float(ckpt.epoch)  # last epoch wins

        best, _ = run_training(
            dataset4, dataset4, tiny_model_config(),
            TrainConfig(epochs=2, learning_rate=1e-3),
            tmp_path / "run", eval_fn=fake_eval)
        run = tmp_path / "run"
        src = run / "checkpoints" / "epoch_002.ckpt"
        assert (run / "best.ckpt").read_bytes() == src.read_bytes()
        assert (run / "best.ckpt.bin").read_bytes() == \
            Path(str(src) + ".bin").read_bytes()

    def test_recorded_ap_matches_reload(self, dataset4, tmp_path):
        # the stored val_ap must be reproducible from the quantized file
        from tbloc.evaluation import EvalConfig, evaluate

        best, _ = run_training(
            dataset4, dataset4, tiny_model_config(),
            TrainConfig(epochs=2, learning_rate=1e-3),
            tmp_path / "run")
        loaded = load_checkpoint(tmp_path / "run" / "best.ckpt")
        report = evaluate(loaded, dataset4, EvalConfig())
        assert report.ap == loaded.val_ap

    def test_two_runs_are_byte_identical(self, dataset4, tmp_path):
        blobs = []
        for tag in ("a", "b"):
            run_training(dataset4, dataset4, tiny_model_config(),
                         TrainConfig(epochs=2, learning_rate=1e-3),
                         tmp_path / tag)
            blobs.append(((tmp_path / tag / "best.ckpt").read_bytes(),
                          (tmp_path / tag / "best.ckpt.bin").read_bytes()))
        assert blobs[0] == blobs[1]

    def test_progress_callback_sees_every_epoch(self, dataset4, tmp_path):
        seen = []

        def progress(epoch, summary, ap):
            seen.append((epoch, ap))

        run_training(dataset4, dataset4, tiny_model_config(),
                     TrainConfig(epochs=2, learning_rate=1e-3),
                     tmp_path / "run", eval_fn=lambda c, r: 0.1,
                     progress=progress)
        assert seen == [(1, 0.1), (2, 0.1)]
