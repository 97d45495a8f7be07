"""Loss functions, the Adam optimizer, plateau decay, the fit loop, and
checkpoint persistence."""

import math

import numpy as np
import pytest

from cpdnet.tensor import Tensor, Tape, backward, mul, reduce_sum, scale, add
from cpdnet.model import FULL_DECODER, CpdModel, ModelConfig, SaliencyOutputs, cpd_forward
from cpdnet.training import (AdamState, Checkpoint, CheckpointError,
                             CheckpointMagicError, CheckpointTruncatedError,
                             PlateauScheduler, TrainConfig, UnknownParameterError,
                             adam_step, adam_state_from_checkpoint, bce_with_logits,
                             fit, load_checkpoint, log_to_tsv, model_from_checkpoint,
                             restore_into, save_checkpoint, snapshot, total_loss)
from cpdnet.data import SceneConfig, synth_dataset

from oracles import bce_reference


def toy_config():
    return ModelConfig.toy()


class TestBceWithLogits:
    def test_zero_logits_give_ln2_for_any_mask(self, rng):
        logits = Tensor(np.zeros((1, 1, 4, 4), np.float32))
        for mask in (np.zeros((1, 1, 4, 4)), np.ones((1, 1, 4, 4)),
                     (rng.random((1, 1, 4, 4)) > 0.5).astype(float)):
            loss = bce_with_logits(logits, Tensor(mask.astype(np.float32)))
            assert abs(loss.item() - math.log(2.0)) < 1e-7

    def test_confident_correct_limit(self):
        mask = np.zeros((1, 1, 2, 2), np.float32)
        mask[0, 0, 0, 0] = 1.0
        logits = np.where(mask > 0, 50.0, -50.0).astype(np.float32)
        loss = bce_with_logits(Tensor(logits), Tensor(mask))
        assert loss.item() < 1e-8

    def test_matches_direct_formula_oracle(self, rng):
        logits = Tensor(rng.normal(size=(1, 1, 4, 4)))
        mask = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
        loss = bce_with_logits(logits, mask)
        assert abs(loss.item() - bce_reference(logits.data, mask.data)) < 1e-12

    def test_nonbinary_mask_rejected(self):
        logits = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        with pytest.raises(ValueError):
            bce_with_logits(logits, Tensor(np.full((1, 1, 2, 2), 0.5, np.float32)))

    def test_extreme_logits_finite(self):
        logits = Tensor(np.array([[[[500.0, -500.0]]]], np.float32))
        mask = Tensor(np.array([[[[1.0, 0.0]]]], np.float32))
        assert np.isfinite(bce_with_logits(logits, mask).item())


class TestTotalLoss:
    def _outputs(self, logits_i, logits_d):
        return SaliencyOutputs(s_d=None, logits_d=logits_d, logits_i=logits_i)

    def test_confident_both_branches(self):
        mask = (np.arange(16).reshape(1, 1, 4, 4) % 2).astype(np.float32)
        confident = Tensor(np.where(mask > 0, 50.0, -50.0).astype(np.float32))
        out = self._outputs(confident, confident)
        assert total_loss(out, Tensor(mask)).item() < 2e-8

    def test_full_decoder_single_branch(self, rng):
        logits = Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))
        mask = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float32))
        out = self._outputs(None, logits)
        assert abs(total_loss(out, mask).item() - bce_with_logits(logits, mask).item()) < 1e-7

    def test_equals_component_sum(self, rng):
        li = Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))
        ld = Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))
        mask = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float32))
        out = self._outputs(li, ld)
        expected = bce_with_logits(li, mask).item() + bce_with_logits(ld, mask).item()
        assert abs(total_loss(out, mask).item() - expected) < 1e-6

    def test_zero_logit_initialization_value(self):
        mask = Tensor(np.ones((1, 1, 2, 2), np.float32))
        zeros = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        out = self._outputs(zeros, zeros)
        assert abs(total_loss(out, mask).item() - 2 * math.log(2.0)) < 1e-6


class TestAdam:
    def _param(self, value):
        t = Tensor(np.array(value, np.float32).reshape(1, 1, 1, -1), requires_grad=True)
        return {"p": t}

    def test_zero_gradient_keeps_parameters(self):
        params = self._param([1.0, -2.0])
        params["p"].grad = np.zeros_like(params["p"].data)
        state = AdamState.init(params)
        adam_step(params, state, lr=0.1)
        np.testing.assert_array_equal(params["p"].data.reshape(-1), [1.0, -2.0])
        assert state.t == 1

    def test_first_step_matches_hand_oracle(self):
        # m_hat = g, v_hat = g^2  =>  delta = -lr * g/(|g| + eps)
        params = self._param([2.0])
        params["p"].grad = np.full_like(params["p"].data, 0.5)
        state = AdamState.init(params)
        adam_step(params, state, lr=0.1)
        expected = 2.0 - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
        assert abs(params["p"].data.reshape(-1)[0] - expected) < 1e-6

    def test_missing_grad_rejected(self):
        params = self._param([1.0])
        state = AdamState.init(params)
        with pytest.raises(ValueError, match="no gradient"):
            adam_step(params, state, lr=0.1)

    def test_quadratic_descent_monotone_after_warmup(self):
        # lr and target distance chosen so 200 steps stay in the approach
        # phase (each Adam step moves ~lr, distances are ~2-8), where loss
        # decreases monotonically; closer in, momentum oscillates
        target = (np.array([0.3, -1.2, 2.0, 0.5], np.float32) * 4.0).reshape(1, 1, 1, 4)
        p = Tensor(np.zeros_like(target), requires_grad=True)
        params = {"p": p}
        state = AdamState.init(params)
        losses = []
        for _ in range(200):
            p.zero_grad()
            with Tape() as tape:
                diff = add(p, Tensor(-target))
                loss = scale(reduce_sum(mul(diff, diff)), 0.5)
            backward(loss, tape)
            losses.append(loss.item())
            adam_step(params, state, lr=0.01)
        tail = losses[10:]
        assert all(b <= a + 1e-9 for a, b in zip(tail, tail[1:]))
        assert losses[-1] < losses[0]

    def test_lr_zero_changes_nothing(self, rng):
        params = self._param(rng.normal(size=4))
        before = params["p"].data.copy()
        params["p"].grad = rng.normal(size=params["p"].shape).astype(np.float32)
        adam_step(params, AdamState.init(params), lr=0.0)
        np.testing.assert_array_equal(params["p"].data, before)


class TestPlateauScheduler:
    def test_decay_fires_only_after_window_without_improvement(self):
        sched = PlateauScheduler(lr=1.0, window=5, min_improvement=0.01, factor=0.9)
        for loss in [1.0, 0.9, 0.8]:          # improving: no decay
            sched.step(loss)
        assert sched.lr == 1.0
        for i, loss in enumerate([0.80, 0.80, 0.80, 0.80]):  # 4 stale epochs: still none
            sched.step(loss)
        assert sched.lr == 1.0
        sched.step(0.80)                      # 5th stale epoch: decay
        assert abs(sched.lr - 0.9) < 1e-12

    def test_exactly_one_percent_counts_as_improvement(self):
        sched = PlateauScheduler(lr=1.0)
        sched.step(1.0)
        for _ in range(10):
            sched.step(sched.best * 0.99)     # always exactly 1% better
        assert sched.lr == 1.0

    def test_counter_resets_after_decay(self):
        sched = PlateauScheduler(lr=1.0, window=2, factor=0.5)
        sched.step(1.0)
        sched.step(1.0)
        sched.step(1.0)
        assert sched.lr == 0.5
        sched.step(1.0)
        assert sched.lr == 0.5               # needs another full window
        sched.step(1.0)
        assert sched.lr == 0.25


def tiny_dataset(count=8, side=32, seed=9):
    return synth_dataset(SceneConfig(side=side, seed=seed), count)


class TestFit:
    def test_deterministic_under_seed(self):
        samples = tiny_dataset()
        cfg = TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=3)
        log_a, _ = fit(CpdModel(ModelConfig.toy(input_side=32), seed=3), samples, cfg)
        log_b, _ = fit(CpdModel(ModelConfig.toy(input_side=32), seed=3), samples, cfg)
        assert [r.loss for r in log_a] == [r.loss for r in log_b]
        assert [r.lr for r in log_a] == [r.lr for r in log_b]

    def test_loss_decreases_over_short_run(self):
        samples = tiny_dataset(count=12)
        cfg = TrainConfig(batch_size=4, lr=1e-3, epochs=6, seed=1)
        log, ckpt = fit(CpdModel(ModelConfig.toy(input_side=32), seed=1), samples, cfg)
        assert log[-1].loss < log[0].loss
        assert isinstance(ckpt, Checkpoint)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fit(CpdModel(ModelConfig.toy(input_side=32), seed=0), [],
                TrainConfig(epochs=1))

    def test_log_tsv_format(self):
        samples = tiny_dataset(count=4)
        cfg = TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=0)
        log, _ = fit(CpdModel(ModelConfig.toy(input_side=32), seed=0), samples, cfg)
        text = log_to_tsv(log)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch\tloss\tlr"
        assert len(lines) == 3

    @pytest.mark.slow
    def test_overfit_ten_samples(self):
        """Memorization capacity: total loss below 0.05 within 300 epochs on
        ten samples."""
        samples = tiny_dataset(count=10, side=64, seed=4)
        model = CpdModel(ModelConfig.toy(), seed=4)
        cfg = TrainConfig(batch_size=5, lr=1e-3, epochs=300, seed=4)
        log, _ = fit(model, samples, cfg)
        best = min(r.loss for r in log)
        assert best < 0.05, f"best loss over 300 epochs was {best:.4f}"


class TestCheckpointPersistence:
    def _model(self, seed=2):
        return CpdModel(ModelConfig.toy(input_side=32), seed=seed)

    def test_roundtrip_forward_bit_identical(self, tmp_path, rng):
        model = self._model()
        img = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
        before = cpd_forward(model, img)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        restored = model_from_checkpoint(load_checkpoint(path))
        after = cpd_forward(restored, img)
        assert before.s_d.data.tobytes() == after.s_d.data.tobytes()
        assert before.s_i.data.tobytes() == after.s_i.data.tobytes()

    def test_adam_state_roundtrip(self, tmp_path):
        model = self._model()
        params = model.named_parameters()
        state = AdamState.init(params)
        for p in params.values():
            p.grad = np.ones_like(p.data)
        adam_step(params, state, lr=1e-3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, state)
        ckpt = load_checkpoint(path)
        assert ckpt.adam is not None
        restored_model = model_from_checkpoint(ckpt)
        restored_state = adam_state_from_checkpoint(ckpt, restored_model)
        assert restored_state.t == 1
        np.testing.assert_array_equal(restored_state.m["blur.kernel"],
                                      state.m["blur.kernel"])

    def test_no_adam_section_loads_none(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self._model())
        assert load_checkpoint(path).adam is None

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self._model())
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(path)

    def test_truncated_blob_names_parameter(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self._model())
        blob = path.read_bytes()
        path.write_bytes(blob[:-20])
        with pytest.raises(CheckpointTruncatedError, match="parameter"):
            load_checkpoint(path)

    def test_unknown_parameter_name(self, tmp_path):
        model = self._model()
        ckpt = snapshot(model)
        ckpt.params["not.a.real.layer"] = np.zeros(3, np.float32)
        with pytest.raises(UnknownParameterError):
            restore_into(model, ckpt)

    def test_shape_mismatch_detected(self):
        model = self._model()
        ckpt = snapshot(model)
        ckpt.params["blur.kernel"] = np.zeros((1, 1, 2, 2), np.float32)
        with pytest.raises(CheckpointError):
            restore_into(model, ckpt)
