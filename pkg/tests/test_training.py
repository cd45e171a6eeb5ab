import numpy as np
import pytest
from hypothesis import given, strategies as st

from stagewise.attention import Grads, ModelParams, zero_params
from stagewise.errors import ConfigError
from stagewise.markov import make_rng, minimal_task, sample_batch
from stagewise.training import (OptimizerState, PlateauScheduler, TrainConfig, TrainingAborted,
                                adamw_update, clip_by_global_norm, sgd_update, train)


def tiny_params():
    return ModelParams(np.zeros((1, 3, 3)), np.zeros((1, 2, 3)), T=0)


class TestScheduler:
    def test_reduces_after_patience_exceeded(self):
        sched = PlateauScheduler(1.0, patience=2, factor=0.5)
        lrs = [sched.observe(x) for x in [1.0, 1.0, 1.0, 1.0, 1.0]]
        assert lrs == [1.0, 1.0, 1.0, 0.5, 0.5]

    def test_relative_threshold(self):
        sched = PlateauScheduler(1.0, patience=0, factor=0.5)
        sched.observe(1.0)
        assert sched.observe(1.0 - 1e-5) == 0.5
        assert sched.observe(0.9) == 0.5

    def test_improvement_resets_counter(self):
        sched = PlateauScheduler(1.0, patience=1)
        for x in [1.0, 1.0, 0.5, 0.5]:
            sched.observe(x)
        assert sched.lr == 1.0


class TestUpdates:
    @given(st.floats(0.01, 100), st.floats(0.1, 10))
    def test_clip_bounds_norm(self, scale, max_norm):
        g = Grads(np.full((1, 3, 3), scale), np.full((1, 2, 3), -scale))
        clipped, norm = clip_by_global_norm(g, max_norm)
        assert norm == pytest.approx(scale * np.sqrt(15))
        assert clipped.global_norm() <= max_norm * (1 + 1e-12) or clipped is g

    def test_first_adam_step_is_signed_lr(self):
        params = tiny_params()
        g = Grads(np.linspace(-1, 1, 9).reshape(1, 3, 3) + 0.05, np.full((1, 2, 3), 1e-3))
        state = OptimizerState.for_params(params, lr=0.1, weight_decay=0.0)
        adamw_update(params, g, state)
        np.testing.assert_allclose(params.attn, -0.1 * np.sign(g.attn), rtol=1e-6)
        np.testing.assert_allclose(params.value, -0.1, rtol=1e-4)

    def test_decay_is_decoupled(self):
        params = tiny_params()
        params.attn[:] = 2.0
        state = OptimizerState.for_params(params, lr=0.1, weight_decay=0.5)
        adamw_update(params, Grads(np.zeros((1, 3, 3)), np.zeros((1, 2, 3))), state)
        np.testing.assert_allclose(params.attn, 2.0 * (1 - 0.05))

    def test_sgd_step(self):
        params = tiny_params()
        state = OptimizerState.for_params(params, lr=0.5, weight_decay=0.0)
        sgd_update(params, Grads(np.ones((1, 3, 3)), np.ones((1, 2, 3))), state)
        np.testing.assert_allclose(params.attn, -0.5)


class TestTrainLoop:
    def setup_method(self):
        self.spec = minimal_task(d=5, T=6, b0=3.0)
        self.train_set = sample_batch(self.spec, 64, make_rng(0, "train"))
        self.val_set = sample_batch(self.spec, 32, make_rng(0, "test"))

    def config(self, **kw):
        base = dict(steps=60, batch_size=32, lr=0.05, eval_every=10)
        base.update(kw)
        return TrainConfig(**base)

    def test_loss_decreases(self):
        result = train(self.spec, self.train_set, self.val_set, self.config(), make_rng(0, "init"))
        assert [r["step"] for r in result.rows] == [0, 10, 20, 30, 40, 50, 60]
        assert result.rows[-1]["val_loss"] < result.rows[0]["val_loss"]

    def test_deterministic(self):
        a = train(self.spec, self.train_set, self.val_set, self.config(steps=20), make_rng(0, "init"))
        b = train(self.spec, self.train_set, self.val_set, self.config(steps=20), make_rng(0, "init"))
        np.testing.assert_array_equal(a.params.attn, b.params.attn)
        assert a.rows == b.rows

    def test_callback_columns_merged(self):
        seen = []

        def callback(step, params, row):
            seen.append(step)
            return {"probe": float(step)}

        result = train(self.spec, self.train_set, self.val_set, self.config(steps=20), make_rng(0, "init"),
                       callback=callback, keep_snapshots=True)
        assert seen == [0, 10, 20]
        assert result.rows[1]["probe"] == 10.0
        assert [s for s, _ in result.snapshots] == seen

    def test_online_sampling(self):
        result = train(self.spec, None, self.val_set, self.config(steps=10, online=True), make_rng(0, "init"))
        assert len(result.rows) == 2

    def test_overflowing_gradient_aborts(self):
        params = zero_params(self.spec)
        params.value[:] = 1e300
        with pytest.raises(TrainingAborted) as info:
            train(self.spec, self.train_set, self.val_set, self.config(), make_rng(0, "init"), params=params)
        assert info.value.record["step"] == 0

    def test_nonfinite_loss_aborts(self):
        params = zero_params(self.spec)
        params.value[:] = np.random.default_rng(0).normal(size=params.value.shape) * 1e300
        with pytest.raises(TrainingAborted):
            train(self.spec, self.train_set, self.val_set, self.config(), make_rng(0, "init"), params=params)

    @pytest.mark.parametrize("kw", [{"optimizer": "lbfgs"}, {"batch_size": 0}, {"factor": 1.0}, {"lr": -1}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
