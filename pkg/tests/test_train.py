"""Loss, Adam, schedule, clipping, early stopping, history and the fit loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echobench import train as TR
from echobench.models import ConfigError, ModelConfig, build_model
from echobench.tensor import NonFiniteError, Tensor
from echobench.train import AdamState, EarlyStopping, ExperimentConfig, History

from oracles import adam_oracle


@pytest.fixture(scope="module")
def tiny_data():
    from echobench.data import DatasetSpec, generate_dataset, stack_clips
    clips = generate_dataset(DatasetSpec(n=12, frames=6, height=12, width=12, base_radius=0.2, seed=4))
    x, y = stack_clips(clips)
    return (x[:8], y[:8]), (x[8:], y[8:])


def tiny_model(seed=0, dtype=np.float32):
    cfg = ModelConfig(width_multiplier=0.125, frames=6, height=12, width=12)
    return build_model(cfg, 0.5, dtype=dtype, rng=TR.init_rng(seed))


class TestExperimentConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.initial_lr, cfg.decay_period, cfg.decay_factor, cfg.max_epochs, cfg.patience) == (
            1e-3, 10, 2.0, 50, 20)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(patience=60), dict(dropout_rate=1.0),
                                    dict(clip_norm=0.0), dict(l2=-1.0), dict(precision="float16")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw).validate()

    def test_for_family_applies_defaults_and_overrides(self):
        cfg = ExperimentConfig.for_family("TWO_STREAM", max_epochs=3, patience=2)
        assert (cfg.initial_lr, cfg.batch_size, cfg.dropout_rate, cfg.max_epochs) == (5e-4, 16, 0.05, 3)


class TestLoss:
    def test_perfect_fit(self):
        assert TR.training_loss(Tensor([[1.0], [2.0]]), [1.0, 2.0]).item() == 0.0

    def test_unit_error(self):
        assert TR.training_loss(Tensor([[1.0]]), [0.0]).item() == 1.0

    def test_l2_penalty(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        assert TR.training_loss(Tensor([[0.0]]), [0.0], [w], l2=0.1).item() == pytest.approx(0.5)

    def test_l1_penalty(self):
        w = Tensor([-1.0, 2.0], requires_grad=True)
        assert TR.training_loss(Tensor([[0.0]]), [0.0], [w], l1=0.5).item() == pytest.approx(1.5)

    def test_regularized_names(self):
        assert TR.is_regularized("stem.0.conv.weight")
        assert TR.is_regularized("rnn.U")
        assert not TR.is_regularized("stem.0.norm.gamma")
        assert not TR.is_regularized("head.2.bias")


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (9, 1e-3), (10, 5e-4), (25, 2.5e-4)])
    def test_examples(self, epoch, lr):
        assert TR.lr_at_epoch(ExperimentConfig(), epoch) == pytest.approx(lr, rel=1e-15)

    def test_monotone_and_halving(self):
        cfg = ExperimentConfig()
        lrs = [TR.lr_at_epoch(cfg, e) for e in range(60)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        for k in range(1, 6):
            assert lrs[10 * k] == lrs[10 * k - 1] / 2

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            TR.lr_at_epoch(ExperimentConfig(), -1)


class TestClipping:
    def test_no_op_is_bit_identical(self):
        grads = [np.array([0.3, 0.4])]
        assert TR.clip_gradients(grads, 1.0) is grads

    def test_three_four_five(self):
        (g,) = TR.clip_gradients([np.array([3.0, 4.0])], 1.0)
        np.testing.assert_allclose(g, [0.6, 0.8])

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
    @settings(max_examples=1000, deadline=None)
    def test_post_clip_norm_bounded_and_direction_kept(self, seed, max_norm):
        rng = np.random.default_rng(seed)
        grads = [rng.normal(size=s) * rng.uniform(0.1, 10) for s in [(3,), (2, 2), (5,)]]
        clipped = TR.clip_gradients(grads, max_norm)
        assert TR.global_norm(clipped) <= max_norm + 1e-12
        if clipped is not grads:
            a = np.concatenate([g.ravel() for g in grads])
            b = np.concatenate([g.ravel() for g in clipped])
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert abs(cos - 1.0) < 1e-12


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        new, state = TR.adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), 1e-3)
        np.testing.assert_array_equal(new[0], p[0])
        assert state.t == 1

    def test_first_step_is_sign_step(self):
        p = [np.array([0.5])]
        new, _ = TR.adam_step(p, [np.array([0.1])], AdamState.zeros_like(p), 1e-3)
        assert new[0][0] - 0.5 == pytest.approx(-1e-3, abs=1e-6)

    def test_quadratic_trajectory_matches_oracle(self):
        theta = [np.array([1.0])]
        state = AdamState.zeros_like(theta)
        ref = adam_oracle(1.0, lambda t: 2 * t, 0.1, 100)
        for k in range(100):
            theta, state = TR.adam_step(theta, [2 * theta[0]], state, 0.1)
            assert theta[0][0] == pytest.approx(ref[k + 1], abs=1e-10)
        assert abs(theta[0][0]) < 1.0

    def test_decoupled_weight_decay(self):
        p = [np.array([2.0])]
        new, _ = TR.adam_step(p, [np.zeros(1)], AdamState.zeros_like(p), 0.1, weight_decay=0.5)
        assert new[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_non_finite_gradient_rejected(self):
        p = [np.array([1.0])]
        with pytest.raises(NonFiniteError):
            TR.adam_step(p, [np.array([np.nan])], AdamState.zeros_like(p), 1e-3)

    def test_step_counter_increases(self):
        p = [np.array([1.0])]
        state = AdamState.zeros_like(p)
        for k in range(1, 4):
            p, state = TR.adam_step(p, [np.array([0.2])], state, 1e-3)
            assert state.t == k


class TestEarlyStopping:
    def test_best_at_epoch_three_halts_at_23(self):
        stopper = EarlyStopping(20)
        seq = [10.0, 9.0, 8.5, 8.0] + [8.0 + 0.01 * k for k in range(1, 100)]
        stopped = None
        for epoch, v in enumerate(seq):
            if stopper.update(epoch, v):
                stopped = epoch
                break
        assert stopper.best_epoch == 3
        assert stopped == 23

    def test_equal_value_is_not_improvement(self):
        stopper = EarlyStopping(2)
        assert not stopper.update(0, 5.0)
        assert not stopper.update(1, 5.0)
        assert stopper.update(2, 5.0)
        assert stopper.best_epoch == 0

    def test_disabled(self):
        stopper = EarlyStopping(None)
        assert not any(stopper.update(e, 1.0 + e) for e in range(100))


class TestHistory:
    def test_csv_round_trip(self, tmp_path):
        h = History()
        for e in range(3):
            h.append(epoch=e, lr=1e-3 / (e + 1), train_loss=0.1 * e + 1 / 3, train_rmse=1.0,
                     val_loss=2.0 / 7, val_rmse=3.0 - e)
        path = h.to_csv(tmp_path / "h.csv")
        assert path.read_text().splitlines()[0] == "epoch,lr,train_loss,train_rmse,val_loss,val_rmse"
        assert b"\r" not in path.read_bytes()
        back = History.from_csv(path)
        assert back.train_loss == h.train_loss and back.lr == h.lr
        assert back.best_epoch == 2


class TestFit:
    def test_runs_and_respects_bounds(self, tiny_data):
        cfg = ExperimentConfig(max_epochs=4, patience=2, batch_size=4, seed=1)
        _, hist = TR.fit(tiny_model(), *tiny_data, cfg)
        assert 1 <= len(hist) <= 4
        assert hist.best_epoch == int(np.argmin(hist.val_rmse))

    def test_at_least_patience_plus_one_epochs_when_epoch_zero_best(self, tiny_data, monkeypatch):
        # a validation curve that only gets worse forces the best epoch to 0
        calls = iter(range(1000))
        real_predict = TR.predict
        monkeypatch.setattr(TR, "predict", lambda m, x, bs=8: real_predict(m, x, bs) + 100.0 * next(calls))
        cfg = ExperimentConfig(max_epochs=10, patience=3, batch_size=8)
        _, hist = TR.fit(tiny_model(), *tiny_data, cfg)
        assert hist.best_epoch == 0
        assert len(hist) == min(3 + 1, 10)

    def test_identical_seeds_give_identical_history(self, tiny_data, tmp_path):
        cfg = ExperimentConfig(max_epochs=3, patience=None, batch_size=4, seed=7)
        _, h1 = TR.fit(tiny_model(7), *tiny_data, cfg)
        _, h2 = TR.fit(tiny_model(7), *tiny_data, cfg)
        assert h1.to_csv(tmp_path / "a.csv").read_bytes() == h2.to_csv(tmp_path / "b.csv").read_bytes()

    def test_restored_parameters_reproduce_best_val_rmse(self, tiny_data):
        cfg = ExperimentConfig(max_epochs=5, patience=None, batch_size=4, seed=3, precision="float64")
        model, hist = TR.fit(tiny_model(3, np.float64), *tiny_data, cfg)
        xv, yv = tiny_data[1]
        rmse = math.sqrt(np.mean((TR.predict(model, xv) - yv) ** 2))
        assert rmse == pytest.approx(hist.val_rmse[hist.best_epoch], abs=1e-9)

    def test_batch_larger_than_train_set_rejected(self, tiny_data):
        with pytest.raises(ConfigError):
            TR.fit(tiny_model(), *tiny_data, ExperimentConfig(batch_size=64, max_epochs=1, patience=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_history(self, tiny_data):
        cfg = ExperimentConfig(initial_lr=1e30, max_epochs=5, patience=None, batch_size=4)
        with pytest.raises(TR.TrainingDiverged) as info:
            TR.fit(tiny_model(), *tiny_data, cfg)
        assert info.value.history.status == "diverged"

    def test_clipping_and_regularization_paths_run(self, tiny_data):
        cfg = ExperimentConfig(max_epochs=2, patience=None, batch_size=4, clip_norm=1.0, l1=1e-4, l2=1e-4,
                               weight_decay=1e-4)
        _, hist = TR.fit(tiny_model(), *tiny_data, cfg)
        assert len(hist) == 2 and all(np.isfinite(hist.train_loss))
