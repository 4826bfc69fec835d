import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gnmr.autodiff import Tensor
from gnmr.cmapss import WindowSet
from gnmr.errors import ConfigError, NumericalError
from gnmr.graph import default_graph
from gnmr.train import (
    AdamState,
    TrainConfig,
    adam_step,
    grid_configs,
    grid_search,
    lr_at,
    make_model,
    train,
    validation_rmse,
)


def param(values, grad, name="w"):
    p = Tensor(np.array(values, dtype=float), requires_grad=True, name=name)
    p.grad = np.array(grad, dtype=float)
    return p


class TestLrSchedule:
    @pytest.mark.parametrize("epoch, expected", [(0, 1e-3), (9, 1e-3), (10, 1e-3 / math.sqrt(2)), (25, 5e-4)])
    def test_examples(self, epoch, expected):
        assert lr_at(epoch) == pytest.approx(expected, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ConfigError):
            lr_at(-1)

    @given(st.integers(0, 500))
    def test_piecewise_constant_non_increasing(self, epoch):
        assert lr_at(epoch + 1) <= lr_at(epoch)
        assert (lr_at(epoch + 1) < lr_at(epoch)) == ((epoch + 1) % 10 == 0)


class TestAdam:
    def test_zero_gradient_is_null_update(self):
        p = param([1.0, -2.0], [0.0, 0.0])
        adam_step([p], AdamState(), 1e-3)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr_against_gradient(self):
        p = param([0.0, 0.0, 0.0], [3.0, -0.5, 1e-3])
        adam_step([p], AdamState(), 1e-2)
        np.testing.assert_allclose(p.data, [-1e-2, 1e-2, -1e-2], rtol=1e-4)

    def test_constant_gradient_limit(self):
        p = param([0.0], [0.7])
        state = AdamState()
        prev = 0.0
        for _ in range(2000):
            adam_step([p], state, 1e-3)
            step, prev = prev - p.data[0], p.data[0]
        assert step == pytest.approx(1e-3, rel=1e-6)

    def test_matches_hand_computed_three_steps(self):
        grads = [0.5, -1.0, 2.0]
        p = param([1.0], [0.0])
        state = AdamState()
        m = v = 0.0
        x = 1.0
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g])
            adam_step([p], state, 0.1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-14)

    def test_nan_gradient_names_tensor(self):
        p = param([1.0, 2.0], [np.nan, 0.0], name="cell.z.w")
        with pytest.raises(NumericalError, match="cell.z.w"):
            adam_step([p], AdamState(), 1e-3)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_gradient_clipping(self):
        a, b = param([0.0], [30.0], "a"), param([0.0], [40.0], "b")
        adam_step([a, b], AdamState(), 1.0, grad_clip=5.0)
        state_a = AdamState()
        c = param([0.0], [3.0], "a")
        adam_step([c], state_a, 1.0)
        assert a.data[0] == pytest.approx(c.data[0])


class TestConfig:
    def test_defaults_follow_training_recipe(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.dropout, cfg.lr0) == (32, 0.2, 1e-3)
        assert cfg.lr_decay == pytest.approx(1 / math.sqrt(2))
        assert cfg.grad_clip is None

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("kw", [{"model": "cnn"}, {"batch_size": 0}, {"tau": -1}, {"dropout": 1.0}, {"grad_clip": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


def quick_cfg(**kw):
    base = dict(d=4, tau=1, gru_layers=1, max_epochs=4, patience=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_empty_training_set(self, tiny_dataset):
        cfg = quick_cfg()
        model = make_model(cfg, default_graph())
        empty = WindowSet.empty(20)
        with pytest.raises(ConfigError, match="empty"):
            train(model, empty, tiny_dataset.val, cfg)

    def test_best_snapshot_is_returned(self, tiny_dataset):
        cfg = quick_cfg(max_epochs=6)
        model, hist = train(make_model(cfg, default_graph()), tiny_dataset.train, tiny_dataset.val, cfg)
        assert len(hist) == 6
        assert hist.best_val_rmse == min(hist.val_rmse)
        assert validation_rmse(model, tiny_dataset.val) == hist.best_val_rmse
        assert validation_rmse(model, tiny_dataset.val) == validation_rmse(model, tiny_dataset.val)

    def test_seeded_runs_bit_identical(self, tiny_dataset):
        cfg = quick_cfg()
        runs = [train(make_model(cfg, default_graph()), tiny_dataset.train, tiny_dataset.val, cfg) for _ in range(2)]
        assert runs[0][1].rows() == runs[1][1].rows()
        a, b = runs[0][0].state(), runs[1][0].state()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_different_seed_differs(self, tiny_dataset):
        h = [train(make_model(quick_cfg(seed=s), default_graph()), tiny_dataset.train, None, quick_cfg(seed=s))[1] for s in (1, 2)]
        assert h[0].loss != h[1].loss

    def test_early_stopping(self, tiny_dataset, monkeypatch):
        scripted = iter([5.0, 4.0, 4.5, 4.0, 6.0, 1.0, 0.5])
        monkeypatch.setattr("gnmr.train.validation_rmse", lambda model, windows: next(scripted))
        cfg = quick_cfg(max_epochs=50, patience=2)
        _, hist = train(make_model(cfg, default_graph()), tiny_dataset.train, tiny_dataset.val, cfg)
        assert hist.stopped_early
        assert hist.val_rmse == [5.0, 4.0, 4.5, 4.0, 6.0]
        assert hist.best_epoch == 1

    @pytest.mark.parametrize("kind", ["gru_mr", "pca_gru_mr"])
    def test_baselines_train(self, tiny_dataset, kind):
        cfg = quick_cfg(model=kind, max_epochs=2)
        model, hist = train(make_model(cfg, None, tiny_dataset.train), tiny_dataset.train, tiny_dataset.val, cfg)
        assert model.kind == kind
        assert all(np.isfinite(hist.loss))

    def test_loss_decreases(self, tiny_dataset):
        cfg = quick_cfg(max_epochs=15, dropout=0.0)
        _, hist = train(make_model(cfg, default_graph()), tiny_dataset.train, None, cfg)
        assert hist.loss[-1] < 0.5 * hist.loss[0]


class TestGrid:
    def test_default_grid_has_18_points(self):
        cfgs = grid_configs(TrainConfig(), {"d": (30, 60), "tau": (0, 2, 4), "gru_layers": (2, 3, 4)})
        assert len(cfgs) == 18
        assert len({c.seed for c in cfgs}) == 18

    def test_seeds_do_not_depend_on_grid_order(self):
        a = {(c.d, c.tau, c.gru_layers): c.seed for c in grid_configs(TrainConfig(), {"d": (30, 60)})}
        b = {(c.d, c.tau, c.gru_layers): c.seed for c in grid_configs(TrainConfig(), {"d": (60, 30)})}
        assert a == b

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            grid_configs(TrainConfig(), {"lr0": (1e-3,)})

    def stub(self, table):
        def fn(cfg, graph, tr, va):
            return None, None, table[(cfg.d, cfg.tau, cfg.gru_layers)]

        return fn

    def test_singleton(self):
        res = grid_search(None, None, TrainConfig(d=30, tau=2, gru_layers=2), {}, train_fn=self.stub({(30, 2, 2): 5.0}))
        assert (res.best.config.d, res.best.config.tau, res.best.config.gru_layers) == (30, 2, 2)

    def test_argmin_with_stub_oracle(self):
        table = {(d, t, l): 10 + d / 10 - t + l * 0.5 for d in (30, 60) for t in (0, 2, 4) for l in (2, 3, 4)}
        table[(60, 0, 3)] = 1.0
        res = grid_search(None, None, TrainConfig(), {"d": (30, 60), "tau": (0, 2, 4), "gru_layers": (2, 3, 4)},
                          train_fn=self.stub(table), jobs=3)
        assert len(res.points) == 18
        assert (res.best.config.d, res.best.config.tau, res.best.config.gru_layers) == (60, 0, 3)
        assert sum(r["selected"] for r in res.rows()) == 1

    def test_ties_prefer_small_d_then_tau_then_layers(self):
        table = {(d, t, l): 7.0 for d in (30, 60) for t in (0, 2) for l in (2, 3)}
        table[(30, 0, 2)] = 8.0
        res = grid_search(None, None, TrainConfig(), {"d": (60, 30), "tau": (2, 0), "gru_layers": (3, 2)},
                          train_fn=self.stub(table))
        assert (res.best.config.d, res.best.config.tau, res.best.config.gru_layers) == (30, 0, 3)

    def test_real_training_parallel_matches_serial(self, tiny_dataset):
        base = quick_cfg(max_epochs=2)
        grid = {"d": (3, 4)}
        a = grid_search(tiny_dataset.train, tiny_dataset.val, base, grid, default_graph(), jobs=1)
        b = grid_search(tiny_dataset.train, tiny_dataset.val, base, grid, default_graph(), jobs=2)
        assert [p.val_rmse for p in a.points] == [p.val_rmse for p in b.points]


def single_window(seed=6):
    rng = np.random.default_rng(seed)
    return WindowSet(rng.uniform(-1, 1, size=(1, 100, 24)), np.array([0.37]), np.array([150]), np.array([48.0]), np.array([1]))


def max_rise_after(losses, start=50):
    losses = np.asarray(losses)
    return float((losses[start + 1 :] / losses[start:-1]).max())


class TestOverfitLossShape:
    @pytest.mark.xfail(
        strict=True,
        reason="once the loss nears the float floor Adam momentum overshoots; rises of >10% appear below 1e-4",
    )
    def test_oracle_loss_monotone_after_epoch_50(self):
        cfg = TrainConfig(d=8, tau=2, gru_layers=2, dropout=0.0, lr_decay=1.0, max_epochs=300, patience=300, seed=0)
        _, hist = train(make_model(cfg, default_graph()), single_window(), None, cfg)
        assert max_rise_after(hist.loss) <= 1.1

    def test_default_schedule_loss_monotone_after_epoch_50(self):
        cfg = TrainConfig(d=8, tau=2, gru_layers=2, dropout=0.0, max_epochs=150, patience=150, seed=0)
        _, hist = train(make_model(cfg, default_graph()), single_window(), None, cfg)
        assert max_rise_after(hist.loss) <= 1.1
        assert min(hist.loss) >= 0.0
