"""Adam optimizer, parameter store and seeded initialization tests."""

import numpy as np
import pytest

from koopformer.errors import ConfigError, DivergenceError
from koopformer.optim import LrSchedule, OptimizerState, optimizer_step
from koopformer.params import ParamStore, gradient_of, seeded_init


class TestSeededInit:
    def test_zeros(self):
        assert np.array_equal(seeded_init((3, 4), "zeros", 0), np.zeros((3, 4)))

    def test_same_seed_identical(self):
        a = seeded_init((5, 6), "uniform-fan-in", 42)
        b = seeded_init((5, 6), "uniform-fan-in", 42)
        assert np.array_equal(a, b)
        c = seeded_init((5, 6), "uniform-fan-in", 43)
        assert not np.array_equal(a, c)

    def test_uniform_fan_in_bounds(self):
        # scan a generated tensor against the +-1/sqrt(fan_in) bound
        w = seeded_init((64, 128), "uniform-fan-in", 7)
        bound = 1.0 / np.sqrt(64)
        assert w.min() >= -bound and w.max() <= bound
        assert w.std() > 0.3 * bound  # actually spread out, not degenerate

    def test_normal_sigma(self):
        w = seeded_init((200, 200), "normal", 3, sigma=0.02)
        assert abs(float(w.std()) - 0.02) < 0.002

    def test_identity_like(self):
        assert np.array_equal(seeded_init((4, 4), "identity-like", 0), np.eye(4))
        assert np.array_equal(seeded_init((4,), "identity-like", 0), np.ones(4))

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            seeded_init((2,), "sparkles", 0)


class TestParamStore:
    def test_unique_names(self):
        store = ParamStore()
        store.add("w", np.zeros(3))
        with pytest.raises(ConfigError):
            store.add("w", np.zeros(3))

    def test_stable_order(self):
        store = ParamStore()
        for name in ("zeta", "alpha", "mid"):
            store.add(name, np.zeros(1))
        assert store.names() == ["zeta", "alpha", "mid"]

    def test_shape_immutable(self):
        from koopformer.errors import DimensionError

        store = ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(DimensionError):
            store.set_data("w", np.zeros((3, 3)))

    def test_trainable_flags(self):
        store = ParamStore()
        store.add("w", np.zeros(3))
        store.add("buf", np.zeros(3), trainable=False)
        assert list(store.trainable()) == ["w"]
        assert store.n_parameters() == 3
        assert store.n_parameters(trainable_only=False) == 6


class TestAdam:
    def _store(self, value=1.0):
        store = ParamStore()
        store.add("theta", np.array([value], dtype=np.float64))
        return store

    def test_zero_gradients_leave_parameters(self):
        store = self._store()
        state = OptimizerState(LrSchedule(1e-3))
        optimizer_step(store, {"theta": np.zeros(1)}, state)
        assert store["theta"].data[0] == 1.0
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        # hand-evaluated first Adam step: m-hat = g, v-hat = g^2, so the
        # update is -lr * g / (|g| + eps) ~= -lr * sign(g)
        for g in (0.3, -2.0):
            store = self._store(0.0)
            state = OptimizerState(LrSchedule(1e-3))
            optimizer_step(store, {"theta": np.array([g])}, state)
            expect = -1e-3 * g / (abs(g) + 1e-8)
            assert store["theta"].data[0] == pytest.approx(expect, rel=1e-12)
            assert store["theta"].data[0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-6)

    def test_frozen_parameters_never_change(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        store.add("frozen", np.ones(3), trainable=False)
        state = OptimizerState(LrSchedule(0.1))
        for _ in range(5):
            optimizer_step(store, {"w": np.ones(3), "frozen": np.ones(3)}, state)
        assert np.array_equal(store["frozen"].data, np.ones(3))
        assert not np.array_equal(store["w"].data, np.ones(3))

    def test_non_finite_gradient_names_parameter(self):
        store = self._store()
        state = OptimizerState(LrSchedule(1e-3))
        with pytest.raises(DivergenceError, match="theta"):
            optimizer_step(store, {"theta": np.array([np.nan])}, state)

    def test_schedule_steps(self):
        sched = LrSchedule(1e-3, decay=0.5, every=75)
        assert sched.at(0) == 1e-3
        assert sched.at(74) == 1e-3
        assert sched.at(75) == 5e-4
        assert sched.at(150) == 2.5e-4

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            store = self._store()
            state = OptimizerState(LrSchedule(1e-2))
            rng = np.random.default_rng(0)
            for _ in range(10):
                optimizer_step(store, {"theta": rng.standard_normal(1)}, state)
            runs.append(store["theta"].data.copy())
        assert np.array_equal(runs[0], runs[1])


class TestGradientOf:
    def test_quadratic(self):
        store = ParamStore()
        w = store.add("w", np.array([1.0, -2.0, 3.0]))
        loss = ((w * w).sum()) * 0.5
        grads = gradient_of(loss, store)
        np.testing.assert_allclose(grads["w"], w.data)

    def test_constant_loss_zero_grads(self):
        from koopformer import tensor as T

        store = ParamStore()
        store.add("w", np.ones(4))
        loss = T.Tensor(np.array(3.0))
        grads = gradient_of(loss, store)
        assert np.array_equal(grads["w"], np.zeros(4))

    def test_untouched_parameter_zero_not_error(self):
        store = ParamStore()
        a = store.add("a", np.ones(2))
        store.add("b", np.ones(2))
        grads = gradient_of((a * a).sum(), store)
        assert np.array_equal(grads["b"], np.zeros(2))
