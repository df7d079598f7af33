"""Baseline model tests: AR-MLP, LSTM, Koopman-only, echo-state."""

import numpy as np
import pytest

from koopformer import tensor as T
from koopformer.baselines import (ArMlpConfig, ArMlpModel, EchoStateConfig,
                                  EchoStateModel, LstmConfig, LstmModel,
                                  rollout_ar_mlp, rollout_echo_state,
                                  rollout_koopman_only, rollout_lstm,
                                  spectral_radius, train_ar_mlp, train_echo_state,
                                  train_lstm)
from koopformer.data import NormStats, generate_dataset
from koopformer.embedding import (EmbeddingConfig, EmbeddingModel, koopman_matrix,
                                  koopman_rollout)
from koopformer.errors import ConfigError

from gradcheck_util import finite_difference_check
from test_data import lorenz_spec


def small_dataset(count=8, n_steps=48, seed=0):
    return generate_dataset(lorenz_spec(n_steps=n_steps), count=count, base_seed=seed)


class TestArMlp:
    def test_parameter_budget(self):
        model = ArMlpModel((3,), ArMlpConfig())
        # within +-20% of the 92k reference budget
        assert 0.8 * 92_000 <= model.n_parameters() <= 1.2 * 92_000

    def test_identity_init_rollout_constant(self):
        model = ArMlpModel((3,), ArMlpConfig(widths=(16, 16)))
        model.norm = NormStats(np.zeros(3), np.ones(3))
        init = np.array([[1.0, -2.0, 3.0]], dtype=np.float32)
        out = rollout_ar_mlp(model, init, steps=10)
        np.testing.assert_allclose(out.data, np.tile(init[0], (1, 11, 1)), atol=1e-6)

    def test_training_reduces_one_step_mse(self):
        ds = small_dataset(count=16)
        cfg = ArMlpConfig(widths=(32, 32), epochs=40, batch_size=64, pairs_per_epoch=512,
                          seed=3)
        model, history = train_ar_mlp(ds, cfg)
        assert history["loss"][-1] < 0.5 * history["loss"][2]

    def test_epoch_cap(self):
        with pytest.raises(ConfigError):
            ArMlpConfig(epochs=501)

    def test_checkpoint_roundtrip(self, tmp_path):
        ds = small_dataset()
        model, _ = train_ar_mlp(ds, ArMlpConfig(widths=(8,), epochs=2,
                                                pairs_per_epoch=64, seed=1))
        model.save(tmp_path / "ar")
        back = ArMlpModel.load(tmp_path / "ar")
        x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
        with T.no_grad():
            np.testing.assert_array_equal(back.predict(x).data, model.predict(x).data)


class TestLstm:
    def test_parameter_budget(self):
        model = LstmModel((3,), LstmConfig())
        # within +-20% of the 103k reference budget
        assert 0.8 * 103_000 <= model.n_parameters() <= 1.2 * 103_000

    def test_zero_weights_hidden_stays_zero(self):
        model = LstmModel((3,), LstmConfig(lift_dim=4, hidden=6))
        for name in model.store.names():
            model.store.set_data(name, np.zeros(model.store[name].shape, dtype=np.float32))
        model.store.set_data("head.b", np.array([1.5, -2.0, 0.25], dtype=np.float32))
        with T.no_grad():
            h = T.Tensor(np.zeros((2, 6), dtype=np.float32))
            c = T.Tensor(np.zeros((2, 6), dtype=np.float32))
            pred, h, c = model.step(T.Tensor(np.ones((2, 3), dtype=np.float32)), h, c)
        assert np.array_equal(h.data, np.zeros((2, 6)))
        np.testing.assert_array_equal(pred.data, np.tile([1.5, -2.0, 0.25], (2, 1)))

    def test_cell_gradient_matches_finite_differences(self):
        model = LstmModel((3,), LstmConfig(lift_dim=4, hidden=5, seed=2))
        model.store = model.store.astype(np.float64)
        rng = np.random.default_rng(0)
        windows = rng.standard_normal((2, 6, 3))
        tensors = [t for t in model.store.tensors() if t.requires_grad]

        def fn():
            for t in tensors:
                t.grad = None
            preds = model.forward_window(windows[:, :-1])
            return T.mse(preds, windows[:, 1:])

        worst = finite_difference_check(fn, tensors, n_probes=100)
        assert worst <= 1e-4, f"worst relative error {worst}"

    def test_teacher_forced_shifted_targets(self):
        # mse of exactly-shifted targets is zero by definition
        data = np.random.default_rng(1).standard_normal((2, 5, 3)).astype(np.float32)
        assert T.mse(T.Tensor(data[:, 1:]), data[:, 1:]).item() == 0.0

    def test_stateful_rollout_carries_hidden(self):
        ds = small_dataset(count=8)
        model, _ = train_lstm(ds, LstmConfig(lift_dim=4, hidden=8, window=8, epochs=2,
                                             batch_size=4, seed=0))
        init = ds.data[:2, 0]
        out = rollout_lstm(model, init, steps=12)
        assert out.data.shape == (2, 13, 3)
        np.testing.assert_array_equal(out.data[:, 0], init)


class TestKoopmanOnly:
    def _embedder(self):
        emb = EmbeddingModel(EmbeddingConfig(state_shape=(3,), embed_dim=6, hidden=(8,),
                                             half_bandwidth=2, seed=1)).train(False)
        emb.norm = NormStats(np.zeros(3), np.ones(3))
        return emb

    def test_step_zero_is_reconstruction(self):
        emb = self._embedder()
        init = np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)
        out = rollout_koopman_only(emb, init, steps=4)
        np.testing.assert_array_equal(out.data[:, 0], init)
        # step 1 equals decode(K encode(x)) computed directly
        with T.no_grad():
            z = emb.encode(init).data
            K = koopman_matrix(emb.koopman)
            expect = emb.decode(z @ K.T).data
        np.testing.assert_allclose(out.data[:, 1], expect, atol=1e-6)

    def test_latent_trajectory_matches_rollout_exactly(self):
        emb = self._embedder()
        rng = np.random.default_rng(5)
        diag = rng.standard_normal(6).astype(np.float32)
        emb.store.set_data("koopman.diag", diag)
        init = rng.standard_normal((2, 3)).astype(np.float32)
        with T.no_grad():
            z0 = emb.encode(init).data
            K = koopman_matrix(emb.koopman)
            latents = koopman_rollout(K, z0, 6)
            decoded = np.stack([emb.decode(latents[:, t]).data for t in range(7)], axis=1)
        out = rollout_koopman_only(emb, init, steps=6)
        np.testing.assert_array_equal(out.data[:, 1:], decoded[:, 1:])


class TestEchoState:
    def test_spectral_radius_rescaled_to_config(self):
        cfg = EchoStateConfig(reservoir_size=200, spectral_radius=0.8, seed=4)
        model = EchoStateModel.build((3,), cfg)
        w = model.w_res.astype(np.float64)
        # power-iteration oracle: the geometric-mean growth factor of the
        # iterates converges to the dominant eigenvalue magnitude
        v = np.random.default_rng(0).standard_normal(200)
        growth = []
        for i in range(6000):
            v = w @ v
            nrm = np.linalg.norm(v)
            v /= nrm
            if i >= 3000:
                growth.append(np.log(nrm))
        assert float(np.exp(np.mean(growth))) == pytest.approx(0.8, abs=1e-3)
        # dense eigensolver pins the rescaling to the configured value
        rho = float(np.abs(np.linalg.eigvals(w)).max())
        assert rho == pytest.approx(0.8, abs=1e-6)

    def test_zero_input_zero_reservoir_stays_zero(self):
        model = EchoStateModel.build((3,), EchoStateConfig(reservoir_size=50, seed=0))
        r = np.zeros((2, 50), dtype=np.float32)
        u = np.zeros((2, 3), dtype=np.float32)
        r = model.update(r, u)
        assert np.array_equal(r, np.zeros((2, 50)))

    def test_ridge_fit_exactly_representable_targets(self):
        # targets generated by a known linear readout of reservoir states
        ds = small_dataset(count=4, n_steps=40)
        cfg = EchoStateConfig(reservoir_size=64, washout=4, ridge=1e-12, seed=7)
        model = EchoStateModel.build((3,), cfg)
        rng = np.random.default_rng(1)
        w_true = rng.standard_normal((3, 64))
        states = ds.norm.apply(ds.data, (3,)).astype(np.float64)
        r = np.zeros((4, 64))
        rows, ys = [], []
        for t in range(40):
            r = np.tanh(r @ model.w_res.T.astype(np.float64)
                        + states[:, t] @ model.w_in.T.astype(np.float64))
            if t >= 4:
                rows.append(r.copy())
                ys.append(r @ w_true.T)
        rows = np.concatenate(rows)
        ys = np.concatenate(ys)
        gram = rows.T @ rows + cfg.ridge * np.eye(64)
        w_fit = np.linalg.solve(gram, rows.T @ ys).T
        resid = np.abs(rows @ w_fit.T - ys).max()
        assert resid <= 1e-8

    def test_training_and_rollout(self):
        ds = small_dataset(count=8, n_steps=48)
        cfg = EchoStateConfig(reservoir_size=100, washout=4, max_series=8, seed=2)
        model, info = train_echo_state(ds, cfg)
        assert info["used_series"] == 8
        out = rollout_echo_state(model, ds.data[:3, 0], steps=10)
        assert out.data.shape == (3, 11, 3)
        np.testing.assert_array_equal(out.data[:, 0], ds.data[:3, 0])

    def test_deterministic_given_seed(self):
        ds = small_dataset(count=4, n_steps=32)
        cfg = EchoStateConfig(reservoir_size=80, washout=4, seed=5)
        m1, _ = train_echo_state(ds, cfg)
        m2, _ = train_echo_state(ds, cfg)
        assert np.array_equal(m1.w_out, m2.w_out)
        assert np.array_equal(m1.w_res, m2.w_res)

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            EchoStateConfig(spectral_radius=1.6)
        with pytest.raises(ConfigError):
            EchoStateConfig(ridge=0.0)

    def test_checkpoint_roundtrip(self, tmp_path):
        ds = small_dataset(count=4, n_steps=32)
        model, _ = train_echo_state(ds, EchoStateConfig(reservoir_size=60, washout=4, seed=1))
        model.save(tmp_path / "esn")
        back = EchoStateModel.load(tmp_path / "esn")
        assert np.array_equal(back.w_res, model.w_res)
        assert np.array_equal(back.w_in, model.w_in)
        assert np.array_equal(back.w_out, model.w_out)
        out_a = rollout_echo_state(model, ds.data[:1, 0], 5)
        out_b = rollout_echo_state(back, ds.data[:1, 0], 5)
        np.testing.assert_array_equal(out_a.data, out_b.data)
