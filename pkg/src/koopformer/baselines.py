"""Comparison models trained under the same protocol as the transformer:
an autoregressive MLP, an LSTM, a pure linear-latent (Koopman-only)
predictor reusing the trained embedding, and an echo-state network with
a closed-form ridge readout.

All baselines consume the same dataset splits and normalization
statistics as the transformer; rollouts return the shared
:class:`~koopformer.transformer.RolloutResult` container.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats
from .embedding import koopman_matrix, koopman_rollout
from .errors import ConfigError, DivergenceError
from .optim import LrSchedule, OptimizerState, optimizer_step
from .params import ParamStore, gradient_of, make_rng, seeded_init
from .transformer import RolloutResult

BASELINE_KINDS = ("ar_mlp", "lstm", "koopman_only", "echo_state")


def _freeze_bad(series_latents):
    """Replace non-finite tail entries with the last finite row; returns
    (cleaned, first_bad_step[int per series])."""
    data = series_latents.copy()
    n, t = data.shape[:2]
    first_bad = np.full(n, -1, dtype=np.int64)
    finite = np.isfinite(data.reshape(n, t, -1)).all(axis=2)
    for i in range(n):
        bad = np.nonzero(~finite[i])[0]
        if bad.size:
            s = int(bad[0])
            first_bad[i] = s
            data[i, s:] = data[i, s - 1] if s > 0 else 0.0
    return data, first_bad


# ---------------------------------------------------------------------------
# autoregressive MLP
# ---------------------------------------------------------------------------

@dataclass
class ArMlpConfig:
    widths: tuple = (200, 200, 200)
    epochs: int = 300
    batch_size: int = 512
    pairs_per_epoch: int = 65536
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 75
    seed: int = 11

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if any(w <= 0 for w in self.widths):
            raise ConfigError("ar_mlp widths must be positive")
        if self.epochs > 500:
            raise ConfigError("baseline epochs capped at 500")


class ArMlpModel:
    """Residual one-step map: next = state + mlp(state), on normalized
    states. The final layer starts at zero, so an untrained model rolls
    out as a constant."""

    kind = "ar_mlp"

    def __init__(self, state_shape, config):
        self.config = config
        self.state_shape = tuple(state_shape)
        self.norm = None
        self.store = ParamStore()
        dim = int(np.prod(state_shape))
        widths = [dim, *config.widths, dim]
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            scheme = "zeros" if last else "uniform-fan-in"
            self.store.add(f"fc{i}.w", seeded_init((widths[i], widths[i + 1]), scheme,
                                                   config.seed + i))
            self.store.add(f"fc{i}.b", np.zeros(widths[i + 1], dtype=np.float32))
        self._n_layers = len(widths) - 1

    def n_parameters(self):
        return self.store.n_parameters()

    def predict(self, x):
        """One normalized step: [B, dim] -> [B, dim]."""
        h = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float32))
        inp = h
        for i in range(self._n_layers):
            h = T.affine(h, self.store[f"fc{i}.w"], self.store[f"fc{i}.b"])
            if i < self._n_layers - 1:
                h = T.relu(h)
        return inp + h

    def save(self, path):
        cfg = {"model": {"state_shape": list(self.state_shape), "widths": list(self.config.widths),
                         "seed": self.config.seed},
               "norm": _norm_dict(self.norm)}
        return save_checkpoint(path, "baseline:ar_mlp", cfg, self.store)

    @classmethod
    def load(cls, path):
        kind, cfg, store = load_checkpoint(path)
        if kind != "baseline:ar_mlp":
            raise ConfigError(f"expected an ar_mlp checkpoint, found {kind!r}")
        model = cls(cfg["model"]["state_shape"],
                    ArMlpConfig(widths=cfg["model"]["widths"], seed=cfg["model"]["seed"]))
        for name, t in store.items():
            model.store.set_data(name, t.data)
        model.norm = _norm_from(cfg.get("norm"))
        return model


def train_ar_mlp(dataset, config, log=None):
    """Fit the one-step residual map on (state, next-state) pairs."""
    model = ArMlpModel(dataset.spec.state_shape, config)
    model.norm = dataset.norm
    dim = int(np.prod(dataset.spec.state_shape))
    states = dataset.norm.apply(dataset.data, dataset.spec.state_shape).astype(np.float32)
    inputs = states[:, :-1].reshape(-1, dim)
    targets = states[:, 1:].reshape(-1, dim)
    rng = make_rng(config.seed)
    state = OptimizerState(LrSchedule(config.lr, config.lr_decay, config.lr_decay_every))
    history = {"epoch": [], "loss": []}
    n_pairs = min(config.pairs_per_epoch, inputs.shape[0])
    for epoch in range(config.epochs):
        pick = rng.choice(inputs.shape[0], size=n_pairs, replace=False)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n_pairs, config.batch_size):
            idx = pick[lo:lo + config.batch_size]
            loss = T.mse(model.predict(inputs[idx]), targets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite ar_mlp loss at epoch {epoch}", step=epoch)
            optimizer_step(model.store, gradient_of(loss, model.store), state, epoch=epoch)
            epoch_loss += value
            n_batches += 1
        history["epoch"].append(epoch)
        history["loss"].append(epoch_loss / n_batches)
        if log is not None and (epoch % 50 == 0 or epoch == config.epochs - 1):
            log(f"ar_mlp epoch {epoch:4d}  loss {history['loss'][-1]:.6f}")
    return model, history


def rollout_ar_mlp(model, initial_state, steps):
    """Iterated application of the learned one-step map."""
    states0 = np.asarray(initial_state, dtype=np.float32)
    single = states0.shape == model.state_shape
    if single:
        states0 = states0[None]
    n = states0.shape[0]
    dim = int(np.prod(model.state_shape))
    out = np.empty((n, steps + 1, dim), dtype=np.float32)
    out[:, 0] = model.norm.apply(states0, model.state_shape).reshape(n, dim)
    with T.no_grad():
        x = out[:, 0]
        for t in range(steps):
            x = model.predict(x).data
            out[:, t + 1] = x
    out, first_bad = _freeze_bad(out)
    data = model.norm.invert(out.reshape(n, steps + 1, *model.state_shape), model.state_shape)
    data[:, 0] = states0
    return RolloutResult(data=data.astype(np.float32), diverged=first_bad >= 0,
                         first_bad_step=first_bad)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmConfig:
    lift_dim: int = 64
    hidden: int = 128
    window: int = 64
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    seed: int = 12

    def __post_init__(self):
        if min(self.lift_dim, self.hidden) <= 0:
            raise ConfigError("lstm widths must be positive")
        if self.epochs > 500:
            raise ConfigError("baseline epochs capped at 500")


class LstmModel:
    """Affine input lift, one LSTM cell, affine head predicting the next
    normalized state directly (zero weights give the head bias)."""

    kind = "lstm"

    def __init__(self, state_shape, config):
        self.config = config
        self.state_shape = tuple(state_shape)
        self.norm = None
        self.store = ParamStore()
        dim = int(np.prod(state_shape))
        lift, hidden = config.lift_dim, config.hidden
        self.store.add("lift.w", seeded_init((dim, lift), "uniform-fan-in", config.seed))
        self.store.add("lift.b", np.zeros(lift, dtype=np.float32))
        self.store.add("cell.wx", seeded_init((lift, 4 * hidden), "uniform-fan-in", config.seed + 1))
        self.store.add("cell.wh", seeded_init((hidden, 4 * hidden), "uniform-fan-in", config.seed + 2))
        self.store.add("cell.b", np.zeros(4 * hidden, dtype=np.float32))
        self.store.add("head.w", seeded_init((hidden, dim), "uniform-fan-in", config.seed + 3))
        self.store.add("head.b", np.zeros(dim, dtype=np.float32))

    def n_parameters(self):
        return self.store.n_parameters()

    def cell(self, x, h, c):
        """One LSTM step; gate order (input, forget, cell, output)."""
        hidden = self.config.hidden
        gates = T.affine(x, self.store["cell.wx"]) + T.affine(h, self.store["cell.wh"]) \
            + self.store["cell.b"]
        i = T.sigmoid(gates[:, 0 * hidden:1 * hidden])
        f = T.sigmoid(gates[:, 1 * hidden:2 * hidden])
        g = T.tanh(gates[:, 2 * hidden:3 * hidden])
        o = T.sigmoid(gates[:, 3 * hidden:4 * hidden])
        c_next = f * c + i * g
        h_next = o * T.tanh(c_next)
        return h_next, c_next

    def step(self, x, h, c):
        """Lift -> cell -> head; returns (prediction, h, c)."""
        lifted = T.affine(x, self.store["lift.w"], self.store["lift.b"])
        h, c = self.cell(lifted, h, c)
        pred = T.affine(h, self.store["head.w"], self.store["head.b"])
        return pred, h, c

    def forward_window(self, windows):
        """Teacher-forced predictions for [B, W, dim] inputs."""
        x = windows if isinstance(windows, T.Tensor) else T.Tensor(np.asarray(windows, dtype=np.float32))
        b, w = x.shape[0], x.shape[1]
        hidden = self.config.hidden
        h = T.Tensor(np.zeros((b, hidden), dtype=np.float32))
        c = T.Tensor(np.zeros((b, hidden), dtype=np.float32))
        preds = []
        for t in range(w):
            pred, h, c = self.step(x[:, t], h, c)
            preds.append(pred)
        return T.stack(preds, axis=1)

    def save(self, path):
        cfg = {"model": {"state_shape": list(self.state_shape),
                         "lift_dim": self.config.lift_dim, "hidden": self.config.hidden,
                         "seed": self.config.seed},
               "norm": _norm_dict(self.norm)}
        return save_checkpoint(path, "baseline:lstm", cfg, self.store)

    @classmethod
    def load(cls, path):
        kind, cfg, store = load_checkpoint(path)
        if kind != "baseline:lstm":
            raise ConfigError(f"expected an lstm checkpoint, found {kind!r}")
        m = cfg["model"]
        model = cls(m["state_shape"], LstmConfig(lift_dim=m["lift_dim"], hidden=m["hidden"],
                                                 seed=m["seed"]))
        for name, t in store.items():
            model.store.set_data(name, t.data)
        model.norm = _norm_from(cfg.get("norm"))
        return model


def train_lstm(dataset, config, log=None):
    """Teacher-forced next-step training over random sub-windows."""
    model = LstmModel(dataset.spec.state_shape, config)
    model.norm = dataset.norm
    dim = int(np.prod(dataset.spec.state_shape))
    states = dataset.norm.apply(dataset.data, dataset.spec.state_shape).astype(np.float32)
    states = states.reshape(states.shape[0], states.shape[1], dim)
    n_series, n_frames = states.shape[:2]
    window = min(config.window + 1, n_frames)
    rng = make_rng(config.seed)
    state = OptimizerState(LrSchedule(config.lr, config.lr_decay, config.lr_decay_every))
    history = {"epoch": [], "loss": []}
    for epoch in range(config.epochs):
        order = rng.permutation(n_series)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n_series, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            starts = rng.integers(0, n_frames - window + 1, size=len(idx))
            batch = np.stack([states[i, s:s + window] for i, s in zip(idx, starts)])
            preds = model.forward_window(batch[:, :-1])
            loss = T.mse(preds, batch[:, 1:])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite lstm loss at epoch {epoch}", step=epoch)
            optimizer_step(model.store, gradient_of(loss, model.store), state, epoch=epoch)
            epoch_loss += value
            n_batches += 1
        history["epoch"].append(epoch)
        history["loss"].append(epoch_loss / n_batches)
        if log is not None and (epoch % 50 == 0 or epoch == config.epochs - 1):
            log(f"lstm epoch {epoch:4d}  loss {history['loss'][-1]:.6f}")
    return model, history


def rollout_lstm(model, initial_state, steps):
    """Generative rollout carrying the hidden state through."""
    states0 = np.asarray(initial_state, dtype=np.float32)
    single = states0.shape == model.state_shape
    if single:
        states0 = states0[None]
    n = states0.shape[0]
    dim = int(np.prod(model.state_shape))
    hidden = model.config.hidden
    out = np.empty((n, steps + 1, dim), dtype=np.float32)
    out[:, 0] = model.norm.apply(states0, model.state_shape).reshape(n, dim)
    with T.no_grad():
        h = T.Tensor(np.zeros((n, hidden), dtype=np.float32))
        c = T.Tensor(np.zeros((n, hidden), dtype=np.float32))
        x = T.Tensor(out[:, 0])
        for t in range(steps):
            x, h, c = model.step(x, h, c)
            out[:, t + 1] = x.data
    out, first_bad = _freeze_bad(out)
    data = model.norm.invert(out.reshape(n, steps + 1, *model.state_shape), model.state_shape)
    data[:, 0] = states0
    return RolloutResult(data=data.astype(np.float32), diverged=first_bad >= 0,
                         first_bad_step=first_bad)


# ---------------------------------------------------------------------------
# Koopman-only
# ---------------------------------------------------------------------------

def rollout_koopman_only(embedder, initial_state, steps):
    """Pure linear latent rollout through the trained embedding:
    decode(K^t encode(state)). Accurate early, unstable late."""
    if embedder.norm is None:
        raise ConfigError("koopman-only rollout needs a trained embedding")
    if embedder.koopman is None:
        raise ConfigError("koopman-only rollout needs a koopman-variant embedding")
    state_shape = tuple(embedder.config.state_shape)
    states0 = np.asarray(initial_state, dtype=np.float32)
    single = states0.shape == state_shape
    if single:
        states0 = states0[None]
    n = states0.shape[0]
    with T.no_grad():
        normed = embedder.norm.apply(states0, state_shape).astype(np.float32)
        z0 = embedder.encode(normed).data
        matrix = koopman_matrix(embedder.koopman)
        latents = koopman_rollout(matrix, z0, steps)
        latents, first_bad = _freeze_bad(latents)
        flat = latents.reshape(n * (steps + 1), -1)
        decoded = []
        chunk = max(1, 65536 // max(int(np.prod(state_shape)), 1))
        for lo in range(0, flat.shape[0], chunk):
            decoded.append(embedder.decode(flat[lo:lo + chunk]).data)
        decoded = np.concatenate(decoded).reshape(n, steps + 1, *state_shape)
        data = embedder.norm.invert(decoded, state_shape).astype(np.float32)
    data[:, 0] = states0
    return RolloutResult(data=data, diverged=first_bad >= 0, first_bad_step=first_bad)


# ---------------------------------------------------------------------------
# echo-state network
# ---------------------------------------------------------------------------

@dataclass
class EchoStateConfig:
    reservoir_size: int = 2500
    spectral_radius: float = 0.9
    input_scaling: float = 0.5
    ridge: float = 1e-6
    washout: int = 32
    max_series: int = 256
    seed: int = 13

    def __post_init__(self):
        if not 0.0 < self.spectral_radius < 1.5:
            raise ConfigError(f"spectral_radius must be in (0, 1.5), got {self.spectral_radius}")
        if self.ridge <= 0:
            raise ConfigError("ridge coefficient must be positive")
        if self.reservoir_size <= 0:
            raise ConfigError("reservoir_size must be positive")


def spectral_radius(matrix):
    """Magnitude of the dominant eigenvalue (dense or Arnoldi for large n)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if n < 64:
        return float(np.abs(np.linalg.eigvals(matrix)).max())
    vals = scipy.sparse.linalg.eigs(matrix, k=1, which="LM", return_eigenvectors=False,
                                    v0=np.ones(n), maxiter=50 * n)
    return float(np.abs(vals[0]))


class EchoStateModel:
    """Fixed random reservoir, tanh update, ridge-regressed linear readout.

    reservoir update: r' = tanh(W r + W_in u); readout: y = W_out r.
    The reservoir and input matrices are persisted so inference is
    reproducible without the construction seed.
    """

    kind = "echo_state"

    def __init__(self, state_shape, config, w_res, w_in, w_out=None, norm=None):
        self.config = config
        self.state_shape = tuple(state_shape)
        # C-contiguous copies so inference is bit-reproducible across
        # checkpoint round-trips (BLAS paths depend on memory layout)
        self.w_res = np.ascontiguousarray(w_res, dtype=np.float32)
        self.w_in = np.ascontiguousarray(w_in, dtype=np.float32)
        dim = int(np.prod(state_shape))
        self.w_out = (np.zeros((dim, config.reservoir_size), dtype=np.float32)
                      if w_out is None else np.ascontiguousarray(w_out, dtype=np.float32))
        self.norm = norm

    @classmethod
    def build(cls, state_shape, config):
        """Construct the fixed reservoir; the spectral radius is rescaled
        to the configured value at construction."""
        n = config.reservoir_size
        dim = int(np.prod(state_shape))
        rng = make_rng(config.seed)
        w_res = rng.standard_normal((n, n)) / np.sqrt(n)
        rho = spectral_radius(w_res)
        w_res *= config.spectral_radius / rho
        w_in = rng.uniform(-1.0, 1.0, size=(n, dim)) * config.input_scaling
        return cls(state_shape, config, w_res, w_in)

    def n_parameters(self, trainable_only=True):
        if trainable_only:
            return self.w_out.size
        return self.w_out.size + self.w_res.size + self.w_in.size

    def n_fixed_parameters(self):
        return self.w_res.size + self.w_in.size

    def update(self, r, u):
        """Batched reservoir update; r is [B, n], u is [B, dim]."""
        return np.tanh(r @ self.w_res.T + u @ self.w_in.T)

    def save(self, path):
        store = ParamStore()
        store.add("w_res", self.w_res, trainable=False)
        store.add("w_in", self.w_in, trainable=False)
        store.add("w_out", self.w_out, trainable=True)
        cfg = {"model": {"state_shape": list(self.state_shape),
                         "reservoir_size": self.config.reservoir_size,
                         "spectral_radius": self.config.spectral_radius,
                         "input_scaling": self.config.input_scaling,
                         "ridge": self.config.ridge, "washout": self.config.washout,
                         "seed": self.config.seed},
               "norm": _norm_dict(self.norm)}
        return save_checkpoint(path, "baseline:echo_state", cfg, store)

    @classmethod
    def load(cls, path):
        kind, cfg, store = load_checkpoint(path)
        if kind != "baseline:echo_state":
            raise ConfigError(f"expected an echo_state checkpoint, found {kind!r}")
        m = cfg["model"]
        config = EchoStateConfig(reservoir_size=m["reservoir_size"],
                                 spectral_radius=m["spectral_radius"],
                                 input_scaling=m["input_scaling"], ridge=m["ridge"],
                                 washout=m["washout"], seed=m["seed"])
        return cls(m["state_shape"], config, store["w_res"].data, store["w_in"].data,
                   w_out=store["w_out"].data, norm=_norm_from(cfg.get("norm")))


def train_echo_state(dataset, config, log=None):
    """Drive the reservoir with training series and fit the readout by
    ridge regression in closed form (deterministic given seed and config)."""
    model = EchoStateModel.build(dataset.spec.state_shape, config)
    model.norm = dataset.norm
    dim = int(np.prod(dataset.spec.state_shape))
    states = dataset.norm.apply(dataset.data, dataset.spec.state_shape).astype(np.float64)
    states = states.reshape(states.shape[0], states.shape[1], dim)
    used = min(len(states), config.max_series)
    series = states[:used]
    n_frames = series.shape[1]
    if n_frames - 1 <= config.washout:
        raise ConfigError("series too short for the configured washout")
    n = config.reservoir_size
    w_res = model.w_res.astype(np.float64)
    w_in = model.w_in.astype(np.float64)
    gram = np.zeros((n, n))
    cross = np.zeros((dim, n))
    r = np.zeros((used, n))
    block_r, block_y = [], []

    def flush():
        nonlocal gram, cross
        if not block_r:
            return
        rr = np.concatenate(block_r)
        yy = np.concatenate(block_y)
        gram += rr.T @ rr
        cross += yy.T @ rr
        block_r.clear()
        block_y.clear()

    for t in range(n_frames - 1):
        r = np.tanh(r @ w_res.T + series[:, t] @ w_in.T)
        if t >= config.washout:
            block_r.append(r)
            block_y.append(series[:, t + 1])
        if len(block_r) >= 16:
            flush()
    flush()
    w_out = np.linalg.solve(gram + config.ridge * np.eye(n), cross.T).T
    model.w_out = np.ascontiguousarray(w_out, dtype=np.float32)
    if log is not None:
        resid = float(np.trace(w_out @ gram @ w_out.T) - 2 * np.trace(cross @ w_out.T))
        log(f"echo_state readout fit on {used} series (quadratic residual term {resid:.4e})")
    return model, {"used_series": used}


def rollout_echo_state(model, initial_state, steps):
    """Generative-mode prediction: the readout output feeds back as the
    next input."""
    states0 = np.asarray(initial_state, dtype=np.float32)
    single = states0.shape == model.state_shape
    if single:
        states0 = states0[None]
    n_series = states0.shape[0]
    dim = int(np.prod(model.state_shape))
    out = np.empty((n_series, steps + 1, dim), dtype=np.float32)
    out[:, 0] = model.norm.apply(states0, model.state_shape).reshape(n_series, dim)
    r = np.zeros((n_series, model.config.reservoir_size), dtype=np.float32)
    u = out[:, 0]
    for t in range(steps):
        r = model.update(r, u)
        u = r @ model.w_out.T
        out[:, t + 1] = u
    out, first_bad = _freeze_bad(out)
    data = model.norm.invert(out.reshape(n_series, steps + 1, *model.state_shape),
                             model.state_shape)
    data[:, 0] = states0
    return RolloutResult(data=data.astype(np.float32), diverged=first_bad >= 0,
                         first_bad_step=first_bad)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _norm_dict(norm):
    if norm is None:
        return None
    return {"mean": norm.mean.tolist(), "std": norm.std.tolist()}


def _norm_from(d):
    if not d:
        return None
    return NormStats(np.asarray(d["mean"]), np.asarray(d["std"]))
