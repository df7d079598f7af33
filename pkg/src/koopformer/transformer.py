"""Causal transformer decoder over latent trajectories.

A GPT-style stack of pre-norm decoder blocks (masked multi-head
self-attention plus a GELU feed-forward) predicts the next latent state
from a window of past ones. Inputs carry sinusoidal positional encodings
indexed relative to the window start, both in training and in the
sliding-window autoregressive rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionError, DivergenceError
from .optim import LrSchedule, OptimizerState, optimizer_step
from .params import ParamStore, gradient_of, make_rng, seeded_init

MASK_VALUE = -1e9


@dataclass
class TransformerConfig:
    embed_dim: int
    n_layers: int = 4
    n_heads: int = 4
    context_window: int = 64
    ff_width: int = None           # defaults to 4 * embed_dim
    dropout: float = 0.0
    positional_encoding: str = "sinusoidal"
    head_mode: str = "residual"    # residual: predict the next-state increment
    seed: int = 0

    def __post_init__(self):
        if self.ff_width is None:
            self.ff_width = 4 * self.embed_dim
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"n_heads {self.n_heads}")
        if self.context_window < 1:
            raise ConfigError(f"context_window must be >= 1, got {self.context_window}")
        if self.positional_encoding != "sinusoidal":
            raise ConfigError(f"unknown positional encoding {self.positional_encoding!r}")
        if self.head_mode not in ("residual", "affine"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "context_window": self.context_window,
            "ff_width": self.ff_width, "dropout": self.dropout,
            "positional_encoding": self.positional_encoding,
            "head_mode": self.head_mode, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def positional_encoding(length, d_model, dtype=np.float32):
    """Sinusoidal position table [length, d_model]:
    PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same)."""
    if length < 1:
        raise ConfigError(f"positional_encoding needs length >= 1, got {length}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(dtype)


class TransformerModel:
    """Decoder stack plus the affine head predicting the next latent."""

    def __init__(self, config):
        self.config = config
        self.store = ParamStore()
        self.training = True
        self.latent_mean = None  # standardization of the latent space, set at train time
        self.latent_std = None
        self._rng = make_rng(config.seed + 7919)
        self._build()
        self._pe = positional_encoding(config.context_window, config.embed_dim)

    def _build(self):
        cfg = self.config
        e, f = cfg.embed_dim, cfg.ff_width
        seed = cfg.seed
        out_scale = 0.02 / math.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            p = f"layer{i}"
            self.store.add(f"{p}.ln1.gain", np.ones(e, dtype=np.float32))
            self.store.add(f"{p}.ln1.bias", np.zeros(e, dtype=np.float32))
            self.store.add(f"{p}.attn.wqkv", seeded_init((e, 3 * e), "normal", seed + 11 * i + 1))
            self.store.add(f"{p}.attn.bqkv", np.zeros(3 * e, dtype=np.float32))
            self.store.add(f"{p}.attn.wo",
                           seeded_init((e, e), "normal", seed + 11 * i + 2, sigma=out_scale))
            self.store.add(f"{p}.attn.bo", np.zeros(e, dtype=np.float32))
            self.store.add(f"{p}.ln2.gain", np.ones(e, dtype=np.float32))
            self.store.add(f"{p}.ln2.bias", np.zeros(e, dtype=np.float32))
            self.store.add(f"{p}.ff.w1", seeded_init((e, f), "normal", seed + 11 * i + 3))
            self.store.add(f"{p}.ff.b1", np.zeros(f, dtype=np.float32))
            self.store.add(f"{p}.ff.w2",
                           seeded_init((f, e), "normal", seed + 11 * i + 4, sigma=out_scale))
            self.store.add(f"{p}.ff.b2", np.zeros(e, dtype=np.float32))
        self.store.add("ln_f.gain", np.ones(e, dtype=np.float32))
        self.store.add("ln_f.bias", np.zeros(e, dtype=np.float32))
        self.store.add("head.w", seeded_init((e, e), "normal", seed + 11 * cfg.n_layers + 5))
        self.store.add("head.b", np.zeros(e, dtype=np.float32))

    def n_parameters(self):
        return self.store.n_parameters()

    def train(self, flag=True):
        self.training = flag
        return self

    def save(self, path, extra_config=None):
        cfg = {"model": self.config.to_dict()}
        if self.latent_mean is not None:
            cfg["latent_stats"] = {"mean": self.latent_mean.tolist(),
                                   "std": self.latent_std.tolist()}
        if extra_config:
            cfg.update(extra_config)
        return save_checkpoint(path, "transformer", cfg, self.store)

    @classmethod
    def load(cls, path):
        kind, cfg, store = load_checkpoint(path)
        if kind != "transformer":
            raise ConfigError(f"expected a transformer checkpoint, found kind {kind!r}")
        model = cls(TransformerConfig.from_dict(cfg["model"]))
        for name, t in store.items():
            model.store.set_data(name, t.data)
        if cfg.get("latent_stats"):
            model.latent_mean = np.asarray(cfg["latent_stats"]["mean"], dtype=np.float32)
            model.latent_std = np.asarray(cfg["latent_stats"]["std"], dtype=np.float32)
        model.training = False
        return model

    # -- forward ---------------------------------------------------------
    def _attention(self, h, prefix, t):
        cfg = self.config
        e, n_heads = cfg.embed_dim, cfg.n_heads
        head_dim = e // n_heads
        b = h.shape[0]
        qkv = T.affine(h, self.store[f"{prefix}.wqkv"], self.store[f"{prefix}.bqkv"])
        qkv = qkv.reshape((b, t, 3, n_heads, head_dim)).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each [b, heads, t, head_dim]
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        mask = np.triu(np.full((t, t), MASK_VALUE, dtype=np.float32), k=1)
        weights = T.softmax(scores + T.Tensor(mask), axis=-1)
        weights = T.dropout(weights, cfg.dropout, self._rng, self.training)
        ctx = T.matmul(weights, v)  # [b, heads, t, head_dim]
        ctx = ctx.transpose(0, 2, 1, 3).reshape((b, t, e))
        return T.affine(ctx, self.store[f"{prefix}.wo"], self.store[f"{prefix}.bo"])

    def forward(self, latents):
        """Predict the next latent for every position of a [B, t, e] (or
        [t, e]) standardized latent window; strict causality via masking."""
        x = latents if isinstance(latents, T.Tensor) else T.Tensor(np.asarray(latents, dtype=np.float32))
        single = x.ndim == 2
        if single:
            x = x.reshape((1, *x.shape))
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.embed_dim:
            raise DimensionError.mismatch("decoder input", x.shape, ("B", "t", cfg.embed_dim))
        t = x.shape[1]
        if t > cfg.context_window:
            raise DimensionError(f"context overflow: window of {t} steps exceeds the "
                                 f"configured context of {cfg.context_window}")
        h = x + T.Tensor(self._pe[:t])
        h = T.dropout(h, cfg.dropout, self._rng, self.training)
        for i in range(cfg.n_layers):
            p = f"layer{i}"
            normed = T.layer_norm(h, self.store[f"{p}.ln1.gain"], self.store[f"{p}.ln1.bias"])
            h = h + self._attention(normed, f"{p}.attn", t)
            normed = T.layer_norm(h, self.store[f"{p}.ln2.gain"], self.store[f"{p}.ln2.bias"])
            ff = T.gelu(T.affine(normed, self.store[f"{p}.ff.w1"], self.store[f"{p}.ff.b1"]))
            ff = T.affine(ff, self.store[f"{p}.ff.w2"], self.store[f"{p}.ff.b2"])
            ff = T.dropout(ff, cfg.dropout, self._rng, self.training)
            h = h + ff
        h = T.layer_norm(h, self.store["ln_f.gain"], self.store["ln_f.bias"])
        out = T.affine(h, self.store["head.w"], self.store["head.b"])
        if cfg.head_mode == "residual":
            out = x + out
        return out[0] if single else out


def decoder_forward(model, latents):
    """Module-level alias of :meth:`TransformerModel.forward`."""
    return model.forward(latents)


def transformer_loss(model, windows):
    """Mean squared next-step prediction error over a batch of latent
    windows [B, t, e]: predictions at positions 0..t-2 against targets at
    1..t-1, averaged over batch, positions and dimensions."""
    data = windows.data if isinstance(windows, T.Tensor) else np.asarray(windows, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    if data.shape[1] < 2:
        raise ConfigError(f"transformer_loss needs windows of length >= 2, got {data.shape[1]}")
    pred = model.forward(T.Tensor(data[:, :-1]))
    return T.mse(pred, data[:, 1:])


@dataclass
class TransformerTrainConfig:
    epochs: int = 200
    batch_size: int = 64
    windows_per_epoch: int = 1   # window draws per series per epoch
    input_noise: float = 0.0     # std of Gaussian jitter on inputs (targets stay clean)
    noise_ramp: int = 8          # positions over which the jitter ramps up from 0
    short_window_fraction: float = 0.25  # batches drawn with a random length <= context
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    seed: int = 2


def train_transformer(model, embedded, cfg, log=None):
    """Autoregressive training on random contiguous windows of length
    context+1 sampled from the embedded training series.

    ``input_noise`` perturbs the decoder inputs only: the model then maps
    slightly off-manifold latents back toward the clean next state, which
    stabilizes long self-fed rollouts. The jitter ramps up from zero over
    the first ``noise_ramp`` positions, mirroring rollout conditions where
    the window starts from an exactly encoded state and accumulates
    self-generated error afterwards.
    """
    latents = (embedded.latents - embedded.mean) / embedded.std
    latents = latents.astype(np.float32)
    model.latent_mean = embedded.mean
    model.latent_std = embedded.std
    n_series, n_frames = latents.shape[:2]
    window = min(model.config.context_window + 1, n_frames)
    ramp = np.minimum(1.0, np.arange(window - 1) / max(cfg.noise_ramp, 1))
    ramp = ramp.astype(np.float32)[None, :, None]
    rng = make_rng(cfg.seed)
    state = OptimizerState(LrSchedule(cfg.lr, cfg.lr_decay, cfg.lr_decay_every))
    history = {"epoch": [], "loss": [], "lr": []}
    model.train(True)
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for _ in range(max(1, cfg.windows_per_epoch)):
            order = rng.permutation(n_series)
            for lo in range(0, n_series, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                length = window
                if cfg.short_window_fraction > 0.0 and rng.random() < cfg.short_window_fraction:
                    # short windows concentrate gradient on the short-context
                    # predictions a cold rollout starts from
                    length = int(rng.integers(2, window + 1))
                starts = rng.integers(0, n_frames - length + 1, size=len(idx))
                batch = np.stack([latents[i, s:s + length] for i, s in zip(idx, starts)])
                inputs = batch[:, :-1]
                if cfg.input_noise > 0.0:
                    jitter = rng.standard_normal(inputs.shape).astype(np.float32)
                    inputs = inputs + cfg.input_noise * ramp[:, :inputs.shape[1]] * jitter
                pred = model.forward(T.Tensor(inputs))
                loss = T.mse(pred, batch[:, 1:])
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite transformer loss at epoch {epoch}, batch {n_batches}",
                        step=(epoch, n_batches))
                grads = gradient_of(loss, model.store)
                optimizer_step(model.store, grads, state, epoch=epoch)
                epoch_loss += value
                n_batches += 1
        history["epoch"].append(epoch)
        history["loss"].append(epoch_loss / max(n_batches, 1))
        history["lr"].append(state.schedule.at(epoch))
        if log is not None and (epoch % 25 == 0 or epoch == cfg.epochs - 1):
            log(f"transformer epoch {epoch:4d}  loss {history['loss'][-1]:.6f}")
    model.train(False)
    return history


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

@dataclass
class RolloutResult:
    """Predicted trajectories [N, steps+1, *state_shape] (row 0 is the
    given initial state) plus per-series divergence flags."""

    data: np.ndarray
    diverged: np.ndarray   # bool [N]
    first_bad_step: np.ndarray  # int [N], -1 when finite throughout

    @property
    def any_diverged(self):
        return bool(self.diverged.any())


def rollout(model, embedder, initial_state, steps, batch=None):
    """Autoregressive prediction from physical initial state(s).

    Encodes the initial state, repeatedly appends the decoder's last-row
    prediction (keeping the most recent ``context_window`` latents once
    the sequence outgrows it), then decodes every latent back to state
    space. Returns a :class:`RolloutResult` of length steps + 1. A series
    whose prediction goes non-finite is frozen and flagged with the step
    index instead of aborting the batch.
    """
    if steps < 1:
        raise ConfigError(f"rollout needs steps >= 1, got {steps}")
    if model.latent_mean is None:
        raise ConfigError("rollout requires a trained transformer (latent stats missing)")
    if embedder.norm is None:
        raise ConfigError("rollout requires a trained embedder (state normalization missing)")
    states0 = np.asarray(initial_state, dtype=np.float32)
    state_shape = tuple(embedder.state_shape if hasattr(embedder, "state_shape")
                        else embedder.config.state_shape)
    single = states0.shape == state_shape
    if single:
        states0 = states0[None]
    n = states0.shape[0]
    k = model.config.context_window
    was_training = model.training
    model.train(False)
    with T.no_grad():
        normed = embedder.norm.apply(states0, state_shape).astype(np.float32)
        z0 = embedder.encode(normed).data
        z0 = (z0 - model.latent_mean) / model.latent_std
        context = [z0.astype(np.float32)]
        preds = []
        alive = np.ones(n, dtype=bool)
        first_bad = np.full(n, -1, dtype=np.int64)
        for step in range(steps):
            window = np.stack(context[-k:], axis=1)
            out = model.forward(T.Tensor(window)).data
            nxt = out[:, -1].copy()
            finite = np.isfinite(nxt).all(axis=1)
            newly_bad = alive & ~finite
            if newly_bad.any():
                first_bad[newly_bad] = step + 1
                alive &= finite
                nxt[~finite] = context[-1][~finite]  # freeze diverged series
            preds.append(nxt)
            context.append(nxt)
        latents = np.stack(context, axis=1)  # [n, steps+1, e]
        raw = latents * model.latent_std + model.latent_mean
        flat = raw.reshape(n * (steps + 1), -1)
        decoded = []
        chunk = max(1, 65536 // max(int(np.prod(state_shape)), 1))
        for lo in range(0, flat.shape[0], chunk):
            decoded.append(embedder.decode(flat[lo:lo + chunk]).data)
        decoded = np.concatenate(decoded).reshape(n, steps + 1, *state_shape)
        out_states = embedder.norm.invert(decoded, state_shape).astype(np.float32)
    out_states[:, 0] = states0  # row 0 is the provided initial state, exactly
    model.train(was_training)
    # the decoder can overflow even when the latent loop stayed finite
    finite = np.isfinite(out_states.reshape(n, -1)).all(axis=1)
    for i in np.nonzero(~finite)[0]:
        bad_rows = np.nonzero(~np.isfinite(out_states[i].reshape(steps + 1, -1)).all(axis=1))[0]
        if first_bad[i] < 0:
            first_bad[i] = int(bad_rows[0])
        out_states[i] = np.nan_to_num(out_states[i], nan=0.0, posinf=0.0, neginf=0.0)
    diverged = first_bad >= 0
    return RolloutResult(data=out_states, diverged=diverged, first_bad_step=first_bad)
