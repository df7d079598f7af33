"""Learned state <-> latent maps with a linear-dynamics prior.

The embedding model is an encoder/decoder pair trained so that latent
trajectories approximately follow linear dynamics under a learnable
operator: a symmetric banded matrix (optionally predicted from equation
parameters by two small conditioner networks). Low-dimensional vector
states use a fully connected autoencoder; gridded fields use a strided
convolutional encoder with an upsample-then-convolve decoder.

The training loss combines reconstruction, a latent linear-dynamics
rollout term and a norm decay on the operator. The ``plain_ae`` variant
keeps the same architecture but drops the dynamics and decay terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats
from .errors import ConfigError, DimensionError, DivergenceError
from .optim import LrSchedule, OptimizerState, optimizer_step
from .params import ParamStore, gradient_of, make_rng, seeded_init

VARIANTS = ("koopman", "plain_ae")


def default_half_bandwidth(embed_dim):
    return 10 if embed_dim == 32 else math.ceil(embed_dim / 3)


# ---------------------------------------------------------------------------
# Koopman operator
# ---------------------------------------------------------------------------

class KoopmanOperator:
    """Symmetric banded latent-propagation operator.

    Free parameters are the diagonal plus one shared vector per
    off-diagonal offset up to ``half_bandwidth``. With a conditioner,
    two fully connected networks map equation parameters to the diagonal
    and off-diagonal values instead.
    """

    def __init__(self, store, embed_dim, half_bandwidth, seed=0,
                 conditioner_dim=None, conditioner_hidden=50, prefix="koopman"):
        if not 0 <= half_bandwidth < embed_dim:
            raise ConfigError(f"half_bandwidth must be in [0, {embed_dim}), got {half_bandwidth}")
        self.embed_dim = embed_dim
        self.half_bandwidth = half_bandwidth
        self.conditioner_dim = conditioner_dim
        self.store = store
        self.prefix = prefix
        e, w = embed_dim, half_bandwidth
        self.n_band_values = sum(e - o for o in range(1, w + 1))
        if conditioner_dim is None:
            store.add(f"{prefix}.diag", seeded_init((e,), "identity-like", seed))
            for o in range(1, w + 1):
                store.add(f"{prefix}.band{o}", seeded_init((e - o,), "zeros", seed))
        else:
            p, h = conditioner_dim, conditioner_hidden
            store.add(f"{prefix}.diag_net.w1", seeded_init((p, h), "uniform-fan-in", seed))
            store.add(f"{prefix}.diag_net.b1", seeded_init((h,), "zeros", seed))
            store.add(f"{prefix}.diag_net.w2", seeded_init((h, e), "uniform-fan-in", seed + 1))
            store.add(f"{prefix}.diag_net.b2", seeded_init((e,), "identity-like", seed))
            store.add(f"{prefix}.band_net.w1", seeded_init((p, h), "uniform-fan-in", seed + 2))
            store.add(f"{prefix}.band_net.b1", seeded_init((h,), "zeros", seed))
            store.add(f"{prefix}.band_net.w2",
                      seeded_init((h, self.n_band_values), "uniform-fan-in", seed + 3))
            store.add(f"{prefix}.band_net.b2", seeded_init((self.n_band_values,), "zeros", seed))

    @property
    def n_free_parameters(self):
        return self.embed_dim + self.n_band_values

    def matrix(self, cond=None):
        """Materialize the operator as a Tensor; symmetric and banded by
        construction for every parameter setting."""
        e, w = self.embed_dim, self.half_bandwidth
        p = self.prefix
        if self.conditioner_dim is None:
            diag = self.store[f"{p}.diag"]
            bands = [self.store[f"{p}.band{o}"] for o in range(1, w + 1)]
        else:
            if cond is None:
                raise ConfigError("conditioned Koopman operator requires equation parameters")
            cond = T.as_tensor(np.asarray(cond, dtype=np.float32).reshape(-1))
            if cond.shape[0] != self.conditioner_dim:
                raise DimensionError.mismatch("koopman conditioner", cond.shape,
                                              (self.conditioner_dim,))
            hd = T.relu(T.affine(cond, self.store[f"{p}.diag_net.w1"],
                                 self.store[f"{p}.diag_net.b1"]))
            diag = T.affine(hd, self.store[f"{p}.diag_net.w2"], self.store[f"{p}.diag_net.b2"])
            hb = T.relu(T.affine(cond, self.store[f"{p}.band_net.w1"],
                                 self.store[f"{p}.band_net.b1"]))
            flat = T.affine(hb, self.store[f"{p}.band_net.w2"], self.store[f"{p}.band_net.b2"])
            bands = []
            start = 0
            for o in range(1, w + 1):
                bands.append(flat[start:start + (e - o)])
                start += e - o
        return T.banded_symmetric(diag, bands)


def koopman_matrix(operator, cond=None):
    """Materialized [e, e] operator as numpy (graph-free)."""
    with T.no_grad():
        return operator.matrix(cond).data.copy()


def koopman_rollout(matrix, latent0, steps):
    """Rows t = K^t latent0 for t = 0..steps, by repeated multiplication.

    ``latent0`` may be [e] or [B, e]; output gains a time axis of length
    steps + 1 after the batch axis.
    """
    matrix = np.asarray(matrix)
    latent0 = np.asarray(latent0)
    single = latent0.ndim == 1
    z = latent0[None] if single else latent0
    out = np.empty((z.shape[0], steps + 1, z.shape[1]), dtype=latent0.dtype)
    out[:, 0] = z
    for t in range(steps):
        z = z @ matrix.T
        out[:, t + 1] = z
    return out[0] if single else out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingConfig:
    state_shape: tuple
    embed_dim: int
    variant: str = "koopman"
    arch: str = "dense"            # dense | conv
    hidden: tuple = (128, 64)      # dense encoder widths
    channels: tuple = (16, 32, 48, 64)  # conv stage output channels
    half_bandwidth: int = None
    conditioner_dim: int = None
    pad_mode: str = "wrap"
    seed: int = 0

    def __post_init__(self):
        self.state_shape = tuple(int(s) for s in self.state_shape)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown embedding variant {self.variant!r}")
        if self.arch not in ("dense", "conv"):
            raise ConfigError(f"unknown embedding arch {self.arch!r}")
        if self.half_bandwidth is None:
            self.half_bandwidth = default_half_bandwidth(self.embed_dim)
        if self.arch == "conv" and len(self.state_shape) < 3:
            raise ConfigError("conv embedding needs a channel axis plus >= 2 spatial axes")

    def to_dict(self):
        return {
            "state_shape": list(self.state_shape), "embed_dim": self.embed_dim,
            "variant": self.variant, "arch": self.arch, "hidden": list(self.hidden),
            "channels": list(self.channels), "half_bandwidth": self.half_bandwidth,
            "conditioner_dim": self.conditioner_dim, "pad_mode": self.pad_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["state_shape"] = tuple(d["state_shape"])
        d["hidden"] = tuple(d["hidden"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class EmbeddingModel:
    """Encoder/decoder with a learnable linear latent propagator."""

    def __init__(self, config):
        self.config = config
        self.store = ParamStore()
        self.training = True
        self.norm = None  # NormStats of the dataset the model was trained on
        self._seed_counter = config.seed
        if config.arch == "dense":
            self._build_dense()
        else:
            self._build_conv()
        self.koopman = KoopmanOperator(
            self.store, config.embed_dim, config.half_bandwidth,
            seed=self._next_seed(), conditioner_dim=config.conditioner_dim)

    # -- construction ----------------------------------------------------
    def _next_seed(self):
        self._seed_counter += 1
        return self._seed_counter

    def _affine(self, name, n_in, n_out):
        self.store.add(f"{name}.w", seeded_init((n_in, n_out), "uniform-fan-in", self._next_seed()))
        self.store.add(f"{name}.b", seeded_init((n_out,), "zeros", 0))

    def _conv(self, name, c_in, c_out, kernel=3, norm=True):
        nd = len(self.config.state_shape) - 1
        self.store.add(f"{name}.w",
                       seeded_init((c_in * kernel ** nd, c_out), "uniform-fan-in", self._next_seed()))
        self.store.add(f"{name}.b", seeded_init((c_out,), "zeros", 0))
        if norm:
            self.store.add(f"{name}.bn.gain", np.ones(c_out, dtype=np.float32))
            self.store.add(f"{name}.bn.bias", np.zeros(c_out, dtype=np.float32))
            self.store.add(f"{name}.bn.mean", np.zeros(c_out, dtype=np.float32), trainable=False)
            self.store.add(f"{name}.bn.var", np.ones(c_out, dtype=np.float32), trainable=False)

    def _build_dense(self):
        cfg = self.config
        state_dim = int(np.prod(cfg.state_shape))
        widths = [state_dim, *cfg.hidden, cfg.embed_dim]
        for i in range(len(widths) - 1):
            self._affine(f"enc{i}", widths[i], widths[i + 1])
        widths = widths[::-1]
        for i in range(len(widths) - 1):
            self._affine(f"dec{i}", widths[i], widths[i + 1])
        self._n_stages = len(cfg.hidden) + 1

    def _build_conv(self):
        cfg = self.config
        channels = [cfg.state_shape[0], *cfg.channels]
        spatial = np.asarray(cfg.state_shape[1:])
        strides = self._conv_strides()
        for i in range(len(cfg.channels)):
            self._conv(f"enc{i}", channels[i], channels[i + 1])
            spatial = -(-spatial // strides[i])
        self._reduced_spatial = tuple(int(s) for s in spatial)
        flat = int(cfg.channels[-1] * np.prod(spatial))
        self._affine("enc_head", flat, cfg.embed_dim)
        self._affine("dec_head", cfg.embed_dim, flat)
        rev = channels[::-1]
        for i in range(len(cfg.channels) - 1):
            self._conv(f"dec{i}", rev[i], rev[i + 1])
        self._conv(f"dec{len(cfg.channels) - 1}", rev[-2], rev[-1], norm=False)

    def _conv_strides(self):
        # first stage keeps resolution; the remaining stages halve it
        return [1] + [2] * (len(self.config.channels) - 1)

    # -- persistence -------------------------------------------------------
    @property
    def variant(self):
        return self.config.variant

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def n_parameters(self):
        return self.store.n_parameters()

    def train(self, flag=True):
        self.training = flag
        return self

    def save(self, path, extra_config=None):
        cfg = {"model": self.config.to_dict()}
        if self.norm is not None:
            cfg["norm"] = {"mean": self.norm.mean.tolist(), "std": self.norm.std.tolist()}
        if extra_config:
            cfg.update(extra_config)
        return save_checkpoint(path, "embedding", cfg, self.store)

    @classmethod
    def load(cls, path, expected_kind="embedding"):
        kind, cfg, store = load_checkpoint(path)
        if kind != expected_kind:
            raise ConfigError(f"expected a {expected_kind} checkpoint, found kind {kind!r}")
        if cfg["model"].get("variant") == "pca":
            raise ConfigError("this checkpoint holds a PCA embedder; load it with pca.PcaEmbedder")
        model = cls(EmbeddingConfig.from_dict(cfg["model"]))
        for name, t in store.items():
            model.store.set_data(name, t.data)
        if cfg.get("norm"):
            model.norm = NormStats(np.asarray(cfg["norm"]["mean"]),
                                   np.asarray(cfg["norm"]["std"]))
        model.training = False
        return model

    # -- forward -----------------------------------------------------------
    def _as_batch(self, x, expected_shape):
        data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float32)
        if data.shape == tuple(expected_shape):
            t = x if isinstance(x, T.Tensor) else T.Tensor(data)
            return t.reshape((1, *expected_shape)), True
        if data.shape[1:] == tuple(expected_shape) and data.ndim == len(expected_shape) + 1:
            return x if isinstance(x, T.Tensor) else T.Tensor(data), False
        raise DimensionError.mismatch("embedding input", data.shape, expected_shape)

    def encode(self, state):
        """Map [*state_shape] or [B, *state_shape] to latent [e] / [B, e]."""
        x, single = self._as_batch(state, self.config.state_shape)
        z = self._encode_batch(x)
        return z[0] if single else z

    def decode(self, latent):
        """Inverse map of :meth:`encode`."""
        z, single = self._as_batch(latent, (self.config.embed_dim,))
        x = self._decode_batch(z)
        return x[0] if single else x

    def _encode_batch(self, x):
        if self.config.arch == "dense":
            h = x.reshape((x.shape[0], -1))
            for i in range(self._n_stages):
                h = T.affine(h, self.store[f"enc{i}.w"], self.store[f"enc{i}.b"])
                if i < self._n_stages - 1:
                    h = T.relu(h)
            return h
        strides = self._conv_strides()
        h = x
        for i in range(len(self.config.channels)):
            h = self._conv_block(f"enc{i}", h, strides[i])
        h = h.reshape((h.shape[0], -1))
        return T.affine(h, self.store["enc_head.w"], self.store["enc_head.b"])

    def _decode_batch(self, z):
        cfg = self.config
        if cfg.arch == "dense":
            h = z
            for i in range(self._n_stages):
                h = T.affine(h, self.store[f"dec{i}.w"], self.store[f"dec{i}.b"])
                if i < self._n_stages - 1:
                    h = T.relu(h)
            return h.reshape((z.shape[0], *cfg.state_shape))
        h = T.affine(z, self.store["dec_head.w"], self.store["dec_head.b"])
        h = T.leaky_relu(h)
        h = h.reshape((z.shape[0], cfg.channels[-1], *self._reduced_spatial))
        n_stages = len(cfg.channels)
        for i in range(n_stages):
            if i < n_stages - 1:
                h = T.upsample_nearest(h, 2)
                h = self._conv_block(f"dec{i}", h, 1)
            else:
                h = self._plain_conv(f"dec{i}", h, 1)
        return h

    def _plain_conv(self, name, h, stride):
        nd = len(self.config.state_shape) - 1
        return T.conv_nd(h, self.store[f"{name}.w"], self.store[f"{name}.b"],
                         kernel=(3,) * nd, stride=stride, pad_mode=self.config.pad_mode)

    def _conv_block(self, name, h, stride):
        h = self._plain_conv(name, h, stride)
        h = T.batch_norm(h, self.store[f"{name}.bn.gain"], self.store[f"{name}.bn.bias"],
                         self.store[f"{name}.bn.mean"].data, self.store[f"{name}.bn.var"].data,
                         training=self.training)
        return T.leaky_relu(h)

    def koopman_matrix(self, cond=None):
        return self.koopman.matrix(cond)


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def embedding_loss(model, window, lambda_recon, lambda_dynamics, lambda_decay, cond=None):
    """Weighted sum of reconstruction, latent linear-dynamics and operator
    decay terms over a [B, W, *state_shape] window of normalized states.

    Per-step terms are mean squared errors over batch and state entries,
    summed over the window. The ``plain_ae`` variant zeroes the dynamics
    and decay weights.
    """
    if min(lambda_recon, lambda_dynamics, lambda_decay) < 0:
        raise ConfigError("loss weights must be non-negative")
    if model.variant == "plain_ae":
        lambda_dynamics = 0.0
        lambda_decay = 0.0
    window = window.data if isinstance(window, T.Tensor) else np.asarray(window, dtype=np.float32)
    if window.ndim != 2 + len(model.config.state_shape):
        raise DimensionError.mismatch("embedding_loss window", window.shape,
                                      ("B", "W") + model.config.state_shape)
    b, w = window.shape[:2]
    if w < 2:
        raise ConfigError(f"embedding_loss needs windows of length >= 2, got {w}")
    flat = T.Tensor(window.reshape(b * w, *model.config.state_shape))
    latents = model._encode_batch(flat)
    recon = model._decode_batch(latents)
    loss = T.mse(recon, flat) * float(lambda_recon * w)
    if lambda_dynamics > 0.0 or lambda_decay > 0.0:
        matrix = model.koopman_matrix(cond)
        if lambda_dynamics > 0.0:
            z = latents.reshape((b, w, model.embed_dim))[:, 0]
            steps = [z]
            for _ in range(w - 1):
                z = T.matmul(z, matrix)  # symmetric operator: z K == (K z^T)^T
                steps.append(z)
            rolled = T.stack(steps, axis=1).reshape((b * w, model.embed_dim))
            dyn = model._decode_batch(rolled)
            loss = loss + T.mse(dyn, flat) * float(lambda_dynamics * w)
        if lambda_decay > 0.0:
            loss = loss + (matrix * matrix).sum() * float(lambda_decay)
    return loss


@dataclass
class EmbeddingTrainConfig:
    epochs: int = 300
    batch_size: int = 64
    window: int = 64
    windows_per_epoch: int = 1   # sub-window draws per series per epoch
    lambda_recon: float = 1.0
    lambda_dynamics: float = 1.0
    lambda_decay: float = None   # defaults to 0.1 / embed_dim
    ramp_epochs: int = 50
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 75
    seed: int = 1


def train_embedding(model, dataset, cfg, log=None):
    """Minimize the embedding loss over random sub-windows of the training
    series. Returns a history dict; the model is left in eval mode with
    the dataset's normalization attached."""
    if dataset.norm is None:
        raise ConfigError("train_embedding expects a dataset with normalization stats")
    model.norm = dataset.norm
    spec = dataset.spec
    states = dataset.norm.apply(dataset.data, spec.state_shape).astype(np.float32)
    n_series, n_frames = states.shape[:2]
    window = min(cfg.window, n_frames)
    lambda_decay = cfg.lambda_decay if cfg.lambda_decay is not None else 0.1 / model.embed_dim
    rng = make_rng(cfg.seed)
    state = OptimizerState(LrSchedule(cfg.lr, cfg.lr_decay, cfg.lr_decay_every))
    history = {"epoch": [], "loss": [], "lr": []}
    model.train(True)
    for epoch in range(cfg.epochs):
        ramp = 1.0 if cfg.ramp_epochs <= 0 else 0.5 + 0.5 * min(1.0, epoch / cfg.ramp_epochs)
        lam_dyn = cfg.lambda_dynamics * ramp
        epoch_loss = 0.0
        n_batches = 0
        for _ in range(max(1, cfg.windows_per_epoch)):
            order = rng.permutation(n_series)
            for lo in range(0, n_series, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                starts = rng.integers(0, n_frames - window + 1, size=len(idx))
                batch = np.stack([states[i, s:s + window] for i, s in zip(idx, starts)])
                loss = embedding_loss(model, batch, cfg.lambda_recon, lam_dyn, lambda_decay)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite embedding loss at epoch {epoch}, batch {n_batches}",
                        step=(epoch, n_batches))
                grads = gradient_of(loss, model.store)
                optimizer_step(model.store, grads, state, epoch=epoch)
                epoch_loss += value
                n_batches += 1
        history["epoch"].append(epoch)
        history["loss"].append(epoch_loss / max(n_batches, 1))
        history["lr"].append(state.schedule.at(epoch))
        if log is not None and (epoch % 25 == 0 or epoch == cfg.epochs - 1):
            log(f"embedding epoch {epoch:4d}  loss {history['loss'][-1]:.6f}")
    model.train(False)
    return history


# ---------------------------------------------------------------------------
# dataset embedding
# ---------------------------------------------------------------------------

@dataclass
class EmbeddedDataset:
    """Latent trajectories [count, T+1, e] plus standardization stats."""

    latents: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    source_split: str = "train"

    def __len__(self):
        return self.latents.shape[0]

    @property
    def embed_dim(self):
        return self.latents.shape[-1]


def embed_dataset(model, dataset, stats_from=None, chunk=4096):
    """Encode every state of every series (eval mode); also records
    per-dimension latent statistics for downstream standardization.

    ``stats_from`` lets validation/test splits reuse the training-split
    statistics.
    """
    if model.norm is None:
        raise ConfigError("embed_dataset needs a trained model with normalization attached")
    was_training = model.training
    model.train(False)
    spec = dataset.spec
    states = model.norm.apply(dataset.data, spec.state_shape).astype(np.float32)
    n_series, n_frames = states.shape[:2]
    flat = states.reshape(n_series * n_frames, *spec.state_shape)
    outs = []
    with T.no_grad():
        for lo in range(0, flat.shape[0], chunk):
            outs.append(model.encode(flat[lo:lo + chunk]).data)
    latents = np.concatenate(outs).reshape(n_series, n_frames, model.embed_dim)
    model.train(was_training)
    if stats_from is not None:
        mean, std = stats_from.mean, stats_from.std
    else:
        mean = latents.reshape(-1, model.embed_dim).mean(axis=0)
        std = latents.reshape(-1, model.embed_dim).std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
    return EmbeddedDataset(latents=latents.astype(np.float32),
                           mean=mean.astype(np.float32), std=std.astype(np.float32),
                           source_split=dataset.split)
