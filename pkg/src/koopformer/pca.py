"""Principal component embedding: the classical linear baseline.

Fits a mean-centered orthogonal projection onto the top-e principal
components of the flattened (normalized) states; inversion is the
transpose reconstruction. Duck-types the encoder/decoder surface of
:class:`koopformer.embedding.EmbeddingModel` so the transformer pipeline
can run on PCA latents unchanged.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats
from .errors import ConfigError, DimensionError


class PcaEmbedder:
    variant = "pca"

    def __init__(self, mean, components, explained_variance, state_shape, norm=None):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.components = np.asarray(components, dtype=np.float32)  # [D, e]
        self.explained_variance = np.asarray(explained_variance, dtype=np.float32)
        self.state_shape = tuple(state_shape)
        self.norm = norm
        self.training = False
        self.koopman = None

    @property
    def embed_dim(self):
        return self.components.shape[1]

    @property
    def zero_variance_components(self):
        """Boolean mask of requested components beyond the data rank."""
        return self.explained_variance <= 1e-12

    @property
    def retained_variance(self):
        return float(self.explained_variance.sum())

    def train(self, flag=True):  # projections have no train mode
        return self

    def _flatten(self, x):
        data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float32)
        if data.shape == self.state_shape:
            return data.reshape(1, -1), True
        if data.shape[1:] == self.state_shape:
            return data.reshape(data.shape[0], -1), False
        raise DimensionError.mismatch("pca input", data.shape, self.state_shape)

    def encode(self, state):
        flat, single = self._flatten(state)
        z = (flat - self.mean) @ self.components
        out = T.Tensor(z)
        return out[0] if single else out

    def decode(self, latent):
        data = latent.data if isinstance(latent, T.Tensor) else np.asarray(latent, dtype=np.float32)
        single = data.ndim == 1
        z = data[None] if single else data
        if z.shape[-1] != self.embed_dim:
            raise DimensionError.mismatch("pca latent", z.shape, (self.embed_dim,))
        x = z @ self.components.T + self.mean
        out = T.Tensor(x.reshape(z.shape[0], *self.state_shape))
        return out[0] if single else out

    def n_parameters(self):
        return self.mean.size + self.components.size

    def save(self, path, extra_config=None):
        from .params import ParamStore

        store = ParamStore()
        store.add("mean", self.mean, trainable=False)
        store.add("components", self.components, trainable=False)
        store.add("explained_variance", self.explained_variance, trainable=False)
        cfg = {"model": {"variant": "pca", "state_shape": list(self.state_shape),
                         "embed_dim": self.embed_dim}}
        if self.norm is not None:
            cfg["norm"] = {"mean": self.norm.mean.tolist(), "std": self.norm.std.tolist()}
        if extra_config:
            cfg.update(extra_config)
        return save_checkpoint(path, "embedding", cfg, store)

    @classmethod
    def load(cls, path):
        kind, cfg, store = load_checkpoint(path)
        if kind != "embedding" or cfg["model"].get("variant") != "pca":
            raise ConfigError(f"not a PCA embedding checkpoint: {path}")
        norm = None
        if cfg.get("norm"):
            norm = NormStats(np.asarray(cfg["norm"]["mean"]), np.asarray(cfg["norm"]["std"]))
        return cls(store["mean"].data, store["components"].data,
                   store["explained_variance"].data, cfg["model"]["state_shape"], norm=norm)


def pca_fit(dataset, embed_dim, max_samples=65536):
    """Fit the top-``embed_dim`` principal components of the normalized
    states via SVD of the centered sample matrix.

    Requesting more components than the data rank is accepted; the
    trailing components carry zero variance and are flagged on the
    returned embedder.
    """
    if dataset.norm is None:
        raise ConfigError("pca_fit expects a dataset with normalization stats")
    spec = dataset.spec
    state_dim = int(np.prod(spec.state_shape))
    if embed_dim > state_dim:
        raise ConfigError(f"embed_dim {embed_dim} exceeds flattened state dimension {state_dim}")
    states = dataset.norm.apply(dataset.data, spec.state_shape).astype(np.float64)
    flat = states.reshape(-1, state_dim)
    if flat.shape[0] > max_samples:
        stride = int(np.ceil(flat.shape[0] / max_samples))
        flat = flat[::stride]
    mean = flat.mean(axis=0)
    centered = flat - mean
    # thin SVD: right singular vectors are the principal axes
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals ** 2 / max(flat.shape[0] - 1, 1)
    k = min(embed_dim, vt.shape[0])
    components = np.zeros((state_dim, embed_dim))
    components[:, :k] = vt[:k].T
    variance = np.zeros(embed_dim)
    variance[:k] = var[:k]
    return PcaEmbedder(mean, components, variance, spec.state_shape, norm=dataset.norm)


def pca_apply(embedder, state):
    """Project states onto the fitted components; returns numpy."""
    with T.no_grad():
        return embedder.encode(state).data


def pca_invert(embedder, latent):
    """Transpose reconstruction from the component space; returns numpy."""
    with T.no_grad():
        return embedder.decode(latent).data
