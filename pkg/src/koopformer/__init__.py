"""Koopman-observable embeddings and causal transformer decoders for
surrogate modeling of dynamical systems."""

__version__ = "0.1.0"

from . import baselines, checkpoint, data, embedding, evaluation, optim, params, pca, pipeline, systems, tensor, transformer  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    DimensionError,
    DivergenceError,
    InputDomainError,
    KoopformerError,
    PrerequisiteError,
)
