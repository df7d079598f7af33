"""Dataset model: system specifications, trajectory containers,
normalization statistics and the on-disk dataset format.

A dataset directory holds ``meta.json`` (system id, parameters, shapes,
RNG name and per-series seeds, normalization stats) plus ``data.bin``:
raw little-endian float32 in C order with axes [series, time, *state].
The same container ingests externally produced trajectories (system_id
"external").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, InputDomainError
from .params import RNG_NAME, make_rng
from . import systems

FORMAT_VERSION = 1
SYSTEM_IDS = ("lorenz", "gray_scott", "external")
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class SystemSpec:
    """Everything needed to reproduce one family of trajectories."""

    system_id: str
    params: dict
    dt: float
    n_steps: int
    state_shape: tuple
    init_sampler: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system_id not in SYSTEM_IDS:
            raise ConfigError(f"unknown system_id {self.system_id!r}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        object.__setattr__(self, "state_shape", tuple(int(s) for s in self.state_shape))
        if int(np.prod(self.state_shape)) <= 0:
            raise ConfigError(f"state_shape product must be positive, got {self.state_shape}")
        if self.system_id == "gray_scott":
            for key in ("r_u", "r_v", "f", "kill_k"):
                if self.params.get(key, 0.0) < 0:
                    raise ConfigError(f"gray_scott rate {key} must be >= 0")

    @property
    def n_channels(self):
        return self.state_shape[0]

    def grid_dx(self):
        if self.system_id != "gray_scott":
            raise ConfigError("grid_dx is only defined for gray_scott specs")
        return self.params["domain_length"] / self.params["grid_points_per_axis"]

    def to_dict(self):
        return {
            "system_id": self.system_id,
            "params": dict(self.params),
            "dt": self.dt,
            "n_steps": self.n_steps,
            "state_shape": list(self.state_shape),
            "init_sampler": dict(self.init_sampler),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            system_id=d["system_id"],
            params=dict(d["params"]),
            dt=float(d["dt"]),
            n_steps=int(d["n_steps"]),
            state_shape=tuple(d["state_shape"]),
            init_sampler=dict(d.get("init_sampler", {})),
        )


@dataclass
class NormStats:
    """Per-channel mean/std; channels are the leading state axis."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ConfigError("NormStats mean/std shape mismatch")
        if np.any(self.std <= 0):
            raise InputDomainError("NormStats: std must be positive in every channel "
                                   "(constant channels cannot be normalized)")

    @classmethod
    def from_data(cls, data, state_shape):
        """Stats over every axis except the channel (leading state) axis."""
        data = np.asarray(data)
        n_state = len(state_shape)
        channel_axis = data.ndim - n_state
        axes = tuple(i for i in range(data.ndim) if i != channel_axis)
        return cls(mean=data.mean(axis=axes), std=data.std(axis=axes))

    def _bcast(self, state_shape):
        view = (-1,) + (1,) * (len(state_shape) - 1)
        return self.mean.reshape(view), self.std.reshape(view)

    def apply(self, data, state_shape):
        mean, std = self._bcast(state_shape)
        return (data - mean) / std

    def invert(self, data, state_shape):
        mean, std = self._bcast(state_shape)
        return data * std + mean


@dataclass
class StateSeries:
    """One trajectory: [n_steps + 1, *state_shape], time-major."""

    spec: SystemSpec
    data: np.ndarray
    seed: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        expected = (self.spec.n_steps + 1,) + self.spec.state_shape
        if self.data.shape != expected:
            raise ConfigError(f"StateSeries shape {self.data.shape} != expected {expected}")
        if not np.all(np.isfinite(self.data)):
            raise InputDomainError("StateSeries contains non-finite entries")


@dataclass
class Dataset:
    """A packed stack of trajectories sharing one SystemSpec."""

    spec: SystemSpec
    data: np.ndarray  # [count, n_steps + 1, *state_shape]
    seeds: list
    split: str = "train"
    norm: NormStats = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        expected = (len(self.seeds), self.spec.n_steps + 1) + self.spec.state_shape
        if tuple(self.data.shape) != expected:
            raise ConfigError(f"Dataset shape {self.data.shape} != expected {expected}")

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, i):
        return StateSeries(self.spec, self.data[i], self.seeds[i])

    @property
    def series(self):
        return [self[i] for i in range(len(self))]


def normalize(series, norm):
    """Elementwise (x - mean) / std; returns a new StateSeries."""
    return StateSeries(series.spec, norm.apply(series.data, series.spec.state_shape), series.seed)


def denormalize(series, norm):
    """Inverse of :func:`normalize`."""
    return StateSeries(series.spec, norm.invert(series.data, series.spec.state_shape), series.seed)


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def sample_initial_state(spec, seed):
    """Draw one initial state; deterministic in (spec, seed)."""
    rng = make_rng(seed)
    sampler = spec.init_sampler
    kind = sampler.get("kind")
    if kind == "uniform_box":
        low = np.asarray(sampler["low"], dtype=np.float64)
        high = np.asarray(sampler["high"], dtype=np.float64)
        return rng.uniform(low, high)
    if kind == "seeded_blobs":
        return _seeded_blob_state(spec, sampler, rng)
    raise ConfigError(f"unknown init_sampler kind {kind!r}")


def _seeded_blob_state(spec, sampler, rng):
    """Uniform u=1, v=0 background plus randomly placed spherical patches
    (periodic distance) where u drops to u_inside and v rises to v_inside."""
    n = spec.params["grid_points_per_axis"]
    n_blobs = int(sampler.get("n_blobs", 3))
    radius = float(sampler.get("radius_cells", n / 8.0))
    u_inside = float(sampler.get("u_inside", 0.5))
    v_inside = float(sampler.get("v_inside", 0.25))
    state = np.zeros((2, n, n, n), dtype=np.float64)
    state[0] = 1.0
    coords = np.arange(n)
    for _ in range(n_blobs):
        center = rng.uniform(0.0, n, size=3)
        deltas = []
        for c in center:
            d = np.abs(coords - c)
            deltas.append(np.minimum(d, n - d))
        dist2 = (deltas[0][:, None, None] ** 2
                 + deltas[1][None, :, None] ** 2
                 + deltas[2][None, None, :] ** 2)
        inside = dist2 <= radius * radius
        state[0][inside] = u_inside
        state[1][inside] = v_inside
    return state


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _make_rhs(spec):
    if spec.system_id == "lorenz":
        return lambda s: systems.lorenz_rhs(s, spec.params), 1
    if spec.system_id == "gray_scott":
        dx = spec.grid_dx()
        substeps = systems.gray_scott_substeps(spec.params, spec.dt, dx)
        return lambda s: systems.gray_scott_rhs(s, spec.params, dx), substeps
    raise ConfigError(f"cannot simulate system_id {spec.system_id!r}; "
                      "external data must be ingested from a dataset directory")


def generate_dataset(spec, count, base_seed, split="train"):
    """Simulate ``count`` trajectories; series i uses seed base_seed + i.

    Pure function of (spec, count, base_seed): initial states are drawn
    per-series from PCG64(seed), then all series integrate in lock-step,
    so the result is independent of any worker configuration.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    seeds = [int(base_seed) + i for i in range(count)]
    init = np.stack([sample_initial_state(spec, s) for s in seeds])
    rhs, substeps = _make_rhs(spec)
    try:
        rolled = systems.integrate(rhs, init, spec.dt, spec.n_steps, substeps=substeps)
    except DivergenceError as err:
        raise DivergenceError(
            f"integration blow-up in {spec.system_id} dataset (base_seed={base_seed}, "
            f"step {err.step}); rerun a single series to isolate the failing seed",
            step=err.step) from err
    data = np.ascontiguousarray(np.swapaxes(rolled, 0, 1).astype(np.float32))
    bad = ~np.isfinite(data).reshape(count, -1).all(axis=1)
    if bad.any():
        failing = seeds[int(np.argmax(bad))]
        raise DivergenceError(f"non-finite trajectory for seed {failing}", step=failing)
    norm = NormStats.from_data(data, spec.state_shape)
    return Dataset(spec=spec, data=data, seeds=seeds, split=split, norm=norm)


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        **dataset.spec.to_dict(),
        "count": len(dataset),
        "dtype": "f32le",
        "layout": "C",
        "rng": RNG_NAME,
        "seeds": [int(s) for s in dataset.seeds],
        "split": dataset.split,
        "norm": {"mean": dataset.norm.mean.tolist(), "std": dataset.norm.std.tolist()}
        if dataset.norm is not None else None,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    blob = np.ascontiguousarray(dataset.data, dtype=np.dtype("<f4"))
    with open(path / "data.bin", "wb") as fh:
        fh.write(blob.tobytes())
    return path


def load_dataset(path):
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {meta.get('format_version')!r}")
    if meta.get("dtype") != "f32le" or meta.get("layout") != "C":
        raise ConfigError("dataset container must be f32le / C layout")
    spec = SystemSpec.from_dict(meta)
    count = int(meta["count"])
    shape = (count, spec.n_steps + 1) + spec.state_shape
    raw = (path / "data.bin").read_bytes()
    data = np.frombuffer(raw, dtype=np.dtype("<f4")).reshape(shape).astype(np.float32)
    norm = None
    if meta.get("norm") is not None:
        norm = NormStats(mean=np.asarray(meta["norm"]["mean"]),
                         std=np.asarray(meta["norm"]["std"]))
    return Dataset(spec=spec, data=data, seeds=list(meta["seeds"]),
                   split=meta.get("split", "train"), norm=norm)
