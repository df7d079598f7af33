"""Prediction diagnostics: windowed relative MSE, the successive
z-maxima return map of the Lorenz system, planar vorticity, spectral
projections onto the learned latent operator's eigenmodes, and
machine-readable report emission.

Relative MSE over a window is the summed squared error divided by the
summed squared target magnitude, aggregated jointly over all test cases,
computed per field (fields are the leading state channels for gridded
systems, or the whole state vector for flat systems).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, InputDomainError

REPORT_VERSION = 1


@dataclass
class EvalReport:
    """Windowed error tables plus per-step curves for one model/dataset."""

    metadata: dict = field(default_factory=dict)
    windows: list = field(default_factory=list)   # {"start","end","field","value"}
    curve: dict = field(default_factory=dict)     # field -> list of per-step values
    map_pairs: np.ndarray = None                  # [M, 2] successive-maxima pairs
    map_score: dict = None
    divergence: dict = None
    extras: dict = field(default_factory=dict)

    def window_value(self, start, end, field_name=None):
        for row in self.windows:
            if row["start"] == start and row["end"] == end and \
                    (field_name is None or row["field"] == field_name):
                return row["value"]
        raise KeyError(f"no window [{start}, {end}) for field {field_name!r}")

    def to_dict(self):
        return {
            "format_version": REPORT_VERSION,
            "metadata": self.metadata,
            "windows": self.windows,
            "curve": {k: [float(v) for v in vals] for k, vals in self.curve.items()},
            "map_pairs_count": None if self.map_pairs is None else int(len(self.map_pairs)),
            "map_score": self.map_score,
            "divergence": self.divergence,
            "extras": self.extras,
        }


def _field_slices(state_shape):
    """Fields: leading channels of gridded states, the whole vector
    otherwise. Returns [(name, channel_index_or_None)]."""
    if len(state_shape) <= 1:
        return [("state", None)]
    return [(f"field{i}", i) for i in range(state_shape[0])]


def relative_mse(pred, target, windows, state_shape=None, field_names=None, metadata=None):
    """Windowed relative MSE report.

    ``pred``/``target`` are [cases, T, *state_shape]; ``windows`` is a list
    of (start, end) index ranges into the time axis (non-overlapping and
    ordered). Values aggregate all cases jointly per field; also emits the
    per-time-step error curve.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"relative_mse: shape mismatch {pred.shape} vs {target.shape}")
    if state_shape is None:
        state_shape = pred.shape[2:]
    fields = _field_slices(tuple(state_shape))
    if field_names is not None:
        if len(field_names) != len(fields):
            raise ConfigError(f"expected {len(fields)} field names, got {len(field_names)}")
        fields = [(name, ch) for name, (_, ch) in zip(field_names, fields)]
    last_end = 0
    for start, end in windows:
        if start < last_end or end <= start:
            raise ConfigError(f"windows must be ordered and non-overlapping, got {windows}")
        last_end = end
    n_steps = pred.shape[1]
    report = EvalReport(metadata=metadata or {})

    def field_view(arr, channel):
        if channel is None:
            return arr.reshape(arr.shape[0], arr.shape[1], -1)
        return arr[:, :, channel].reshape(arr.shape[0], arr.shape[1], -1)

    for name, channel in fields:
        p = field_view(pred, channel)
        t = field_view(target, channel)
        err_t = ((p - t) ** 2).sum(axis=(0, 2))   # per-step, summed over cases
        mag_t = (t ** 2).sum(axis=(0, 2))
        curve = np.divide(err_t, mag_t, out=np.zeros_like(err_t), where=mag_t > 0)
        report.curve[name] = [float(v) for v in curve]
        for start, end in windows:
            if end > n_steps:
                raise ConfigError(f"window [{start}, {end}) exceeds series length {n_steps}")
            mag = mag_t[start:end].sum()
            if mag == 0.0:
                raise InputDomainError(
                    f"relative_mse: all-zero target in window [{start}, {end}) "
                    f"for field {name}; the ratio is undefined")
            report.windows.append({
                "start": int(start), "end": int(end), "field": name,
                "value": float(err_t[start:end].sum() / mag),
            })
    return report


# ---------------------------------------------------------------------------
# Lorenz return map
# ---------------------------------------------------------------------------

def lorenz_map(series):
    """Pairs (M_k, M_{k+1}) of successive strict local maxima of the z
    coordinate. ``series`` is a StateSeries, a [T, 3] array, or a 1-D z
    trace. Fewer than two maxima yield an empty [0, 2] array."""
    data = getattr(series, "data", series)
    data = np.asarray(data)
    if data.ndim == 2 and data.shape[1] == 3:
        z = data[:, 2]
    elif data.ndim == 1:
        z = data
    else:
        raise ConfigError(f"lorenz_map expects [T, 3] states or a z trace, got {data.shape}")
    if z.shape[0] < 3:
        raise ConfigError("lorenz_map needs a series of length >= 3")
    interior = (z[1:-1] > z[:-2]) & (z[1:-1] > z[2:])
    maxima = z[1:-1][interior]
    if maxima.size < 2:
        return np.empty((0, 2), dtype=np.float64)
    return np.column_stack([maxima[:-1], maxima[1:]]).astype(np.float64)


def map_proximity(pred_pairs, reference_pairs, epsilon):
    """Fraction of predicted map points within ``epsilon`` (nearest
    neighbour) of the reference point cloud."""
    pred_pairs = np.asarray(pred_pairs, dtype=np.float64)
    reference_pairs = np.asarray(reference_pairs, dtype=np.float64)
    if len(reference_pairs) == 0:
        raise ConfigError("map_proximity needs a non-empty reference cloud")
    if len(pred_pairs) == 0:
        return {"pairs": 0, "within": 0, "fraction": 0.0, "epsilon": float(epsilon)}
    dist, _ = cKDTree(reference_pairs).query(pred_pairs)
    within = int((dist <= epsilon).sum())
    return {"pairs": int(len(pred_pairs)), "within": within,
            "fraction": float(within / len(pred_pairs)), "epsilon": float(epsilon)}


def within_bounds(states, bounds):
    """True when every state component stays inside its [low, high] box."""
    states = np.asarray(states)
    flat = states.reshape(-1, states.shape[-1])
    for axis, (low, high) in enumerate(bounds):
        vals = flat[:, axis]
        if vals.min() < low or vals.max() > high:
            return False
    return True


# ---------------------------------------------------------------------------
# vorticity
# ---------------------------------------------------------------------------

def vorticity(u_x, u_y, dx, dy):
    """Planar curl d(u_y)/dx - d(u_x)/dy on an [H, W] grid (axis 0 is x);
    central differences in the interior, one-sided at the edges."""
    u_x = np.asarray(u_x, dtype=np.float64)
    u_y = np.asarray(u_y, dtype=np.float64)
    if u_x.shape != u_y.shape or u_x.ndim != 2:
        raise ConfigError(f"vorticity expects matching 2-D fields, got {u_x.shape}, {u_y.shape}")
    if min(u_x.shape) < 3:
        raise ConfigError(f"vorticity needs at least a 3x3 grid, got {u_x.shape}")
    return np.gradient(u_y, dx, axis=0) - np.gradient(u_x, dy, axis=1)


# ---------------------------------------------------------------------------
# latent operator eigenmodes
# ---------------------------------------------------------------------------

@dataclass
class ModeProjection:
    """Per-step projections onto the top eigenvectors of the latent
    operator, ranked by eigenvalue magnitude."""

    coefficients: np.ndarray  # complex [T+1, m]
    eigenvalues: np.ndarray   # complex [m]
    eigenvectors: np.ndarray  # complex [e, m]

    @property
    def magnitude(self):
        return np.abs(self.coefficients)

    @property
    def angle(self):
        return np.angle(self.coefficients)


def koopman_mode_projection(matrix, latents, n_modes):
    """Project latent trajectories onto the dominant eigenvectors of the
    operator. Symmetric operators have real spectra, so the coefficient
    imaginary parts vanish and angles collapse to {0, pi}."""
    matrix = np.asarray(matrix, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    e = matrix.shape[0]
    if matrix.shape != (e, e):
        raise ConfigError(f"operator must be square, got {matrix.shape}")
    if latents.ndim != 2 or latents.shape[1] != e:
        raise ConfigError(f"latents must be [T+1, {e}], got {latents.shape}")
    if not 1 <= n_modes <= e:
        raise ConfigError(f"n_modes must be in [1, {e}], got {n_modes}")
    symmetric = np.allclose(matrix, matrix.T, atol=1e-12)
    try:
        if symmetric:
            vals, vecs = np.linalg.eigh(matrix)
            vals = vals.astype(np.complex128)
            vecs = vecs.astype(np.complex128)
        else:
            vals, vecs = np.linalg.eig(matrix)
    except np.linalg.LinAlgError as err:
        cond = float(np.linalg.cond(matrix))
        raise InputDomainError(f"eigendecomposition failed (cond ~ {cond:.3e}): {err}") from err
    order = np.argsort(-np.abs(vals))[:n_modes]
    vals = vals[order]
    vecs = vecs[:, order]
    coeff = latents @ np.conj(vecs)
    return ModeProjection(coefficients=coeff, eigenvalues=vals, eigenvectors=vecs)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def emit_report(report, path):
    """Write ``report.json`` plus per-curve CSV files; byte-deterministic
    for identical inputs. Returns the written paths."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    report_path = path / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(report_path)
    curve_path = path / "error_vs_time.csv"
    lines = ["step,field,value"]
    for name in sorted(report.curve):
        for step, value in enumerate(report.curve[name]):
            lines.append(f"{step},{name},{float(value)!r}")
    curve_path.write_text("\n".join(lines) + "\n")
    written.append(curve_path)
    if report.map_pairs is not None:
        map_path = path / "lorenz_map.csv"
        rows = ["m_k,m_k1"] + [f"{float(a)!r},{float(b)!r}"
                               for a, b in np.asarray(report.map_pairs)]
        map_path.write_text("\n".join(rows) + "\n")
        written.append(map_path)
    return written


def load_report(path):
    """Read back an emitted report directory into an EvalReport."""
    path = Path(path)
    blob = json.loads((path / "report.json").read_text())
    if blob.get("format_version") != REPORT_VERSION:
        raise ConfigError(f"unsupported report format {blob.get('format_version')!r}")
    report = EvalReport(metadata=blob["metadata"], windows=blob["windows"],
                        curve=blob["curve"], map_score=blob.get("map_score"),
                        divergence=blob.get("divergence"), extras=blob.get("extras", {}))
    map_csv = path / "lorenz_map.csv"
    if map_csv.exists():
        rows = map_csv.read_text().strip().splitlines()[1:]
        pairs = [tuple(float(v) for v in row.split(",")) for row in rows]
        report.map_pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return report
