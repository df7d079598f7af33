"""Ground-truth dynamics: Lorenz and Gray-Scott right-hand sides and a
classical RK4 integrator.

All right-hand sides are vectorized over arbitrary leading batch axes so
whole datasets integrate in lock-step. The Gray-Scott reaction uses the
standard kinetics (+u v^2 in the activator equation) on a periodic cube
with a second-order 7-point Laplacian.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DivergenceError, InputDomainError


def lorenz_rhs(state, params):
    """Time derivative of the Lorenz system.

    ``state`` is [..., 3]; ``params`` must contain sigma, rho, beta.
    """
    state = np.asarray(state)
    if state.shape[-1] != 3:
        raise InputDomainError(f"lorenz_rhs: expected trailing axis 3, got shape {state.shape}")
    if not np.all(np.isfinite(state)):
        raise InputDomainError("lorenz_rhs: non-finite input state")
    sigma, rho, beta = params["sigma"], params["rho"], params["beta"]
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    out = np.empty_like(state)
    out[..., 0] = sigma * (y - x)
    out[..., 1] = x * (rho - z) - y
    out[..., 2] = x * y - beta * z
    return out


def periodic_laplacian(field, dx):
    """Second-order 7-point Laplacian with periodic wrap over the trailing
    three axes; ``field`` is [..., N, N, N]."""
    axes = tuple(range(field.ndim - 3, field.ndim))
    acc = -6.0 * field
    for axis in axes:
        acc = acc + np.roll(field, 1, axis=axis) + np.roll(field, -1, axis=axis)
    return acc / (dx * dx)


def gray_scott_rhs(state, params, dx):
    """Reaction-diffusion derivative for two species on a periodic cube.

    ``state`` is [..., 2, N, N, N] with species u (substrate) and v
    (activator). Diffusion uses central differences with periodic wrap;
    the reaction is u v^2 with feed rate f on u and kill rate kill_k on v.
    """
    state = np.asarray(state)
    if state.ndim < 4 or state.shape[-4] != 2:
        raise InputDomainError(f"gray_scott_rhs: expected [..., 2, N, N, N], got {state.shape}")
    n = state.shape[-1]
    if state.shape[-3:] != (n, n, n) or n < 3:
        raise InputDomainError(f"gray_scott_rhs: grid too small or non-cubic: {state.shape[-3:]}")
    if dx <= 0:
        raise InputDomainError(f"gray_scott_rhs: dx must be positive, got {dx}")
    r_u, r_v = params["r_u"], params["r_v"]
    feed, kill = params["f"], params["kill_k"]
    u = state[..., 0, :, :, :]
    v = state[..., 1, :, :, :]
    reaction = u * v * v
    out = np.empty_like(state)
    out[..., 0, :, :, :] = r_u * periodic_laplacian(u, dx) - reaction + feed * (1.0 - u)
    out[..., 1, :, :, :] = r_v * periodic_laplacian(v, dx) + reaction - (feed + kill) * v
    return out


def rk4_step(rhs, state, dt, step_index=None):
    """Classical 4th-order Runge-Kutta update; preserves the input shape."""
    if dt <= 0:
        raise InputDomainError(f"rk4_step: dt must be positive, got {dt}")
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        where = "" if step_index is None else f" at step {step_index}"
        raise DivergenceError(f"rk4_step: non-finite state{where}", step=step_index)
    return out


def integrate(rhs, state0, dt, n_steps, substeps=1):
    """Integrate ``n_steps`` saved steps of size ``dt``; returns
    [n_steps + 1, *state0.shape] including the initial state.

    ``substeps`` RK4 sub-iterations of size dt/substeps are taken between
    saved frames (used to respect diffusion stability limits).
    """
    state0 = np.asarray(state0, dtype=np.float64)
    out = np.empty((n_steps + 1,) + state0.shape, dtype=np.float64)
    out[0] = state0
    state = state0
    h = dt / substeps
    for i in range(n_steps):
        for _ in range(substeps):
            state = rk4_step(rhs, state, h, step_index=i)
        out[i + 1] = state
    return out


def gray_scott_substeps(params, dt, dx, stability=0.2):
    """Sub-step count keeping the diffusion number r*dt_sub/dx^2 below the
    stability threshold."""
    r_max = max(params["r_u"], params["r_v"])
    if r_max <= 0:
        return 1
    return max(1, math.ceil(r_max * dt / (stability * dx * dx)))
