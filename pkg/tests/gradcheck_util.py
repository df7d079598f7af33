"""Independent finite-difference gradient oracle used across the tests.

Central differences in 64-bit at h = 1e-4, probing a random subset of
coordinates; the oracle never touches the reverse-mode machinery beyond
re-evaluating the loss.
"""

import numpy as np


def finite_difference_check(loss_fn, tensors, n_probes=100, h=1e-4, seed=0):
    """Compare analytic gradients of a scalar loss against central
    finite differences on ``n_probes`` random coordinates.

    ``loss_fn`` rebuilds the loss from scratch (so parameter perturbations
    take effect); ``tensors`` are the leaf tensors to probe. Returns the
    worst relative error observed.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    loss.backward()
    grads = []
    for t in tensors:
        assert t.grad is not None, "parameter missing a gradient"
        grads.append(t.grad.copy())
    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    n_probes = min(n_probes, total)
    flat_choice = rng.choice(total, size=n_probes, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_idx in flat_choice:
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[which])
        t = tensors[which]
        view = t.data.reshape(-1)
        orig = view[local]
        view[local] = orig + h
        plus = float(loss_fn().item())
        view[local] = orig - h
        minus = float(loss_fn().item())
        view[local] = orig
        numeric = (plus - minus) / (2.0 * h)
        analytic = float(grads[which].reshape(-1)[local])
        rel = abs(numeric - analytic) / max(abs(numeric) + abs(analytic), 1e-6)
        worst = max(worst, rel)
    return worst
