"""Finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..exceptions import NumericError
from .tensor import no_grad


def grad_check(f, params, step=1e-4, n_coords=200, seed=0, floor=1e-6, return_details=False):
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` is a mapping (or sequence) of tensors that ``f`` reads.  For each
    tensor up to ``n_coords`` coordinates are sampled; the error for one
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    Returns the maximum error (and per-tensor maxima if ``return_details``).
    """
    items = list(params.items()) if hasattr(params, "items") else list(enumerate(params))
    for _, p in items:
        p.grad = None
    loss = f()
    value = float(np.asarray(loss.data).sum())
    if not np.isfinite(value):
        raise NumericError("grad_check: f() is not finite")
    loss.backward()
    analytic = {k: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for k, p in items}

    rng = np.random.default_rng(seed)
    details = {}
    for key, p in items:
        flat = p.data.reshape(-1)
        count = min(n_coords, flat.size)
        coords = np.arange(flat.size) if count == flat.size else rng.choice(flat.size, count, replace=False)
        worst = 0.0
        for c in coords:
            original = flat[c]
            with no_grad():
                flat[c] = original + step
                up = float(f().data.sum())
                flat[c] = original - step
                down = float(f().data.sum())
            flat[c] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"grad_check: f() not finite while perturbing {key}")
            numeric = (up - down) / (2.0 * step)
            a = analytic[key].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        details[key] = worst
    overall = max(details.values(), default=0.0)
    return (overall, details) if return_details else overall
