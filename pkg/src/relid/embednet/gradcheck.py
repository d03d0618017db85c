"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from relid.embednet.autograd import Tensor


def relative_error(analytic, numeric, abs_floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn, params: dict[str, Tensor], eps: float = 1e-5, max_entries: int | None = None,
                    seed: int = 0, abs_floor: float = 1e-6) -> dict[str, float]:
    """Compare backprop gradients of ``loss_fn()`` (a scalar Tensor) with
    central differences; returns the worst relative error per parameter.

    ``max_entries`` limits the number of perturbed coordinates per parameter.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(loss_fn().value)
            flat[k] = orig - eps
            down = float(loss_fn().value)
            flat[k] = orig
            num[j] = (up - down) / (2 * eps)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], num, abs_floor)
    return errors
