from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteValue, Tensor, no_grad

# Gradient magnitudes below GRAD_FLOOR * max(1, |f|) are treated as noise when
# normalising errors; finite-difference roundoff scales with |f| / h.
GRAD_FLOOR = 1e-4


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between autodiff and central finite differences.

    ``f`` rebuilds the scalar graph from the current parameter values on each
    call.  For every parameter tensor the error is
    ``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, GRAD_FLOOR * max(1, |f|))``; the
    largest value over tensors is returned.  ``max_entries`` caps how many
    (seeded, randomly chosen) entries per tensor are differenced.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFiniteValue("function value is not finite at params")
    floor = GRAD_FLOOR * max(1.0, abs(out.item()))
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g_auto in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        g_fd = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                g_fd[j] = (up - down) / (2 * h)
        if not (np.isfinite(g_fd).all() and np.isfinite(g_auto).all()):
            raise NonFiniteValue("non-finite gradient encountered")
        ga = g_auto.reshape(-1)[idx]
        scale = max(np.abs(ga).max(initial=0.0), np.abs(g_fd).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(ga - g_fd).max(initial=0.0) / scale))
    for p in params:
        p.grad = None
    return worst
