"""Central finite differences as an independent check on :class:`Tape` gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class NonDeterministicError(RuntimeError):
    pass


def finite_diff_grad(
    f: Callable[[], float],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    indices: Sequence[np.ndarray | None] | None = None,
) -> list[np.ndarray]:
    """Gradient of ``f`` w.r.t. ``params`` by (f(p+eps) - f(p-eps)) / (2 eps).

    ``f`` closes over the parameter tensors and is re-evaluated after each
    in-place perturbation.  ``indices`` optionally restricts each tensor to a
    subset of flat coordinates; unprobed coordinates are left as NaN.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = float(f())
    if float(f()) != base:
        raise NonDeterministicError("f returned different values for identical inputs")
    grads = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = range(flat.size) if indices is None or indices[k] is None else indices[k]
        g = np.zeros(flat.size) if indices is None or indices[k] is None else np.full(flat.size, np.nan)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f())
            flat[i] = orig - eps
            lo = float(f())
            flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative discrepancy ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare tape gradients to finite differences for every named parameter.

    With ``max_coords`` set, each tensor is probed on at most that many
    coordinates drawn deterministically from ``seed``.  Returns the relative
    error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    names = list(params)
    indices = []
    for name in names:
        n = params[name].size
        if max_coords is None or n <= max_coords:
            indices.append(None)
        else:
            indices.append(np.sort(rng.choice(n, size=max_coords, replace=False)))
    numeric = finite_diff_grad(lambda: loss_fn().item(), [params[n] for n in names], eps, indices)

    errors = {}
    for name, idx, num in zip(names, indices, numeric):
        ana = analytic[name].reshape(-1)
        num = num.reshape(-1)
        if idx is not None:
            ana, num = ana[idx], num[idx]
        errors[name] = relative_error(ana, num)
    return errors
