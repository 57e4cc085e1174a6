"""Central-difference gradient checking in 64-bit precision."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Param, Tape, Tensor


class NonFiniteError(FloatingPointError):
    pass


def _relerr(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _scalar(value) -> float:
    v = float(np.asarray(value.data if isinstance(value, Tensor) else value))
    if not np.isfinite(v):
        raise NonFiniteError(f"function evaluated to {v}")
    return v


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``point`` and
    central differences, computed in float64.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    x0 = np.array(point, dtype=np.float64)
    if eps is None:
        eps = 1e-4 * max(1.0, float(np.max(np.abs(x0))) if x0.size else 1.0)
    if eps <= 0:
        raise ValueError("eps must be positive")

    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    _scalar(y)
    tape.backward(y)
    analytic = np.zeros_like(x0) if x.grad is None else np.asarray(x.grad, dtype=np.float64)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += eps
        fp = _scalar(f(Tensor(xp.reshape(x0.shape))))
        xp[i] -= 2 * eps
        fm = _scalar(f(Tensor(xp.reshape(x0.shape))))
        flat[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("analytic gradient is not finite")
    return _relerr(analytic, numeric)


def param_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Param],
                     eps: float = 1e-6, max_coords: int | None = None,
                     rng: np.random.Generator | None = None) -> dict[str, float]:
    """Check gradients of ``loss_fn()`` w.r.t. each parameter (perturbed in place).

    Parameters must already hold float64 data. ``max_coords`` limits the number
    of randomly chosen coordinates checked per parameter.
    """
    params = list(params)
    for p in params:
        # 0-d arithmetic yields numpy scalars, which cannot be perturbed in place
        p.data = np.asarray(p.data)
        if p.data.dtype != np.float64:
            raise TypeError(f"param {p.name} must be float64 for gradient checking")
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    _scalar(loss)
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    errors = {}
    rng = rng or np.random.default_rng(0)
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(loss_fn())
            flat[i] = orig - eps
            fm = _scalar(loss_fn())
            flat[i] = orig
            num[j] = (fp - fm) / (2 * eps)
        errors[p.name] = _relerr(analytic[p.name].reshape(-1)[idx], num)
    return errors
