"""Independent gradient verification via central finite differences.

This is the oracle side of every gradient check in the package: it never
touches the reverse-mode tape, so agreement between the two is evidence that
both are right.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .errors import NumericDomainError
from .tensor import Tensor, backward, no_grad


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d x, one coordinate at a time.

    f must be a pure scalar function of x. h in [1e-6, 1e-4] is sensible at
    64-bit; 1e-5 is the default.
    """
    base = x.data
    out = np.zeros(base.shape)
    flat = out.reshape(-1)
    with no_grad():
        for i in range(base.size):
            bump = np.zeros(base.size)
            bump[i] = h
            bump = bump.reshape(base.shape)
            hi = _scalar(f(Tensor(base + bump)))
            lo = _scalar(f(Tensor(base - bump)))
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericDomainError(
                    f"finite_diff_grad: non-finite evaluation at coordinate {i}"
                )
            flat[i] = (hi - lo) / (2.0 * h)
    return out


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def max_relative_error(
    approx: np.ndarray, exact: np.ndarray, floor: float = 1e-8
) -> float:
    """Largest elementwise relative error, skipping coordinates where both
    magnitudes sit under ``floor`` (noise floor of the central difference)."""
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    keep = np.maximum(np.abs(a), np.abs(b)) >= floor
    if not keep.any():
        return 0.0
    denom = np.maximum(np.abs(a), np.abs(b))[keep]
    return float((np.abs(a - b)[keep] / denom).max())


def check_gradients(
    f: Callable[..., Tensor],
    xs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Compare reverse-mode gradients of f(*xs) against finite differences.

    Returns the worst relative error over all inputs.
    """
    tracked = [Tensor(x.data, grad_tracked=True) for x in xs]
    grads = backward(f(*tracked), populate=False)
    worst = 0.0
    for i, t in enumerate(tracked):

        def f_i(xi: Tensor, _i=i) -> Tensor:
            args = [Tensor(u.data) for u in tracked]
            args[_i] = xi
            return f(*args)

        numeric = finite_diff_grad(f_i, t, h=h)
        exact = grads.get(t)
        if exact is None:
            exact = np.zeros(t.shape)
        worst = max(worst, max_relative_error(numeric, exact, floor=floor))
    return worst
