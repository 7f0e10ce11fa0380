"""B-spline basis evaluation on uniform extended knot grids.

Provides the scalar Cox-de Boor recursion (the reference everything else is
tested against) and a vectorized local evaluator with analytic derivatives
used by the KAN decoder layers. Inputs outside the basis domain are clamped
to its edge, so the partition of unity holds for every input and gradients
stay defined (constant, hence zero, beyond the edge).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def uniform_knots(lo: float, hi: float, n_basis: int, degree: int) -> np.ndarray:
    """Uniform knot vector supporting `n_basis` B-splines of `degree` on [lo, hi].

    The grid has n_basis - degree intervals inside [lo, hi] and is extended
    by `degree` extra knots on each side, so the basis partitions unity on
    the whole of [lo, hi].
    """
    if degree < 0:
        raise ContractError(f"degree must be >= 0, got {degree}")
    if n_basis <= degree:
        raise ContractError(
            f"need n_basis > degree for a uniform grid, got {n_basis} <= {degree}"
        )
    if not lo < hi:
        raise ContractError(f"grid range must satisfy lo < hi, got [{lo}, {hi}]")
    n_intervals = n_basis - degree
    h = (hi - lo) / n_intervals
    return lo + h * np.arange(-degree, n_intervals + degree + 1)


def domain(knots: np.ndarray, degree: int) -> tuple[float, float]:
    """Interval on which the basis partitions unity."""
    return float(knots[degree]), float(knots[len(knots) - degree - 1])


def _cox_de_boor(x: float, k: int, i: int, t: np.ndarray) -> float:
    if k == 0:
        # right-closed final interval keeps the partition alive at the top knot
        if i == len(t) - 2 and x == t[i + 1]:
            return 1.0
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    c1 = 0.0
    if t[i + k] != t[i]:
        c1 = (x - t[i]) / (t[i + k] - t[i]) * _cox_de_boor(x, k - 1, i, t)
    c2 = 0.0
    if t[i + k + 1] != t[i + 1]:
        c2 = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * _cox_de_boor(x, k - 1, i + 1, t)
    return c1 + c2


def bspline_basis(x: float, knots: np.ndarray, degree: int) -> np.ndarray:
    """All basis values B_p(x), p = 0..n_basis-1, by the Cox-de Boor recursion.

    x is clamped to the partition-of-unity domain of the grid.
    """
    t = np.asarray(knots, dtype=np.float64)
    if degree < 0:
        raise ContractError(f"degree must be >= 0, got {degree}")
    if np.any(np.diff(t) < 0):
        raise ContractError("knots must be nondecreasing")
    n_basis = len(t) - degree - 1
    if n_basis < 1:
        raise ContractError(f"knot vector too short for degree {degree}")
    lo, hi = domain(t, degree)
    xc = min(max(float(x), lo), hi)
    return np.array([_cox_de_boor(xc, degree, i, t) for i in range(n_basis)])


def _spans(xc: np.ndarray, t: np.ndarray, degree: int) -> np.ndarray:
    """Index j with t[j] <= x < t[j+1], clipped to spans that carry basis mass."""
    j = np.searchsorted(t, xc, side="right") - 1
    return np.clip(j, degree, len(t) - degree - 2)


def _local_nonzero(xc: np.ndarray, t: np.ndarray, degree: int, span: np.ndarray):
    """The degree+1 nonzero basis values at each x (iterative de Boor scheme).

    Returns levels for orders 0..degree; level r has trailing axis r+1 and
    entry m = B_{span-r+m, r}(x).
    """
    flat_x = xc.ravel()
    flat_j = span.ravel()
    n = flat_x.size
    levels = [np.ones((n, 1))]
    left = np.empty((degree + 1, n))
    right = np.empty((degree + 1, n))
    for r in range(1, degree + 1):
        left[r] = flat_x - t[flat_j + 1 - r]
        right[r] = t[flat_j + r] - flat_x
        cur = np.empty((n, r + 1))
        saved = np.zeros(n)
        prev = levels[r - 1]
        for m in range(r):
            den = right[m + 1] + left[r - m]
            temp = prev[:, m] / den
            cur[:, m] = saved + right[m + 1] * temp
            saved = left[r - m] * temp
        cur[:, r] = saved
        levels.append(cur)
    return levels


def bspline_basis_matrix(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Vectorized basis evaluation: output shape x.shape + (n_basis,)."""
    t = np.asarray(knots, dtype=np.float64)
    lo, hi = domain(t, degree)
    xa = np.asarray(x, dtype=np.float64)
    xc = np.clip(xa, lo, hi)
    span = _spans(xc, t, degree)
    vals = _local_nonzero(xc, t, degree, span)[degree]
    n_basis = len(t) - degree - 1
    out = np.zeros((xc.size, n_basis))
    cols = span.ravel()[:, None] - degree + np.arange(degree + 1)
    np.put_along_axis(out, cols, vals, axis=1)
    return out.reshape(xa.shape + (n_basis,))


def bspline_basis_and_deriv(
    x: np.ndarray, knots: np.ndarray, degree: int
) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and d/dx of each, clamp-aware (zero slope outside [lo, hi])."""
    t = np.asarray(knots, dtype=np.float64)
    lo, hi = domain(t, degree)
    xa = np.asarray(x, dtype=np.float64)
    xc = np.clip(xa, lo, hi)
    span = _spans(xc, t, degree)
    levels = _local_nonzero(xc, t, degree, span)
    vals = levels[degree]
    n_basis = len(t) - degree - 1
    flat_j = span.ravel()
    n = flat_j.size
    out = np.zeros((n, n_basis))
    cols = flat_j[:, None] - degree + np.arange(degree + 1)
    np.put_along_axis(out, cols, vals, axis=1)
    dout = np.zeros((n, n_basis))
    if degree >= 1:
        # B'_{i,k} = k * (B_{i,k-1}/(t[i+k]-t[i]) - B_{i+1,k-1}/(t[i+k+1]-t[i+1]))
        prev = np.zeros((n, degree + 2))
        prev[:, 1:-1] = levels[degree - 1]
        i0 = flat_j[:, None] - degree + np.arange(degree + 2) - 1
        den = t[i0 + degree] - t[i0]
        term = np.where(den > 0, prev / np.where(den > 0, den, 1.0), 0.0)
        dvals = degree * (term[:, :-1] - term[:, 1:])
        inside = ((xa >= lo) & (xa <= hi)).ravel()
        np.put_along_axis(dout, cols, dvals * inside[:, None], axis=1)
    return out.reshape(xa.shape + (n_basis,)), dout.reshape(xa.shape + (n_basis,))
