"""Legendre polynomials on an affinely rescaled spread axis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class DegenerateSampleError(ValueError):
    """The design matrix of a projection is rank deficient."""


@dataclass(frozen=True)
class BasisSpec:
    """Coefficients c_0..c_n of sum_i c_i L_i((delta + shift) / scale)."""

    coefficients: tuple[float, ...]
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if len(self.coefficients) == 0:
            raise ValueError("BasisSpec needs at least one coefficient")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def order(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, delta):
        return basis_expansion(self, delta)

    def zeroed(self) -> "BasisSpec":
        return BasisSpec((0.0,) * len(self.coefficients), self.shift, self.scale)


def legendre_eval(i: int, x):
    """L_i(x) by the three-term recurrence; x may be an array."""
    if i < 0:
        raise ValueError("order must be non-negative")
    x = np.asarray(x, dtype=float)
    prev, cur = np.ones_like(x), x.copy()
    if i == 0:
        return prev if prev.ndim else float(prev)
    for k in range(1, i):
        prev, cur = cur, ((2 * k + 1) * x * cur - k * prev) / (k + 1)
    return cur if cur.ndim else float(cur)


def legendre_vander(x, order: int) -> np.ndarray:
    """Columns L_0(x), ..., L_order(x)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (order + 1,))
    out[..., 0] = 1.0
    if order >= 1:
        out[..., 1] = x
    for k in range(1, order):
        out[..., k + 1] = ((2 * k + 1) * x * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out


def rescale(spec: BasisSpec, delta):
    return (np.asarray(delta, dtype=float) + spec.shift) / spec.scale


def basis_expansion(spec: BasisSpec, delta):
    u = rescale(spec, delta)
    val = legendre_vander(u, spec.order) @ np.asarray(spec.coefficients)
    return val if np.ndim(val) else float(val)


def project_conditional_mean(delta, y, order: int, shift: float = 0.0, scale: float = 1.0) -> BasisSpec:
    """Least-squares fit of y on the rescaled Legendre basis.

    Normal equations are solved by Cholesky unless the Gram matrix looks
    ill-conditioned (estimate above 1e12), in which case a column-pivoted QR
    of the design matrix is used instead.
    """
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    if delta.shape != y.shape or delta.ndim != 1:
        raise ValueError("delta and y must be 1-d arrays of equal length")
    if delta.size < order + 1:
        raise DegenerateSampleError(f"need at least {order + 1} samples, got {delta.size}")
    X = legendre_vander((delta + shift) / scale, order)
    gram = X.T @ X
    if np.linalg.cond(gram) <= 1e12:
        coef = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), X.T @ y)
    else:
        Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag[-1] <= diag[0] * X.shape[0] * np.finfo(float).eps:
            raise DegenerateSampleError("design matrix is rank deficient")
        coef = np.empty(order + 1)
        coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
    return BasisSpec(tuple(coef), shift, scale)
