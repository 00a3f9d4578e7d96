"""Scalar B-spline primitives: Cox-de Boor evaluation, derivatives, knot insertion.

Everything downstream (periodic surfaces, vector bases, quadrature tables) is
built on the routines in this module.  The evaluation convention is half-open
spans, with the closure fix that a parameter equal to the last knot of the
vector is assigned to the last span so that evaluation at the right end of the
domain is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class KnotVector:
    """A nondecreasing knot sequence together with the spline degree.

    The vector defines ``n = len(knots) - degree - 1`` basis functions.  The
    natural parameter domain is ``[knots[degree], knots[n]]``, which is
    required to be non-empty (``n > degree``).
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if knots.ndim != 1:
            raise ValueError("knots must be a 1D sequence")
        n = knots.size - self.degree - 1
        if n <= self.degree:
            raise ValueError(f"need n > p, got n={n}, p={self.degree}")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[self.n])


def _degree_zero(knots: np.ndarray, i: int, ts: np.ndarray, t_close: float) -> np.ndarray:
    """Indicator of span i, half-open.

    Two closure fixes: a parameter equal to the right end of the domain
    (``t_close``) is assigned to the span ending there (left limit, so the
    derivative of order p at the domain end is the one-sided limit from
    inside), and a parameter equal to the global last knot is assigned to the
    final span.
    """
    lo, hi = knots[i], knots[i + 1]
    out = (lo <= ts) & (ts < hi)
    at_close = ts == t_close
    if np.any(at_close):
        out = np.where(at_close, (lo < t_close) & (hi == t_close), out)
    last = knots[-1]
    if last != t_close:
        at_last = ts == last
        if np.any(at_last):
            out = np.where(at_last, (lo < last) & (hi == last), out)
    return out.astype(float)


def eval_bspline_many(space: KnotVector, i: int, ts, order: int = 0) -> np.ndarray:
    """Evaluate B_i^p (or a derivative) at an array of parameters."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if not 0 <= i < space.n:
        raise ValueError(f"function index {i} out of range [0, {space.n})")
    if not 0 <= order <= space.degree:
        raise ValueError(f"derivative order {order} outside [0, {space.degree}]")
    t_close = float(space.knots[space.n])
    return _eval_rec(space.knots, i, space.degree, ts, order, t_close)


def _eval_rec(knots: np.ndarray, i: int, p: int, ts: np.ndarray, order: int, t_close: float) -> np.ndarray:
    if order > 0:
        # d/dt B_i^p = p [ B_i^{p-1}/(t_{i+p}-t_i) - B_{i+1}^{p-1}/(t_{i+p+1}-t_{i+1}) ]
        out = np.zeros_like(ts)
        d1 = knots[i + p] - knots[i]
        if d1 > 0:
            out += _eval_rec(knots, i, p - 1, ts, order - 1, t_close) / d1
        d2 = knots[i + p + 1] - knots[i + 1]
        if d2 > 0:
            out -= _eval_rec(knots, i + 1, p - 1, ts, order - 1, t_close) / d2
        return p * out
    if p == 0:
        return _degree_zero(knots, i, ts, t_close)
    out = np.zeros_like(ts)
    d1 = knots[i + p] - knots[i]
    if d1 > 0:
        out += (ts - knots[i]) / d1 * _eval_rec(knots, i, p - 1, ts, 0, t_close)
    d2 = knots[i + p + 1] - knots[i + 1]
    if d2 > 0:
        out += (knots[i + p + 1] - ts) / d2 * _eval_rec(knots, i + 1, p - 1, ts, 0, t_close)
    return out


def eval_bspline(space: KnotVector, i: int, t: float) -> float:
    """Cox-de Boor evaluation of the i-th function at a scalar parameter."""
    return float(eval_bspline_many(space, i, t)[0])


def eval_bspline_derivative(space: KnotVector, i: int, t: float, order: int) -> float:
    """Derivative of order ``order`` (0 <= order <= degree) of B_i^p at t."""
    return float(eval_bspline_many(space, i, t, order)[0])


def _indicator_table(knots: np.ndarray, ts: np.ndarray, t_close: float) -> np.ndarray:
    """Degree-0 indicators of all spans at once (see _degree_zero)."""
    span = np.searchsorted(knots, ts, side="right") - 1
    at_close = ts == t_close
    if np.any(at_close):
        span = np.where(at_close, np.searchsorted(knots, t_close, side="left") - 1, span)
    last = knots[-1]
    if last != t_close:
        at_last = ts == last
        if np.any(at_last):
            span = np.where(at_last, np.searchsorted(knots, last, side="left") - 1, span)
    cols = knots.size - 1
    out = np.zeros((ts.size, cols))
    valid = (span >= 0) & (span < cols)
    out[np.arange(ts.size)[valid], span[valid]] = 1.0
    return out


def _raise_degree(knots: np.ndarray, B: np.ndarray, d: int, ts: np.ndarray) -> np.ndarray:
    """One Cox-de Boor pass: degree d-1 table -> degree d table."""
    cols = B.shape[1] - 1
    k = knots
    left_den = k[d : d + cols] - k[:cols]
    right_den = k[d + 1 : d + 1 + cols] - k[1 : 1 + cols]
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(left_den > 0, (ts[:, None] - k[None, :cols]) / left_den, 0.0)
        right = np.where(right_den > 0, (k[None, d + 1 : d + 1 + cols] - ts[:, None]) / right_den, 0.0)
    return left * B[:, :cols] + right * B[:, 1 : cols + 1]


def basis_matrix(space: KnotVector, ts, order: int = 0) -> np.ndarray:
    """Values (or a derivative) of all n functions at the given parameters.

    Returns an array of shape ``(len(ts), n)``, computed by the iterative
    Cox-de Boor table (shared work across functions); derivatives use the
    standard degree-reduction differences.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    p = space.degree
    if not 0 <= order <= p:
        raise ValueError(f"derivative order {order} outside [0, {p}]")
    knots = space.knots
    t_close = float(knots[space.n])
    B = _indicator_table(knots, ts, t_close)
    for d in range(1, p - order + 1):
        B = _raise_degree(knots, B, d, ts)
    for r in range(order):
        d = p - order + r + 1
        cols = B.shape[1] - 1
        left_den = knots[d : d + cols] - knots[:cols]
        right_den = knots[d + 1 : d + 1 + cols] - knots[1 : 1 + cols]
        with np.errstate(divide="ignore", invalid="ignore"):
            lt = np.where(left_den > 0, d / left_den, 0.0)
            rt = np.where(right_den > 0, d / right_den, 0.0)
        B = lt * B[:, :cols] - rt * B[:, 1 : cols + 1]
    return B[:, : space.n]


def insert_knot(space: KnotVector, coefs: np.ndarray, t_new: float) -> tuple[KnotVector, np.ndarray]:
    """Boehm knot insertion.

    ``coefs`` has shape (n, ...); the refined representation with n+1
    coefficients describes the same spline pointwise.  Insertion at a knot
    that already has multiplicity >= degree is refused because the periodic
    construction relies on the smoothness of simple interior knots.
    """
    knots = space.knots
    p = space.degree
    lo, hi = knots[0], knots[-1]
    if not (lo < t_new < hi):
        raise ValueError(f"new knot {t_new} not strictly inside ({lo}, {hi})")
    mult = int(np.count_nonzero(knots == t_new))
    if mult >= max(p, 1):
        raise ValueError(f"knot {t_new} already has multiplicity {mult}")
    k = int(np.searchsorted(knots, t_new, side="right") - 1)
    coefs = np.asarray(coefs)
    n = space.n
    if coefs.shape[0] != n:
        raise ValueError("coefficient count does not match knot vector")
    new_knots = np.insert(knots, k + 1, t_new)
    new = np.empty((n + 1,) + coefs.shape[1:], dtype=coefs.dtype)
    for i in range(n + 1):
        if i <= k - p:
            new[i] = coefs[i]
        elif i >= k + 1:
            new[i] = coefs[i - 1]
        else:
            # Blend; outside the curve domain the affected functions do not
            # exist, so their coefficients are clamped (invisible on the
            # domain, which keeps the represented curve pointwise unchanged).
            lo = coefs[max(i - 1, 0)]
            hi = coefs[min(i, n - 1)]
            denom = knots[i + p] - knots[i] if i + p <= n + p else 0.0
            if denom > 0:
                alpha = (t_new - knots[i]) / denom
                new[i] = alpha * hi + (1.0 - alpha) * lo
            else:
                new[i] = hi
    return KnotVector(new_knots, p), new


@dataclass(frozen=True)
class SplineCurve2D:
    """Plane B-spline curve: a knot vector plus n control points (x_i, y_i)."""

    space: KnotVector
    control: np.ndarray = field(repr=False)

    def __post_init__(self):
        control = np.asarray(self.control, dtype=float)
        object.__setattr__(self, "control", control)
        if control.shape != (self.space.n, 2):
            raise ValueError("control must have shape (n, 2)")

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        B = basis_matrix(self.space, [t], order)[0]
        return B @ self.control
