"""Periodic B-spline curves and doubly-periodic tensor-product surfaces.

A periodic curve connects x = -L/2 to x = +L/2 with matching y-derivatives up
to order p-1 at the two parameter ends, so that its periodic continuation is
C^{p-1}.  Surfaces are tensor products of two such curves; the free design
input is the grid of third components of the control net.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .bspline import KnotVector, basis_matrix, insert_knot
from .quadrature import gauss_legendre


def uniform_knots(n: int, p: int) -> np.ndarray:
    """Knots t_i = i/(n+p) for i = 0..n+p."""
    return np.arange(n + p + 1, dtype=float) / (n + p)


def periodic_control_x(L: float, n: int, p: int) -> np.ndarray:
    """Horizontal control coordinates x_i = -L/2 - L(p-1)/(2(n-p)) + iL/(n-p)."""
    i = np.arange(n, dtype=float)
    return -L / 2 - L * (p - 1) / (2 * (n - p)) + i * L / (n - p)


def wrap_heights(values: np.ndarray, n: int, p: int) -> np.ndarray:
    """Extend n-p free coefficients to n by the periodic wrap y_{n-p+i} = y_i."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != n - p:
        raise ValueError(f"expected {n - p} free values, got {values.shape[0]}")
    out = np.empty((n,) + values.shape[1:])
    out[: n - p] = values
    for j in range(n - p, n):
        out[j] = out[j - (n - p)]
    return out


@dataclass(frozen=True)
class PeriodicCurve:
    """Periodic B-spline curve of period L on the xy-plane."""

    period: float
    space: KnotVector
    control: np.ndarray = field(repr=False)

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        B = basis_matrix(self.space, [t], order)[0]
        return B @ self.control

    @property
    def domain(self) -> tuple[float, float]:
        return self.space.domain


def build_periodic_curve(L: float, n: int, p: int, y_heights) -> PeriodicCurve:
    """Construct a periodic curve from the n-p free control heights.

    Uniform knots, horizontally uniform control abscissae and the wrap of the
    trailing p heights guarantee x(t_p) = -L/2, x(t_n) = +L/2 and matching
    y-derivatives up to order p-1 at the two ends.
    """
    if p < 1:
        raise ValueError("degree must be >= 1")
    if n <= p:
        raise ValueError(f"need n > p, got n={n}, p={p}")
    y = wrap_heights(np.asarray(y_heights, dtype=float), n, p)
    x = periodic_control_x(L, n, p)
    space = KnotVector(uniform_knots(n, p), p)
    return PeriodicCurve(L, space, np.column_stack([x, y]))


@dataclass(frozen=True)
class BezierElement:
    """One parametric knot rectangle of a surface, the unit of quadrature."""

    id: int          # 1-based linear id, direction-1 major
    i1: int          # span offset within the domain, direction 1
    i2: int
    rect: tuple[float, float, float, float]  # (t1a, t1b, t2a, t2b)

    @property
    def center(self) -> tuple[float, float]:
        a, b, c, d = self.rect
        return (0.5 * (a + b), 0.5 * (c + d))


class EvaluationError(RuntimeError):
    """Raised when a surface evaluation degenerates (vanishing Jacobian)."""


@dataclass(frozen=True)
class PeriodicSurface:
    """Doubly-periodic tensor-product B-spline surface over one unit cell.

    The control net has shape (n1, n2, 3).  Knots in each direction are
    uniformly spaced (any affine normalization); the parametric domain
    [t_{1,p1}, t_{1,n1}] x [t_{2,p2}, t_{2,n2}] maps onto the physical cell
    [-L1/2, L1/2] x [-L2/2, L2/2].  The stored normal points upward (from the
    lower layer into the upper one), fixing the sign conventions used
    throughout the assembly.
    """

    L1: float
    L2: float
    space1: KnotVector
    space2: KnotVector
    control: np.ndarray = field(repr=False)

    def __post_init__(self):
        control = np.asarray(self.control, dtype=float)
        object.__setattr__(self, "control", control)
        if control.shape != (self.space1.n, self.space2.n, 3):
            raise ValueError("control net shape must be (n1, n2, 3)")
        for sp in (self.space1, self.space2):
            d = np.diff(sp.knots)
            if d.size and not np.allclose(d, d[0], rtol=0, atol=1e-12 * max(abs(d[0]), 1)):
                raise ValueError("surface knot vectors must be uniformly spaced")

    @property
    def degrees(self) -> tuple[int, int]:
        return self.space1.degree, self.space2.degree

    @property
    def counts(self) -> tuple[int, int]:
        return self.space1.n, self.space2.n

    @property
    def domain(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return self.space1.domain, self.space2.domain

    @property
    def n_elements(self) -> tuple[int, int]:
        return (self.space1.n - self.space1.degree, self.space2.n - self.space2.degree)

    def with_offset(self, dz: float) -> "PeriodicSurface":
        """Copy of the surface rigidly translated by dz in x3."""
        control = self.control.copy()
        control[:, :, 2] += dz
        return PeriodicSurface(self.L1, self.L2, self.space1, self.space2, control)

    def x3_range(self) -> tuple[float, float]:
        """Bounds on the physical height (convex-hull property of B-splines)."""
        z = self.control[:, :, 2]
        return float(z.min()), float(z.max())


def build_periodic_surface(L1, L2, n1, n2, p1, p2, heights) -> PeriodicSurface:
    """Surface from the (n1-p1) x (n2-p2) grid of free third components.

    The remaining third components follow by the periodic wrap in both
    directions; the first and second components come from the horizontally
    uniform control rule per direction.
    """
    heights = np.asarray(heights, dtype=float)
    if heights.shape != (n1 - p1, n2 - p2):
        raise ValueError(f"heights grid must be {(n1 - p1, n2 - p2)}, got {heights.shape}")
    z = wrap_heights(wrap_heights(heights, n1, p1).T, n2, p2).T
    x = periodic_control_x(L1, n1, p1)
    y = periodic_control_x(L2, n2, p2)
    control = np.empty((n1, n2, 3))
    control[:, :, 0] = x[:, None]
    control[:, :, 1] = y[None, :]
    control[:, :, 2] = z
    return PeriodicSurface(
        L1, L2, KnotVector(uniform_knots(n1, p1), p1), KnotVector(uniform_knots(n2, p2), p2), control
    )


def build_periodic_surface_from_function(L1, L2, n1, n2, p1, p2, height_fn) -> PeriodicSurface:
    """Surface whose free control heights are height_fn(x, y) at the control abscissae."""
    x = periodic_control_x(L1, n1, p1)[: n1 - p1]
    y = periodic_control_x(L2, n2, p2)[: n2 - p2]
    heights = np.array([[float(height_fn(xi, yj)) for yj in y] for xi in x])
    return build_periodic_surface(L1, L2, n1, n2, p1, p2, heights)


def plane_surface(L1, L2, n1, n2, p1, p2, offset: float = 0.0) -> PeriodicSurface:
    """Flat interface at height ``offset``."""
    s = build_periodic_surface(L1, L2, n1, n2, p1, p2, np.zeros((n1 - p1, n2 - p2)))
    return s.with_offset(offset) if offset else s


def surface_eval_grid(s: PeriodicSurface, t1s, t2s):
    """Evaluate point, tangents, normal, Jacobian on a tensor grid of parameters.

    Returns arrays of shapes (m1, m2, 3) for point/d1/d2/normal and (m1, m2)
    for the Jacobian.
    """
    B1 = basis_matrix(s.space1, t1s)
    B2 = basis_matrix(s.space2, t2s)
    D1 = basis_matrix(s.space1, t1s, 1)
    D2 = basis_matrix(s.space2, t2s, 1)
    pt = np.einsum("ai,bj,ijk->abk", B1, B2, s.control, optimize=True)
    d1 = np.einsum("ai,bj,ijk->abk", D1, B2, s.control, optimize=True)
    d2 = np.einsum("ai,bj,ijk->abk", B1, D2, s.control, optimize=True)
    nrm = np.cross(d1, d2)
    jac = np.linalg.norm(nrm, axis=-1)
    if np.any(jac < 1e-14):
        raise EvaluationError("degenerate surface Jacobian")
    return pt, d1, d2, nrm / jac[..., None], jac


def surface_eval_points(s: PeriodicSurface, params: np.ndarray):
    """Same as surface_eval_grid but for scattered (N, 2) parameter pairs."""
    params = np.asarray(params, dtype=float)
    t1, t2 = params[:, 0], params[:, 1]
    B1 = basis_matrix(s.space1, t1)
    B2 = basis_matrix(s.space2, t2)
    D1 = basis_matrix(s.space1, t1, 1)
    D2 = basis_matrix(s.space2, t2, 1)
    A = np.einsum("mi,ijk->mjk", B1, s.control, optimize=True)
    Ad = np.einsum("mi,ijk->mjk", D1, s.control, optimize=True)
    pt = np.einsum("mj,mjk->mk", B2, A, optimize=True)
    d1 = np.einsum("mj,mjk->mk", B2, Ad, optimize=True)
    d2 = np.einsum("mj,mjk->mk", D2, A, optimize=True)
    nrm = np.cross(d1, d2)
    jac = np.linalg.norm(nrm, axis=-1)
    if np.any(jac < 1e-14):
        raise EvaluationError("degenerate surface Jacobian")
    return pt, d1, d2, nrm / jac[..., None], jac


def surface_eval(s: PeriodicSurface, t1: float, t2: float):
    """Point, both tangents, unit upward normal and Jacobian at one parameter pair."""
    pt, d1, d2, n, jac = surface_eval_grid(s, [t1], [t2])
    return pt[0, 0], d1[0, 0], d2[0, 0], n[0, 0], float(jac[0, 0])


def surface_partial(s: PeriodicSurface, t1: float, t2: float, k1: int, k2: int) -> np.ndarray:
    """Mixed partial derivative of the surface map of orders (k1, k2)."""
    B1 = basis_matrix(s.space1, [t1], k1)
    B2 = basis_matrix(s.space2, [t2], k2)
    return np.einsum("ai,bj,ijk->abk", B1, B2, s.control)[0, 0]


def bezier_elements(s: PeriodicSurface) -> list[BezierElement]:
    """All knot rectangles tiling the parametric domain, direction-1 major."""
    p1, p2 = s.degrees
    k1, k2 = s.space1.knots, s.space2.knots
    ne1, ne2 = s.n_elements
    out = []
    for i1 in range(ne1):
        for i2 in range(ne2):
            rect = (k1[p1 + i1], k1[p1 + i1 + 1], k2[p2 + i2], k2[p2 + i2 + 1])
            out.append(BezierElement(i1 * ne2 + i2 + 1, i1, i2, tuple(float(v) for v in rect)))
    return out


def _refine_direction(space: KnotVector, coefs: np.ndarray) -> tuple[KnotVector, np.ndarray]:
    """Insert the midpoint of every span, then drop the p outermost functions.

    The result is again a uniformly-spaced knot vector whose domain and spline
    are unchanged pointwise; the function count goes n -> 2n - p, doubling the
    element count.
    """
    p = space.degree
    mids = 0.5 * (space.knots[:-1] + space.knots[1:])
    kv, c = space, np.asarray(coefs)
    for t in mids:
        kv, c = insert_knot(kv, c, float(t))
    new_knots = kv.knots[p:-p] if p > 0 else kv.knots
    return KnotVector(new_knots, p), c[p : c.shape[0] - p]


def refine_uniform(s: PeriodicSurface) -> PeriodicSurface:
    """Uniform knot refinement in both directions (exact, 4x the elements)."""
    sp1, c = _refine_direction(s.space1, s.control.reshape(s.space1.n, -1))
    c = c.reshape(sp1.n, s.space2.n, 3)
    sp2, c2 = _refine_direction(s.space2, np.moveaxis(c, 1, 0).reshape(s.space2.n, -1))
    control = np.moveaxis(c2.reshape(sp2.n, sp1.n, 3), 0, 1)
    return PeriodicSurface(s.L1, s.L2, sp1, sp2, control)


def mesh_size(s: PeriodicSurface, n_gauss: int = 8) -> float:
    """Representative element length: sqrt of the largest element area."""
    rule = gauss_legendre(n_gauss)
    max_area = 0.0
    for el in bezier_elements(s):
        a, b, c, d = el.rect
        t1 = a + (b - a) * rule.nodes
        t2 = c + (d - c) * rule.nodes
        _, _, _, _, jac = surface_eval_grid(s, t1, t2)
        area = (b - a) * (d - c) * float(rule.weights @ jac @ rule.weights)
        max_area = max(max_area, area)
    return float(np.sqrt(max_area))


def export_control_net_json(s: PeriodicSurface, path) -> None:
    """Dump periods, degrees, knots and the control net for external viewers."""
    data = {
        "periods": [s.L1, s.L2],
        "degrees": list(s.degrees),
        "knots": [s.space1.knots.tolist(), s.space2.knots.tolist()],
        "control": s.control.tolist(),
    }
    with open(path, "w") as f:
        json.dump(data, f)


def export_triangulation_json(s: PeriodicSurface, path, samples_per_element: int = 4) -> None:
    """Sampled triangulation of one unit cell as JSON (vertices + triangles)."""
    (a1, b1), (a2, b2) = s.domain
    ne1, ne2 = s.n_elements
    m1 = ne1 * samples_per_element + 1
    m2 = ne2 * samples_per_element + 1
    t1 = np.linspace(a1, b1, m1)
    t2 = np.linspace(a2, b2, m2)
    pts, _, _, _, _ = surface_eval_grid(s, t1, t2)
    verts = pts.reshape(-1, 3)
    tris = []
    for i in range(m1 - 1):
        for j in range(m2 - 1):
            v = i * m2 + j
            tris.append([v, v + m2, v + 1])
            tris.append([v + 1, v + m2, v + m2 + 1])
    with open(path, "w") as f:
        json.dump({"vertices": verts.tolist(), "triangles": tris}, f)
