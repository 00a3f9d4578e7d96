"""Tensor Gauss-Legendre rules and regularized 4D quadrature for element pairs.

Element pairs are classified as coincident, edge- or vertex-adjacent
(including adjacency through a periodic replica of the trial element), or
separated.  Singular classes are integrated with relative-coordinate Duffy
decompositions of the 4D unit cube that remove the O(1/|x-y|) kernel
singularity; separated pairs use a plain tensor rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class GLRule:
    """Gauss-Legendre nodes and weights on [0, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.size


@lru_cache(maxsize=None)
def gauss_legendre(n_g: int) -> GLRule:
    """n_g-point Gauss-Legendre rule mapped to the unit interval."""
    if n_g < 1:
        raise ValueError("rule size must be >= 1")
    x, w = np.polynomial.legendre.leggauss(n_g)
    return GLRule(0.5 * (x + 1.0), 0.5 * w)


@dataclass(frozen=True)
class PairClass:
    """Adjacency class of an ordered element pair plus the realizing shift.

    ``shift`` is the lattice translation nu applied to the trial element so
    that its replica touches the test element; (0, 0) for same-cell adjacency.
    """

    kind: str                 # coincident | edge | vertex | separated
    shift: tuple[int, int]

    @property
    def is_singular(self) -> bool:
        return self.kind != "separated"


def _wrap_offset(delta: int, count: int) -> tuple[int, int] | None:
    """Reduce an index offset modulo the grid, returning (offset, lattice shift)."""
    for shift in (0, 1, -1):
        d = delta + shift * count
        if -1 <= d <= 1:
            return d, shift
    return None


def classify_pair(surface, e1, e2) -> PairClass:
    """Adjacency of two Bezier elements of one surface, with periodic wrap.

    Element column 0 is edge-adjacent to the last column through the lattice
    shift, etc.  Coincident requires e1 == e2 with zero shift.
    """
    ne1, ne2 = surface.n_elements
    r1 = _wrap_offset(e2.i1 - e1.i1, ne1)
    r2 = _wrap_offset(e2.i2 - e1.i2, ne2)
    if r1 is None or r2 is None:
        return PairClass("separated", (0, 0))
    d1, s1 = r1
    d2, s2 = r2
    if d1 == 0 and d2 == 0 and s1 == 0 and s2 == 0:
        return PairClass("coincident", (0, 0))
    if d1 == 0 and d2 == 0:
        # full wrap onto itself can only happen on 1-element grids
        return PairClass("coincident", (s1, s2))
    if d1 == 0 or d2 == 0:
        return PairClass("edge", (s1, s2))
    return PairClass("vertex", (s1, s2))


# ---------------------------------------------------------------------------
# Singular node sets on the unit configuration.
#
# All generators return (xi, eta, w): xi are local coordinates in the test
# element [0,1]^2, eta local coordinates in the trial element [0,1]^2, and w
# the 4D weights such that sum w * f(xi, eta) approximates
# int_{[0,1]^2} int_{[0,1]^2} f dx dy for f with an O(1/|x-y+off|) singularity,
# where off is the relative placement of the trial element.
# ---------------------------------------------------------------------------


def _gl4(n: int):
    g = gauss_legendre(n)
    a, b, c, d = np.meshgrid(g.nodes, g.nodes, g.nodes, g.nodes, indexing="ij")
    wa, wb, wc, wd = np.meshgrid(g.weights, g.weights, g.weights, g.weights, indexing="ij")
    w = (wa * wb * wc * wd).ravel()
    return a.ravel(), b.ravel(), c.ravel(), d.ravel(), w


def _nodes_coincident(n: int):
    """Relative coordinates u = y - x; Duffy split of each u-quadrant."""
    rho, v, s1, s2, w0 = _gl4(n)
    xs, ys, ws = [], [], []
    for sg1 in (-1.0, 1.0):
        for sg2 in (-1.0, 1.0):
            for tri in (0, 1):
                v1 = rho if tri == 0 else rho * v
                v2 = rho * v if tri == 0 else rho
                u1, u2 = sg1 * v1, sg2 * v2
                x1 = np.maximum(0.0, -u1) + s1 * (1.0 - v1)
                x2 = np.maximum(0.0, -u2) + s2 * (1.0 - v2)
                xs.append(np.stack([x1, x2], axis=-1))
                ys.append(np.stack([x1 + u1, x2 + u2], axis=-1))
                ws.append(w0 * rho * (1.0 - v1) * (1.0 - v2))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


def _nodes_edge(n: int):
    """Canonical shared edge: trial element at offset (+1, 0)."""
    rho, b, c, s, w0 = _gl4(n)
    xs, ys, ws = [], [], []
    for sg in (-1.0, 1.0):
        for region in range(3):
            if region == 0:
                alpha, beta, t = rho, rho * b, rho * c
            elif region == 1:
                alpha, beta, t = rho * b, rho, rho * c
            else:
                alpha, beta, t = rho * b, rho * c, rho
            wdir = sg * t
            x2 = np.maximum(0.0, -wdir) + s * (1.0 - t)
            x = np.stack([1.0 - alpha, x2], axis=-1)
            y = np.stack([beta, x2 + wdir], axis=-1)
            xs.append(x)
            ys.append(y)
            ws.append(w0 * rho * rho * (1.0 - t))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


def _nodes_vertex(n: int):
    """Canonical shared vertex: trial element at offset (+1, +1)."""
    rho, b, c, d, w0 = _gl4(n)
    xs, ys, ws = [], [], []
    for region in range(4):
        vals = [rho * b, rho * c, rho * d]
        vals.insert(region, rho)
        alpha, beta, gamma, delta = vals
        xs.append(np.stack([1.0 - alpha, 1.0 - beta], axis=-1))
        ys.append(np.stack([gamma, delta], axis=-1))
        ws.append(w0 * rho**3)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


def _transform_axes(xi, eta, w, offset):
    """Map canonical edge/vertex nodes to an arbitrary unit offset."""
    o1, o2 = offset
    xi = xi.copy()
    eta = eta.copy()
    if abs(o1) + abs(o2) == 1 and o1 == 0:
        # edge in direction 2: swap axes
        xi = xi[:, ::-1]
        eta = eta[:, ::-1]
        o1, o2 = o2, o1
    if o1 == -1:
        xi[:, 0] = 1.0 - xi[:, 0]
        eta[:, 0] = 1.0 - eta[:, 0]
    if o2 == -1:
        xi[:, 1] = 1.0 - xi[:, 1]
        eta[:, 1] = 1.0 - eta[:, 1]
    return xi, eta, w


@lru_cache(maxsize=None)
def singular_nodes(kind: str, offset: tuple[int, int], n_g: int):
    """Unit-configuration 4D nodes for a singular pair class.

    ``offset`` is the placement of the trial element relative to the test
    element in units of the element size, each component in {-1, 0, 1}.
    """
    if kind == "coincident":
        if offset != (0, 0):
            raise ValueError("coincident pairs have zero offset")
        return _nodes_coincident(n_g)
    if kind == "edge":
        if abs(offset[0]) + abs(offset[1]) != 1:
            raise ValueError(f"edge offset must have one unit component, got {offset}")
        return _transform_axes(*_nodes_edge(n_g), offset)
    if kind == "vertex":
        if abs(offset[0]) != 1 or abs(offset[1]) != 1:
            raise ValueError(f"vertex offset must be diagonal, got {offset}")
        return _transform_axes(*_nodes_vertex(n_g), offset)
    raise ValueError(f"unknown singular kind {kind!r}")


def pair_offset(surface, e1, e2, shift: tuple[int, int]) -> tuple[int, int]:
    """Relative element placement (in element units) of e2's shifted replica."""
    ne1, ne2 = surface.n_elements
    return (e2.i1 + shift[0] * ne1 - e1.i1, e2.i2 + shift[1] * ne2 - e1.i2)


def tensor_nodes(ex, ey, rule: GLRule):
    """Plain tensor nodes for a separated pair: per-element grids and weights."""
    ax, bx, cx, dx = ex.rect
    ay, by, cy, dy = ey.rect
    t1x = ax + (bx - ax) * rule.nodes
    t2x = cx + (dx - cx) * rule.nodes
    t1y = ay + (by - ay) * rule.nodes
    t2y = cy + (dy - cy) * rule.nodes
    wx = (bx - ax) * (dx - cx) * np.outer(rule.weights, rule.weights).ravel()
    wy = (by - ay) * (dy - cy) * np.outer(rule.weights, rule.weights).ravel()
    xg = np.stack(np.meshgrid(t1x, t2x, indexing="ij"), axis=-1).reshape(-1, 2)
    yg = np.stack(np.meshgrid(t1y, t2y, indexing="ij"), axis=-1).reshape(-1, 2)
    return xg, wx, yg, wy


def integrate_pair(kernel, ex, ey, pair_class: PairClass, rules, surface=None) -> complex:
    """Double-element integral of kernel(x_params, y_params) -> (M,) values.

    The kernel callback receives parameter pairs and must include all
    geometric factors and, for singular classes, the free-space singular
    kernel of the add-and-subtract split (the smooth remainder is integrated
    by the caller with the regular rule).  ``rules`` is (regular, singular).
    """
    regular, singular = rules
    if not pair_class.is_singular:
        xg, wx, yg, wy = tensor_nodes(ex, ey, regular)
        mx, my = xg.shape[0], yg.shape[0]
        X = np.repeat(xg, my, axis=0)
        Y = np.tile(yg, (mx, 1))
        vals = kernel(X, Y)
        return complex(np.sum(vals.reshape(mx, my) * np.outer(wx, wy)))
    if surface is None:
        raise ValueError("singular classes need the surface for the offset")
    off = pair_offset(surface, ex, ey, pair_class.shift)
    xi, eta, w = singular_nodes(pair_class.kind, off, singular.n)
    ax, bx, cx, dx = ex.rect
    ay, by, cy, dy = ey.rect
    X = np.stack([ax + (bx - ax) * xi[:, 0], cx + (dx - cx) * xi[:, 1]], axis=-1)
    Y = np.stack([ay + (by - ay) * eta[:, 0], cy + (dy - cy) * eta[:, 1]], axis=-1)
    scale = (bx - ax) * (dx - cx) * (by - ay) * (dy - cy)
    return complex(np.sum(kernel(X, Y) * w) * scale)
