"""Divergence-conforming vector bases on a periodic surface.

Two tangential B-spline families span the current space: family 1 points
along dx/dt1 with a degree-(q1, q2-1) scalar factor, family 2 along dx/dt2
with degree (q1-1, q2).  Seam degrees of freedom are tied together with Bloch
phase factors so that either the conormal component alone (variant "M") or
the full vector (variant "N") is quasi-periodic across the cell boundary.
The weight functions used for Galerkin testing are the complex conjugates,
which carry the inverse phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .bspline import KnotVector, basis_matrix
from .geometry import PeriodicSurface, surface_eval, surface_eval_points


def derive_knots(knots, n: int, p: int, q: int):
    """Derive the basis knot sequence of degree q from a surface knot sequence.

    Pure-list arithmetic (works with fractions.Fraction for exact checks).
    For p >= q the outer p-q knots are stripped from each end; for p < q the
    ends are extended by reflected knots.  If the function count m ends up
    below 2q, the sequence is refined by midpoint insertion (re-truncated to
    keep the domain alignment) until m >= 2q.

    Returns (U, m) with len(U) == m + q + 1.
    """
    knots = list(knots)
    if len(knots) != n + p + 1:
        raise ValueError("knot count must be n + p + 1")
    if p >= q:
        r = p - q
        U = knots[r : len(knots) - r] if r else knots[:]
        m = n - r
    else:
        s = q - p
        lower = [knots[n - p - i] - (knots[n - p] - knots[0]) for i in range(s, 0, -1)]
        upper = [knots[2 * p + i] + (knots[n + p] - knots[2 * p]) for i in range(1, s + 1)]
        U = lower + knots + upper
        m = n + s
    while m < 2 * q:
        mids = [(U[i] + U[i + 1]) / 2 for i in range(len(U) - 1)]
        doubled = []
        for i, u in enumerate(U[:-1]):
            doubled += [u, mids[i]]
        doubled.append(U[-1])
        U = doubled[q : len(doubled) - q]
        m = len(U) - q - 1
    return U, m


def derive_basis_knots(space: KnotVector, q: int) -> tuple[np.ndarray, int]:
    """Array version of :func:`derive_knots` for a surface KnotVector."""
    U, m = derive_knots(space.knots.tolist(), space.n, space.degree, q)
    return np.asarray(U, dtype=float), m


@dataclass(frozen=True)
class BasisDirection:
    """Degree-q knot sequence for one parametric direction of the basis."""

    degree: int
    knots: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return self.knots.size - self.degree - 1

    @cached_property
    def full(self) -> KnotVector:
        return KnotVector(self.knots, self.degree)

    @cached_property
    def reduced(self) -> KnotVector:
        """Degree q-1 space over the knot sequence with the end knots dropped."""
        return KnotVector(self.knots[1:-1], self.degree - 1)


@dataclass(frozen=True)
class BasisKnots:
    """Per-direction basis knots plus the derived m-bar / q-bar bookkeeping."""

    dir1: BasisDirection
    dir2: BasisDirection

    @property
    def mbar(self) -> tuple[int, int, int, int]:
        return (self.dir1.m, self.dir2.m - 1, self.dir1.m - 1, self.dir2.m)

    @property
    def qbar(self) -> tuple[int, int, int, int]:
        return (self.dir1.degree, self.dir2.degree - 1, self.dir1.degree - 1, self.dir2.degree)

    def validate_against(self, surface: PeriodicSurface, tol: float = 1e-12) -> None:
        """Check domain alignment, knot abundance and end spacing."""
        for d, sp in ((self.dir1, surface.space1), (self.dir2, surface.space2)):
            q, m = d.degree, d.m
            lo, hi = sp.domain
            if abs(d.knots[q] - lo) > tol or abs(d.knots[m] - hi) > tol:
                raise ValueError("basis knots are not aligned with the surface domain")
            if m < 2 * q:
                raise ValueError("too few basis functions (m < 2q)")
            du = np.diff(d.knots)
            if np.max(np.abs(du[: 2 * q] - du[m - q : m + q])) > tol:
                raise ValueError("end-spacing condition violated")


def basis_knots_for_surface(surface: PeriodicSurface, q1: int, q2: int | None = None) -> BasisKnots:
    if q2 is None:
        q2 = q1
    if min(q1, q2) < 1:
        raise ValueError("vector basis degree must be >= 1")
    U1, _ = derive_basis_knots(surface.space1, q1)
    U2, _ = derive_basis_knots(surface.space2, q2)
    bk = BasisKnots(BasisDirection(q1, U1), BasisDirection(q2, U2))
    bk.validate_against(surface)
    return bk


def count_dofs(knots: BasisKnots) -> int:
    m1, m2, m3, m4 = knots.mbar
    q1, q2, q3, q4 = knots.qbar
    return (m1 - q1) * (m2 - q2) + (m3 - q3) * (m4 - q4)


@dataclass(frozen=True)
class Term:
    """One raw tangential function entering a DOF, with its Bloch phase."""

    family: int      # 1 or 2
    i: int           # raw function index, direction 1 factor
    j: int           # raw function index, direction 2 factor
    phase: complex


class VectorBasis:
    """Quasi-periodic vector basis ("N" or "M" variant) on one surface.

    DOFs are enumerated family-major, then i, then j; both variants share the
    same index set, so the assembled systems are directly comparable.
    """

    def __init__(self, surface: PeriodicSurface, knots: BasisKnots,
                 beta: tuple[float, float] = (0.0, 0.0), variant: str = "N"):
        if variant not in ("N", "M"):
            raise ValueError("variant must be 'N' or 'M'")
        self.surface = surface
        self.knots = knots
        self.beta = (float(beta[0]), float(beta[1]))
        self.variant = variant
        mb, qb = knots.mbar, knots.qbar
        # per family: (#i DOFs, #j DOFs); the pairing shifts equal the counts
        self.family_shape = ((mb[0] - qb[0], mb[1] - qb[1]), (mb[2] - qb[2], mb[3] - qb[3]))
        self.n_dofs = sum(ni * nj for ni, nj in self.family_shape)

    @classmethod
    def create(cls, surface: PeriodicSurface, q: int, beta=(0.0, 0.0), variant: str = "N"):
        return cls(surface, basis_knots_for_surface(surface, q), beta, variant)

    # -- index bookkeeping ---------------------------------------------------

    def unflatten(self, a: int) -> tuple[int, int, int]:
        """Linear DOF index -> (family h, i, j)."""
        if not 0 <= a < self.n_dofs:
            raise ValueError(f"DOF index {a} out of range [0, {self.n_dofs})")
        n1 = self.family_shape[0][0] * self.family_shape[0][1]
        if a < n1:
            ni, nj = self.family_shape[0]
            return 1, a // nj, a % nj
        a -= n1
        ni, nj = self.family_shape[1]
        return 2, a // nj, a % nj

    def flatten(self, h: int, i: int, j: int) -> int:
        ni, nj = self.family_shape[h - 1]
        if not (0 <= i < ni and 0 <= j < nj):
            raise ValueError(f"DOF ({h},{i},{j}) out of range")
        base = 0 if h == 1 else self.family_shape[0][0] * self.family_shape[0][1]
        return base + i * nj + j

    def factor_spaces(self, h: int) -> tuple[KnotVector, KnotVector]:
        """Scalar spline spaces of the two parametric factors of family h."""
        if h == 1:
            return self.knots.dir1.full, self.knots.dir2.reduced
        return self.knots.dir1.reduced, self.knots.dir2.full

    def terms(self, a: int) -> list[Term]:
        """Raw function/phase expansion of a DOF per the seam-pairing rules."""
        h, i, j = self.unflatten(a)
        ni, nj = self.family_shape[h - 1]
        qb = self.knots.qbar
        qi, qj = (qb[0], qb[1]) if h == 1 else (qb[2], qb[3])
        e1 = np.exp(1j * self.beta[0])
        e2 = np.exp(1j * self.beta[1])
        pair_i = i < qi and (self.variant == "N" or h == 1)
        pair_j = j < qj and (self.variant == "N" or h == 2)
        out = [Term(h, i, j, 1.0 + 0.0j)]
        if pair_i:
            out.append(Term(h, i + ni, j, e1))
        if pair_j:
            out.append(Term(h, i, j + nj, e2))
        if pair_i and pair_j:
            out.append(Term(h, i + ni, j + nj, e1 * e2))
        return out

    # -- evaluation ------------------------------------------------------------

    def eval_raw(self, h: int, i: int, j: int, t1: float, t2: float, geo=None):
        """Single tangential function (no phase): value 3-vector and surface div."""
        from .bspline import eval_bspline_many

        sp1, sp2 = self.factor_spaces(h)
        if not (0 <= i < sp1.n and 0 <= j < sp2.n):
            raise ValueError(f"raw index ({h},{i},{j}) out of range")
        b1 = eval_bspline_many(sp1, i, t1)[0]
        b2 = eval_bspline_many(sp2, j, t2)[0]
        if geo is None:
            _, d1, d2, _, jac = surface_eval(self.surface, t1, t2)
        else:
            d1, d2, jac = geo
        tangent = d1 if h == 1 else d2
        value = (b1 * b2 / jac) * tangent
        if h == 1:
            div = eval_bspline_many(sp1, i, t1, 1)[0] * b2 / jac
        else:
            div = b1 * eval_bspline_many(sp2, j, t2, 1)[0] / jac
        return value, div

    def eval(self, a: int, t1: float, t2: float, geo=None):
        """DOF value (complex 3-vector) and surface divergence at a parameter pair."""
        if geo is None:
            _, d1, d2, _, jac = surface_eval(self.surface, t1, t2)
            geo = (d1, d2, jac)
        value = np.zeros(3, dtype=complex)
        div = 0.0 + 0.0j
        for term in self.terms(a):
            v, d = self.eval_raw(term.family, term.i, term.j, t1, t2, geo)
            value += term.phase * v
            div += term.phase * d
        return value, div

    def eval_weight(self, a: int, t1: float, t2: float):
        """Galerkin weight: the complex conjugate of the DOF (inverse phases)."""
        v, d = self.eval(a, t1, t2)
        return np.conj(v), np.conj(d)

    # -- element tables (assembly backend) -------------------------------------

    def _owner(self, h: int, raw_i: int, raw_j: int):
        """Map a raw function pair to its owning (dof, phase), or None."""
        ni, nj = self.family_shape[h - 1]
        qb = self.knots.qbar
        qi, qj = (qb[0], qb[1]) if h == 1 else (qb[2], qb[3])
        phase = 1.0 + 0.0j
        i = raw_i
        if raw_i >= ni:
            i = raw_i - ni
            if i >= qi or (self.variant == "M" and h != 1):
                return None
            phase *= np.exp(1j * self.beta[0])
        j = raw_j
        if raw_j >= nj:
            j = raw_j - nj
            if j >= qj or (self.variant == "M" and h != 2):
                return None
            phase *= np.exp(1j * self.beta[1])
        return self.flatten(h, i, j), phase

    def element_terms(self, el) -> list[tuple[int, complex, int, int, int]]:
        """Active (dof, phase, h, raw_i, raw_j) on a Bezier element."""
        out = []
        for h in (1, 2):
            sp1, sp2 = self.factor_spaces(h)
            a1, b1, a2, b2 = el.rect
            tol = 1e-12
            for i in range(sp1.n):
                if sp1.knots[i] >= b1 - tol or sp1.knots[i + sp1.degree + 1] <= a1 + tol:
                    continue
                for j in range(sp2.n):
                    if sp2.knots[j] >= b2 - tol or sp2.knots[j + sp2.degree + 1] <= a2 + tol:
                        continue
                    owned = self._owner(h, i, j)
                    if owned is not None:
                        out.append((owned[0], owned[1], h, i, j))
        return out


@dataclass
class ElementTable:
    """Raw basis data of one element at a set of parameter points.

    ``values`` holds B_i(t1) B_j(t2) * dx/dt_h (no 1/J: in parametric-measure
    integrals the Jacobians of the surface measure cancel it), ``divs`` holds
    d/dt_h [B_i B_j].  ``phases`` are the Bloch factors of the owning DOFs.
    """

    dofs: np.ndarray      # (T,) int
    phases: np.ndarray    # (T,) complex
    values: np.ndarray    # (M, T, 3) float
    divs: np.ndarray      # (M, T) float


def tabulate_element(basis: VectorBasis, el, params: np.ndarray,
                     geo=None) -> ElementTable:
    """Build the raw basis table of one element at scattered (M, 2) points."""
    params = np.asarray(params, dtype=float)
    if geo is None:
        _, d1, d2, _, _ = surface_eval_points(basis.surface, params)
    else:
        d1, d2 = geo
    terms = basis.element_terms(el)
    M, T = params.shape[0], len(terms)
    values = np.zeros((M, T, 3))
    divs = np.zeros((M, T))
    cache: dict[tuple, np.ndarray] = {}

    def col(sp, idx, t, order):
        # full basis tables are shared across terms of the same factor space
        key = (id(sp), order)
        if key not in cache:
            cache[key] = basis_matrix(sp, t, order)
        return cache[key][:, idx]

    t1, t2 = params[:, 0], params[:, 1]
    for c, (dof, phase, h, i, j) in enumerate(terms):
        sp1, sp2 = basis.factor_spaces(h)
        b1 = col(sp1, i, t1, 0)
        b2 = col(sp2, j, t2, 0)
        tangent = d1 if h == 1 else d2
        values[:, c, :] = (b1 * b2)[:, None] * tangent
        if h == 1:
            divs[:, c] = col(sp1, i, t1, 1) * b2
        else:
            divs[:, c] = b1 * col(sp2, j, t2, 1)
    return ElementTable(
        dofs=np.array([t[0] for t in terms], dtype=np.int64),
        phases=np.array([t[1] for t in terms], dtype=complex),
        values=values,
        divs=divs,
    )
