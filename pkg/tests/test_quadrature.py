"""Tests for quadrature rules, pair classification and singular 4D rules."""

import numpy as np
import pytest
from scipy.integrate import dblquad

from qpbem.geometry import bezier_elements, plane_surface
from qpbem.quadrature import (
    PairClass,
    classify_pair,
    gauss_legendre,
    integrate_pair,
    pair_offset,
    singular_nodes,
    tensor_nodes,
)


class TestGaussLegendre:
    def test_single_point(self):
        r = gauss_legendre(1)
        assert r.nodes[0] == pytest.approx(0.5)
        assert r.weights[0] == pytest.approx(1.0)

    def test_exactness_degree7(self):
        r = gauss_legendre(4)
        val = np.sum(r.weights * r.nodes**7)
        assert val == pytest.approx(1.0 / 8.0, abs=1e-14)

    def test_cosine_with_12_points(self):
        r = gauss_legendre(12)
        val = np.sum(r.weights * np.cos(10 * r.nodes))
        assert val == pytest.approx(np.sin(10.0) / 10.0, abs=1e-12)

    def test_weights_sum_to_one(self):
        for n in (1, 2, 5, 9, 12):
            assert np.sum(gauss_legendre(n).weights) == pytest.approx(1.0, abs=1e-14)


class TestClassification:
    def test_coincident(self):
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        els = bezier_elements(s)
        pc = classify_pair(s, els[7], els[7])
        assert pc.kind == "coincident" and pc.shift == (0, 0)

    def test_wraparound_edge(self):
        s = plane_surface(1.0, 1.0, 5, 5, 1, 1)  # 4x4 element grid
        els = bezier_elements(s)
        by_idx = {(e.i1, e.i2): e for e in els}
        pc = classify_pair(s, by_idx[(0, 1)], by_idx[(3, 1)])
        assert pc.kind == "edge" and pc.shift == (-1, 0)

    def test_wraparound_vertex(self):
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)  # 5x5 element grid
        els = bezier_elements(s)
        by_idx = {(e.i1, e.i2): e for e in els}
        pc = classify_pair(s, by_idx[(0, 0)], by_idx[(4, 4)])
        assert pc.kind == "vertex" and pc.shift == (-1, -1)
        # oracle: the shifted replica's corner physically touches e1's corner
        e1, e2 = by_idx[(0, 0)], by_idx[(4, 4)]
        assert e2.rect[1] - 1.0 * (s.space1.knots[s.space1.n] - s.space1.knots[s.degrees[0]]) == pytest.approx(e1.rect[0], abs=1e-12)

    def test_separated(self):
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        els = bezier_elements(s)
        by_idx = {(e.i1, e.i2): e for e in els}
        pc = classify_pair(s, by_idx[(0, 0)], by_idx[(2, 2)])
        assert pc.kind == "separated"

    def test_symmetry_under_swap(self):
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        els = bezier_elements(s)
        rng = np.random.default_rng(0)
        for _ in range(40):
            e1, e2 = rng.choice(els, 2)
            a = classify_pair(s, e1, e2)
            b = classify_pair(s, e2, e1)
            assert a.kind == b.kind
            assert a.shift == (-b.shift[0], -b.shift[1])

    def test_singular_pair_count_is_9_per_element(self):
        for ne in (3, 4, 5):
            s = plane_surface(1.0, 1.0, ne + 1, ne + 1, 1, 1)
            els = bezier_elements(s)
            n_sing = sum(
                classify_pair(s, e1, e2).is_singular for e1 in els for e2 in els
            )
            assert n_sing == len(els) * 9


def reduced_pair_oracle(kernel_u, offset):
    """Independent oracle for translation-invariant kernels on unit squares.

    int_{[0,1]^2 x [0,1]^2} K(y + off - x) dx dy reduces to the correlation
    integral int_{[-1,1]^2} K(u + off) (1-|u1|)(1-|u2|) du, integrated here
    adaptively (QUADPACK); for adjacent squares the singular point sits on the
    domain boundary, which QUADPACK handles.
    """
    def f(u2, u1):
        return kernel_u(u1 + offset[0], u2 + offset[1]) * (1 - abs(u1)) * (1 - abs(u2))

    val, err = dblquad(f, -1, 1, -1, 1, epsabs=1e-11, epsrel=1e-11)
    return val


def coincident_polar_oracle(radial_kernel):
    """Oracle for the coincident case in polar coordinates.

    Computes int_{[-1,1]^2} k(|u|) (1-|u1|)(1-|u2|) du for a radial kernel by
    8-fold symmetry: the radial integral of k(r) r (1 - r cos) (1 - r sin) is
    done adaptively per angle, then integrated over the first octant.
    """
    from scipy.integrate import quad

    def per_angle(phi):
        c, s = np.cos(phi), np.sin(phi)
        rmax = 1.0 / c

        def fr(r):
            return radial_kernel(r) * r * (1 - r * c) * (1 - r * s)

        v, _ = quad(fr, 0.0, rmax, epsabs=1e-13, epsrel=1e-12)
        return v

    val, _ = quad(per_angle, 0.0, np.pi / 4, epsabs=1e-12, epsrel=1e-12)
    return 8 * val


def unit_square_pair_value(kind, offset, n, kernel_u):
    xi, eta, w = singular_nodes(kind, offset, n)
    u1 = eta[:, 0] + offset[0] - xi[:, 0]
    u2 = eta[:, 1] + offset[1] - xi[:, 1]
    return complex(np.sum(kernel_u(u1, u2) * w))


class TestSingularRules:
    def test_weights_integrate_constants(self):
        for kind, off in [("coincident", (0, 0)), ("edge", (1, 0)), ("edge", (0, -1)),
                          ("vertex", (1, 1)), ("vertex", (-1, 1))]:
            _, _, w = singular_nodes(kind, off, 6)
            assert np.sum(w) == pytest.approx(1.0, abs=1e-13)

    @pytest.mark.parametrize("kind,offset", [
        ("edge", (1, 0)),
        ("edge", (-1, 0)),
        ("edge", (0, 1)),
        ("vertex", (1, 1)),
        ("vertex", (-1, -1)),
    ])
    def test_inverse_distance_against_adaptive_oracle(self, kind, offset):
        def kernel(u1, u2):
            return 1.0 / (4 * np.pi * np.hypot(u1, u2))

        ref = reduced_pair_oracle(kernel, offset)
        val = unit_square_pair_value(kind, offset, 12, kernel)
        assert val == pytest.approx(ref, rel=1e-6)

    def test_coincident_inverse_distance_against_polar_oracle(self):
        ref = coincident_polar_oracle(lambda r: 1.0 / (4 * np.pi * r))
        val = unit_square_pair_value(
            "coincident", (0, 0), 12, lambda u1, u2: 1.0 / (4 * np.pi * np.hypot(u1, u2))
        )
        assert val == pytest.approx(ref, rel=1e-6)

    @pytest.mark.parametrize("kind,offset", [
        ("coincident", (0, 0)), ("edge", (0, 1)), ("vertex", (1, -1)),
    ])
    def test_consecutive_orders_consistent(self, kind, offset):
        def kernel(u1, u2):
            return 1.0 / np.hypot(u1, u2)

        v10 = unit_square_pair_value(kind, offset, 10, kernel)
        v12 = unit_square_pair_value(kind, offset, 12, kernel)
        assert abs(v12 - v10) / abs(v12) < 1e-7

    def test_oscillatory_kernel_against_oracle(self):
        # complex Helmholtz-type kernel on a coincident pair
        k = 3.0

        def kernel_c(u1, u2):
            r = np.hypot(u1, u2)
            return np.exp(1j * k * r) / r

        ref_re = coincident_polar_oracle(lambda r: np.cos(k * r) / r)
        ref_im = coincident_polar_oracle(lambda r: np.sin(k * r) / r)
        val = unit_square_pair_value("coincident", (0, 0), 12, kernel_c)
        assert val == pytest.approx(complex(ref_re, ref_im), rel=1e-8)


class TestIntegratePair:
    def test_constant_kernel_separated(self):
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        els = bezier_elements(s)
        by_idx = {(e.i1, e.i2): e for e in els}
        ex, ey = by_idx[(0, 0)], by_idx[(3, 3)]
        pc = classify_pair(s, ex, ey)
        rules = (gauss_legendre(4), gauss_legendre(8))
        val = integrate_pair(lambda X, Y: np.ones(X.shape[0], dtype=complex),
                             ex, ey, pc, rules, surface=s)
        area = (ex.rect[1] - ex.rect[0]) * (ex.rect[3] - ex.rect[2])
        assert val == pytest.approx(area * area, rel=1e-12)

    def test_coincident_matches_unit_square_value(self):
        # physical squares of side h: the 1/(4 pi R) self-integral scales as h^3
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        els = bezier_elements(s)
        ex = els[0]
        pc = classify_pair(s, ex, ex)
        h_param = ex.rect[1] - ex.rect[0]
        scale = 1.0 / (s.space1.knots[s.space1.n] - s.space1.knots[s.degrees[0]])
        h_phys = h_param * scale

        def kernel(X, Y):
            # physical distance on the plane surface, including metric factors
            d = (X - Y) * scale
            r = np.hypot(d[:, 0], d[:, 1]) * 1.0
            return (scale**2) ** 2 / (4 * np.pi * r) + 0j

        rules = (gauss_legendre(4), gauss_legendre(12))
        val = integrate_pair(kernel, ex, ex, pc, rules, surface=s)
        ref = coincident_polar_oracle(lambda r: 1.0 / (4 * np.pi * r)) * h_phys**3
        assert val.real == pytest.approx(ref, rel=1e-6)

    def test_periodic_replica_equals_translated_configuration(self):
        # wrap-adjacent pair with the free-space kernel == physically translated pair
        s = plane_surface(1.0, 1.0, 5, 5, 1, 1)
        els = bezier_elements(s)
        by_idx = {(e.i1, e.i2): e for e in els}
        ex, ey = by_idx[(0, 1)], by_idx[(3, 1)]
        pc = classify_pair(s, ex, ey)
        assert pc.kind == "edge" and pc.shift == (-1, 0)
        dom_len = s.space1.knots[s.space1.n] - s.space1.knots[s.degrees[0]]

        def kernel_wrapped(X, Y):
            d = X.copy()
            d[:, 0] -= Y[:, 0] + pc.shift[0] * dom_len
            d[:, 1] -= Y[:, 1]
            r = np.hypot(d[:, 0], d[:, 1])
            return 1.0 / r + 0j

        rules = (gauss_legendre(4), gauss_legendre(10))
        val = integrate_pair(kernel_wrapped, ex, ey, pc, rules, surface=s)

        # same configuration without wrap: neighbouring elements (0,1) and (1,1),
        # with y measured from the element to the *left* of x
        ex2, ey2 = by_idx[(1, 1)], by_idx[(0, 1)]
        pc2 = classify_pair(s, ex2, ey2)
        assert pc2.kind == "edge" and pc2.shift == (0, 0)

        def kernel_plain(X, Y):
            d = X - Y
            r = np.hypot(d[:, 0], d[:, 1])
            return 1.0 / r + 0j

        val2 = integrate_pair(kernel_plain, ex2, ey2, pc2, rules, surface=s)
        assert val == pytest.approx(val2, rel=1e-10)

    def test_tensor_nodes_shapes(self):
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        els = bezier_elements(s)
        xg, wx, yg, wy = tensor_nodes(els[0], els[5], gauss_legendre(4))
        assert xg.shape == (16, 2) and wx.shape == (16,)
        area = (els[0].rect[1] - els[0].rect[0]) * (els[0].rect[3] - els[0].rect[2])
        assert np.sum(wx) == pytest.approx(area, rel=1e-14)

    def test_pair_offset_wraps(self):
        s = plane_surface(1.0, 1.0, 5, 5, 1, 1)
        els = bezier_elements(s)
        by_idx = {(e.i1, e.i2): e for e in els}
        pc = classify_pair(s, by_idx[(0, 0)], by_idx[(3, 3)])
        off = pair_offset(s, by_idx[(0, 0)], by_idx[(3, 3)], pc.shift)
        assert off == (-1, -1)
