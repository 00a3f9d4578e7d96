"""Tests for the quasi-periodic Green's function (Ewald path and oracles)."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import erfc as erfc_real, wofz

from qpbem.greens import (
    AnomalyError,
    GreensCache,
    default_split_parameter,
    free_space_g,
    gp,
    gp_rayleigh_series,
    gp_regular,
    gp_regular_with_grad,
    gp_with_grad,
    grad_free_space_g,
    grad_gp,
    make_context,
    mode_k3,
)


def ctx_default(k=8.0, beta=(4.0, 4.0), **kw):
    return make_context(k, 1.0, 1.0, beta[0], beta[1], **kw)


def sample_points(n=20, seed=0, z=(0.05, 0.6)):
    rng = np.random.default_rng(seed)
    r = rng.uniform(-0.45, 0.45, size=(n, 3))
    r[:, 2] = rng.uniform(*z, size=n) * rng.choice([-1, 1], size=n)
    return r


class TestFreeSpace:
    def test_static_limit(self):
        r = np.array([0.3, -0.2, 0.5])
        R = np.linalg.norm(r)
        assert free_space_g(1e-12, r) == pytest.approx(1 / (4 * np.pi * R), rel=1e-9)

    def test_phase_closes_at_wavelength(self):
        r = np.array([0.0, 0.0, 1.0])
        assert free_space_g(2 * np.pi, r) == pytest.approx(1 / (4 * np.pi), rel=1e-13)

    def test_gradient_finite_difference(self):
        k = 5.0
        r = np.array([0.21, -0.35, 0.4])
        g = grad_free_space_g(k, r)
        h = 1e-7
        for c in range(3):
            dr = np.zeros(3)
            dr[c] = h
            fd = (free_space_g(k, r + dr) - free_space_g(k, r - dr)) / (2 * h)
            assert abs(fd - g[c]) < 1e-8 * max(1.0, abs(g[c]))

    def test_singularity_raises(self):
        with pytest.raises(ValueError):
            free_space_g(1.0, np.zeros(3))


class TestQuasiPeriodicity:
    def test_lattice_shift_direction1(self):
        ctx = ctx_default()
        r = sample_points()
        lhs = gp(ctx, r - np.array([ctx.L1, 0, 0]))
        rhs = np.exp(-1j * ctx.beta1) * gp(ctx, r)
        assert np.max(np.abs(lhs - rhs) / np.abs(rhs)) < 1e-10

    def test_lattice_shift_direction2(self):
        ctx = ctx_default(beta=(0.7, -2.2))
        r = sample_points(seed=3)
        lhs = gp(ctx, r - np.array([0, ctx.L2, 0]))
        rhs = np.exp(-1j * ctx.beta2) * gp(ctx, r)
        assert np.max(np.abs(lhs - rhs) / np.abs(rhs)) < 1e-10

    def test_gradient_lattice_shift(self):
        ctx = ctx_default(beta=(1.0, 0.5))
        r = sample_points(n=8, seed=5)
        lhs = grad_gp(ctx, r - np.array([0, ctx.L2, 0]))
        rhs = np.exp(-1j * ctx.beta2) * grad_gp(ctx, r)
        assert np.max(np.abs(lhs - rhs)) < 1e-10 * np.max(np.abs(rhs))

    def test_negated_phase_point_reflection(self):
        # G^p(-r) with phases (-b1, -b2) equals G^p(r) with (b1, b2)
        ctx = ctx_default(beta=(0.9, -0.4))
        ctxm = ctx_default(beta=(-0.9, 0.4))
        r = sample_points(n=10, seed=7)
        assert np.max(np.abs(gp(ctxm, -r) - gp(ctx, r))) < 1e-12


class TestEwaldAgainstOracles:
    def test_rayleigh_series_agreement(self):
        ctx = ctx_default()
        r = sample_points(n=15, seed=1, z=(0.4, 0.4))
        ray = gp_rayleigh_series(ctx, r)
        ew = gp(ctx, r)
        assert np.max(np.abs(ray - ew) / np.abs(ew)) < 1e-10

    def test_splitting_parameter_independence(self):
        ctx = ctx_default()
        ctx2 = ctx_default(a=2 * ctx.a)
        r = sample_points(n=20, seed=2)
        v1, v2 = gp(ctx, r), gp(ctx2, r)
        assert np.max(np.abs(v1 - v2) / np.abs(v1)) < 1e-10

    def test_helmholtz_residual(self):
        ctx = ctx_default()
        r = sample_points(n=10, seed=4, z=(0.25, 0.5))
        h = 1e-3 * ctx.L1
        lap = -6 * gp(ctx, r)
        for c in range(3):
            dr = np.zeros(3)
            dr[c] = h
            lap = lap + gp(ctx, r + dr) + gp(ctx, r - dr)
        lap /= h**2
        resid = np.abs(lap + ctx.k**2 * gp(ctx, r)) / np.abs(ctx.k**2 * gp(ctx, r))
        assert np.max(resid) < 1e-4

    def test_gradient_finite_difference(self):
        ctx = ctx_default(beta=(2.0, 1.0))
        r = sample_points(n=10, seed=6)
        g = grad_gp(ctx, r)
        h = 1e-6 * ctx.L1
        for c in range(3):
            dr = np.zeros(3)
            dr[c] = h
            fd = (gp(ctx, r + dr) - gp(ctx, r - dr)) / (2 * h)
            denom = np.maximum(np.abs(g[:, c]), 1e-3 * np.max(np.abs(g)))
            assert np.max(np.abs(fd - g[:, c]) / denom) < 1e-6

    def test_truncation_monotonicity(self):
        ctx = ctx_default()
        r = sample_points(n=10, seed=8)
        base = gp(ctx, r)
        more = gp(ctx, r, extra_shells=2)
        assert np.max(np.abs(more - base) / np.abs(base)) < 10 * ctx.eps_ewald


class TestRegularPart:
    def test_definition_consistency(self):
        ctx = ctx_default()
        rng = np.random.default_rng(9)
        r = rng.normal(size=(12, 3))
        r *= 0.05 * ctx.L1 / np.linalg.norm(r, axis=1, keepdims=True)
        reg = gp_regular(ctx, r)
        direct = gp(ctx, r) - free_space_g(ctx.k, r)
        assert np.max(np.abs(reg - direct)) < 1e-12

    def test_richardson_continuity_to_zero(self):
        # gp_regular is smooth but not even in r for nonzero phases, so the
        # extrapolation eliminates linear and quadratic terms in |r|
        ctx = ctx_default()
        direction = np.array([0.6, 0.5, 0.624695])
        direction /= np.linalg.norm(direction)
        v = [gp_regular(ctx, (s * direction)[None, :])[0] for s in (1e-3, 1e-4, 1e-5)]
        v0 = gp_regular(ctx, np.zeros((1, 3)))[0]
        r1a = (10 * v[1] - v[0]) / 9
        r1b = (10 * v[2] - v[1]) / 9
        extrap = (100 * r1b - r1a) / 99
        assert abs(extrap - v0) < 1e-8 * max(1.0, abs(v0))

    def test_split_parameter_invariance_at_zero(self):
        v1 = gp_regular(ctx_default(), np.zeros((1, 3)))[0]
        v2 = gp_regular(ctx_default(a=2 * ctx_default().a), np.zeros((1, 3)))[0]
        assert abs(v1 - v2) < 1e-10 * max(1.0, abs(v1))

    def test_gradient_at_zero_matches_limit(self):
        # the gradient difference from its r=0 limit scales linearly in |r|
        ctx = ctx_default(beta=(1.3, -0.8))
        d = np.array([0.3, -0.2, 0.933])
        d /= np.linalg.norm(d)
        _, g0 = gp_regular_with_grad(ctx, np.zeros((1, 3)))
        _, ga = gp_regular_with_grad(ctx, (1e-3 * d)[None, :])
        _, gb = gp_regular_with_grad(ctx, (1e-4 * d)[None, :])
        na = np.max(np.abs(ga[0] - g0[0]))
        nb = np.max(np.abs(gb[0] - g0[0]))
        assert na / nb == pytest.approx(10.0, rel=0.2)
        assert nb < 1e-2 * np.max(np.abs(g0))


class TestGuards:
    def test_on_lattice_singularity(self):
        ctx = ctx_default()
        with pytest.raises(ValueError):
            gp(ctx, np.array([[ctx.L1, 0.0, 0.0]]))

    def test_anomaly_detection(self):
        with pytest.raises(AnomalyError):
            make_context(2 * np.pi, 1.0, 1.0, 0.0, 0.0)

    def test_mode_k3_branch(self):
        ctx = ctx_default()
        k3 = mode_k3(ctx, np.array([0, 3]), np.array([0, 0]))
        assert k3[0].imag == 0 and k3[0].real > 0
        assert k3[1].real == 0 and k3[1].imag > 0


class TestSpecialFunctionCrossChecks:
    def test_incomplete_gamma_recurrence_vs_quadrature(self):
        # y_j = (aR)^{2j-1} Gamma(1/2-j, (aR)^2) by downward recurrence,
        # validated against direct integration of the defining integral.
        for x in (0.1, 1.0, 10.0):
            aR = math.sqrt(x)
            y = math.sqrt(math.pi) * erfc_real(aR) / aR  # y_0
            for j in range(7):
                s = 0.5 - j
                val, _ = quad(lambda t, s=s: t ** (s - 1) * math.exp(-t), x, np.inf,
                              epsabs=1e-14, epsrel=1e-13)
                gamma_rec = y * aR ** (1 - 2 * j)  # Gamma(1/2 - j, x)
                assert gamma_rec == pytest.approx(val, rel=1e-10, abs=1e-13)
                y = (math.exp(-x) - x * y) / (j + 0.5)

    def test_complex_erfc_series_crosscheck(self):
        # independent power-series erfc against the Faddeeva-based evaluation
        def erfc_series(z, terms=120):
            total = 0.0 + 0.0j
            term = z
            for n in range(terms):
                if n > 0:
                    term = term * (-1) * z * z / n * (2 * n - 1) / (2 * n + 1)
                total += term
            return 1.0 - 2.0 / math.sqrt(math.pi) * total

        rng = np.random.default_rng(13)
        pts = rng.uniform(-1.5, 1.5, size=(20, 2))
        for re, im in pts:
            z = complex(re, im)
            via_wofz = np.exp(-z * z) * wofz(1j * z)
            assert abs(via_wofz - erfc_series(z)) < 1e-12


class TestCache:
    def test_cache_matches_direct(self):
        ctx = ctx_default()
        cache = GreensCache(ctx)
        r = sample_points(n=30, seed=10)
        r = np.vstack([r, r[:7]])  # duplicates exercise the memo path
        g, grad = cache.evaluate(r)
        g2, grad2 = gp_with_grad(ctx, r)
        assert np.max(np.abs(g - g2)) < 1e-13
        assert np.max(np.abs(grad - grad2)) < 1e-13

    def test_cache_persists_across_batches(self):
        ctx = ctx_default()
        cache = GreensCache(ctx)
        r = sample_points(n=12, seed=11)
        g1, _ = cache.evaluate(r)
        n_known = len(cache._keys)
        g2, _ = cache.evaluate(r[::-1])
        assert len(cache._keys) == n_known
        assert np.max(np.abs(g1[::-1] - g2)) == 0.0
