"""Tests for the transfer-matrix oracle, same-media currents and SP line."""

import math

import numpy as np
import pytest

from qpbem.geometry import build_periodic_surface_from_function, plane_surface
from qpbem.reference import (
    PlanarStack,
    diffraction_order_k1,
    exact_same_media,
    sp_dispersion,
    tmatrix_solve,
)
from qpbem.waves import EPS0_SI, MU0_SI, IncidentWave, make_incident_wave


def problem1_wave(omega=8.0):
    return make_incident_wave(omega, math.pi / 4, math.pi / 4, [1.0, 1.0, 1.0])


def problem1_stack(omega=8.0, heights=(0.45, 0.15, -0.15, -0.45)):
    return PlanarStack((1.0, 2.25, 4.0, 2.25, 1.0), (1.0,) * 5, heights, problem1_wave(omega))


class TestWave:
    def test_transversality_enforced(self):
        with pytest.raises(ValueError):
            IncidentWave(8.0, math.pi / 4, math.pi / 4, np.array([1.0, 1.0, 1.0]) / np.sqrt(3))

    def test_projection_recovers_consistent_h(self):
        w = problem1_wave()
        # H must be perpendicular to both k and E, with unit impedance here
        assert abs(w.b_inc @ w.k_inc) < 1e-12
        assert abs(w.b_inc @ w.a_inc) < 1e-12
        assert np.linalg.norm(w.b_inc) == pytest.approx(1.0, rel=1e-12)
        # direction of H matches (1,-1,0)/sqrt(2) for this polarization choice
        assert np.allclose(np.abs(w.b_inc / np.linalg.norm(w.b_inc)),
                           [1 / np.sqrt(2), 1 / np.sqrt(2), 0], atol=1e-12)

    def test_te_tm_decomposition_roundtrip(self):
        w = problem1_wave()
        s_hat = np.array([-math.sin(w.phi), math.cos(w.phi), 0.0])
        p_hat = np.cross(w.direction, s_hat)
        a_te = w.a_inc @ s_hat
        a_tm = w.a_inc @ p_hat
        recomposed = a_te * s_hat + a_tm * p_hat
        assert np.allclose(recomposed, w.a_inc, atol=1e-14)


class TestFresnel:
    def test_single_interface_normal_incidence(self):
        # eps ratio 4 -> index ratio 2 -> r = -1/3, R = 1/9
        wave = make_incident_wave(5.0, 0.0, 0.0, [1.0, 0.0, 0.0])
        stack = PlanarStack((1.0, 4.0), (1.0, 1.0), (0.0,), wave)
        sol = tmatrix_solve(stack)
        # x-polarized at phi=0 is the TM channel; the H-amplitude ratio is
        # +1/3, i.e. an E-field reflection coefficient of -1/3
        r_h = sol.tm[0, 1] / sol.tm[0, 0]
        assert r_h == pytest.approx(1.0 / 3.0, abs=1e-13)
        E_up, _ = sol.fields(np.array([[0.0, 0.0, 0.4]]))
        e_refl = (E_up[0] - wave.e_field(np.array([0.0, 0.0, 0.4])))[0]
        phase = np.exp(1j * sol.k3[0] * 0.4)
        assert e_refl / phase == pytest.approx(-1.0 / 3.0, abs=1e-12)
        R, T = sol.reflectance_transmittance()
        assert R == pytest.approx(1.0 / 9.0, abs=1e-13)
        assert R + T == pytest.approx(1.0, abs=1e-12)

    def test_identical_media_no_reflection(self):
        wave = problem1_wave()
        stack = PlanarStack((1.0, 1.0, 1.0), (1.0,) * 3, (0.2, -0.2), wave)
        sol = tmatrix_solve(stack)
        R, T = sol.reflectance_transmittance()
        assert R < 1e-26
        assert T == pytest.approx(1.0, abs=1e-12)
        # transmitted wave equals the incident one
        pts = np.array([[0.3, -0.1, -0.7], [0.0, 0.0, -1.4]])
        E, H = sol.fields(pts)
        assert np.allclose(E, wave.e_field(pts), atol=1e-12)
        assert np.allclose(H, wave.h_field(pts), atol=1e-12)


class TestProblem1Stack:
    def setup_method(self):
        self.sol = tmatrix_solve(problem1_stack())

    def test_tangential_continuity(self):
        rng = np.random.default_rng(0)
        for z in self.sol.stack.heights:
            xy = rng.uniform(-0.5, 0.5, size=(5, 2))
            above = np.column_stack([xy, np.full(5, z + 1e-9)])
            below = np.column_stack([xy, np.full(5, z - 1e-9)])
            Ea, Ha = self.sol.fields(above)
            Eb, Hb = self.sol.fields(below)
            assert np.max(np.abs(Ea[:, :2] - Eb[:, :2])) < 1e-7
            assert np.max(np.abs(Ha[:, :2] - Hb[:, :2])) < 1e-7

    def test_tangential_continuity_exact_at_interface(self):
        # evaluate the layer expansions of both sides exactly at an interface
        sol = self.sol
        st = sol.stack
        omega = st.wave.omega
        for i, z in enumerate(st.heights):
            x = np.array([0.21, -0.37, z])

            def side_fields(d):
                E = np.zeros(3, dtype=complex)
                H = np.zeros(3, dtype=complex)
                for updown, sgn in ((0, -1.0), (1, 1.0)):
                    K = np.array([sol.k_t[0], sol.k_t[1], sgn * sol.k3[d]], dtype=complex)
                    ph = np.exp(1j * (x @ K))
                    E += sol.te[d, updown] * ph * sol.s_hat
                    H += sol.te[d, updown] * ph * np.cross(K, sol.s_hat) / (omega * st.mu[d])
                    H += sol.tm[d, updown] * ph * sol.s_hat
                    E -= sol.tm[d, updown] * ph * np.cross(K, sol.s_hat) / (omega * st.eps[d])
                return E, H

            Eu, Hu = side_fields(i)
            El, Hl = side_fields(i + 1)
            assert np.max(np.abs(Eu[:2] - El[:2])) < 1e-12
            assert np.max(np.abs(Hu[:2] - Hl[:2])) < 1e-12

    def test_energy_conservation(self):
        R, T = self.sol.reflectance_transmittance()
        assert R + T == pytest.approx(1.0, abs=1e-12)
        assert 0 < R < 1

    def test_current_export(self, tmp_path):
        surf = plane_surface(1.0, 1.0, 6, 6, 1, 1, 0.45)
        path = tmp_path / "ref.csv"
        self.sol.export_fields_csv(path, surf, n=5)
        rows = path.read_text().strip().splitlines()
        assert len(rows) == 26  # header + 25 grid points


class TestExactSameMedia:
    def test_plane_normal_incidence_constant_current(self):
        wave = make_incident_wave(5.0, 0.0, 0.0, [1.0, 0.0, 0.0])
        s = plane_surface(1.0, 1.0, 6, 6, 1, 1)
        J, M = exact_same_media(wave, s, np.array([0.3, 0.5]), np.array([0.4, 0.6]))
        # n = e3: J = e3 x b, constant magnitude over the plane
        assert np.allclose(np.abs(J[0]), np.abs(J[1]), atol=1e-12)
        assert np.max(np.abs(J[:, 2])) < 1e-14

    def test_current_magnitude_is_tangential_field(self):
        wave = problem1_wave()
        s = build_periodic_surface_from_function(
            1.0, 1.0, 9, 9, 4, 4,
            lambda x, y: 0.3 * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y),
        )
        rng = np.random.default_rng(1)
        (a1, b1), (a2, b2) = s.domain
        t1 = rng.uniform(a1, b1, 10)
        t2 = rng.uniform(a2, b2, 10)
        J, M = exact_same_media(wave, s, t1, t2)
        from qpbem.geometry import surface_eval_points

        pts, _, _, n, _ = surface_eval_points(s, np.stack([t1, t2], axis=-1))
        H = wave.h_field(pts)
        Htan = H - (np.sum(H * n, axis=1))[:, None] * n
        assert np.allclose(np.linalg.norm(J, axis=1), np.linalg.norm(Htan, axis=1), atol=1e-12)

    def test_against_finite_difference_normal(self):
        wave = problem1_wave()
        s = build_periodic_surface_from_function(
            1.0, 1.0, 9, 9, 4, 4,
            lambda x, y: 0.3 * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y),
        )
        rng = np.random.default_rng(2)
        (a1, b1), (a2, b2) = s.domain
        h = 1e-6
        for _ in range(10):
            t1 = rng.uniform(a1 + 2 * h, b1 - 2 * h)
            t2 = rng.uniform(a2 + 2 * h, b2 - 2 * h)
            J, _ = exact_same_media(wave, s, t1, t2)
            from qpbem.geometry import surface_eval_points

            f = lambda u, v: surface_eval_points(s, np.array([[u, v]]))[0][0]
            d1 = (f(t1 + h, t2) - f(t1 - h, t2)) / (2 * h)
            d2 = (f(t1, t2 + h) - f(t1, t2 - h)) / (2 * h)
            n_fd = np.cross(d1, d2)
            n_fd /= np.linalg.norm(n_fd)
            pt = f(t1, t2)
            J_fd = np.cross(n_fd, wave.h_field(pt[None, :])[0])
            assert np.max(np.abs(J[0] - J_fd)) < 1e-8


class TestDispersion:
    def test_perfect_conductor_limit(self):
        omega = 2 * np.pi * 3e14
        c0 = 1.0 / math.sqrt(EPS0_SI * MU0_SI)
        kp, km = sp_dispersion(-1e12, omega)
        assert kp.real == pytest.approx(omega / c0, rel=1e-10)
        assert km == pytest.approx(-kp)

    def test_eps_minus_two(self):
        omega = 1.0e15
        c0 = 1.0 / math.sqrt(EPS0_SI * MU0_SI)
        kp, _ = sp_dispersion(-2.0, omega)
        assert kp.real == pytest.approx(math.sqrt(2.0) * omega / c0, rel=1e-12)

    def test_pole(self):
        with pytest.raises(ZeroDivisionError):
            sp_dispersion(-1.0, 1e15)

    def test_intersection_with_tabulated_permittivity(self):
        # with a dispersion table eps(lambda), the backward SP line crosses the
        # m = -1 diffracted order near lambda ~ 0.48 um for a 0.3 um grating at
        # 30 degrees; reproduced here with a representative silver-like table
        c0 = 1.0 / math.sqrt(EPS0_SI * MU0_SI)
        table = {0.44: -6.07, 0.46: -6.86, 0.48: -7.66, 0.50: -8.52, 0.52: -9.54}
        L, theta = 0.3e-6, math.pi / 6

        def gap(lam_um):
            lam = lam_um * 1e-6
            omega = 2 * math.pi * c0 / lam
            _, km = sp_dispersion(table[lam_um], omega)
            return km.real - diffraction_order_k1(omega, theta, L, -1)

        gaps = {lam: gap(lam) for lam in table}
        signs = [np.sign(gaps[lam]) for lam in sorted(table)]
        assert signs[0] != signs[-1]  # a crossing exists inside the window
        # locate the sign change: it must happen within (0.46, 0.50)
        crossing = [lam for lam in sorted(table) if np.sign(gaps[lam]) == signs[-1]][0]
        assert 0.46 <= crossing <= 0.50
