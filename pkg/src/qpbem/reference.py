"""Independent reference solutions used to verify the boundary element path.

The transfer-matrix solution for plane multilayers is solved per polarization
(TE/TM with respect to the plane of incidence) by matching tangential field
continuity at every interface; fields anywhere are reconstructed as sums of
up to four plane waves per layer.  The same-media "scattering" solution and
the surface-plasmon dispersion line complete the oracle set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PeriodicSurface, surface_eval_points
from .waves import EPS0_SI, MU0_SI, IncidentWave


@dataclass(frozen=True)
class PlanarStack:
    """Plane multilayer: per-layer constants plus interface heights."""

    eps: tuple
    mu: tuple
    heights: tuple           # interface x3, strictly decreasing, len = layers - 1
    wave: IncidentWave

    def __post_init__(self):
        if len(self.eps) != len(self.mu) or len(self.eps) < 2:
            raise ValueError("need at least two layers with matching eps/mu lists")
        if len(self.heights) != len(self.eps) - 1:
            raise ValueError("need one interface height per layer boundary")
        if np.any(np.diff(self.heights) >= 0):
            raise ValueError("interface heights must decrease strictly")
        if not math.isclose(self.wave.eps0, self.eps[0]) or not math.isclose(
            self.wave.mu0, self.mu[0]
        ):
            raise ValueError("wave top-layer constants disagree with the stack")


@dataclass
class TMatrixSolution:
    """Per-layer plane-wave amplitudes of the TE/TM transfer-matrix solve."""

    stack: PlanarStack
    k_t: np.ndarray            # horizontal wavevector (2,)
    k3: np.ndarray             # per-layer vertical wavenumbers (complex)
    s_hat: np.ndarray          # TE unit vector
    te: np.ndarray             # (n_layers, 2) [down, up] E-amplitudes
    tm: np.ndarray             # (n_layers, 2) [down, up] H-amplitudes

    def _layer_of(self, z: np.ndarray) -> np.ndarray:
        return np.searchsorted(-np.asarray(self.stack.heights), -z, side="left")

    def fields(self, points: np.ndarray):
        """Total (E, H) at arbitrary points; vectorized over (N, 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        E = np.zeros((pts.shape[0], 3), dtype=complex)
        H = np.zeros((pts.shape[0], 3), dtype=complex)
        omega = self.stack.wave.omega
        layer = self._layer_of(pts[:, 2])
        for d in range(len(self.stack.eps)):
            sel = layer == d
            if not np.any(sel):
                continue
            x = pts[sel]
            for updown, sign in ((0, -1.0), (1, 1.0)):
                K = np.array([self.k_t[0], self.k_t[1], 0], dtype=complex)
                K[2] = sign * self.k3[d]
                phase = np.exp(1j * (x @ K))
                a_te = self.te[d, updown]
                if a_te != 0:
                    E[sel] += a_te * phase[:, None] * self.s_hat
                    H[sel] += a_te * phase[:, None] * np.cross(K, self.s_hat) / (
                        omega * self.stack.mu[d]
                    )
                b_tm = self.tm[d, updown]
                if b_tm != 0:
                    H[sel] += b_tm * phase[:, None] * self.s_hat
                    E[sel] -= b_tm * phase[:, None] * np.cross(K, self.s_hat) / (
                        omega * self.stack.eps[d]
                    )
        return E, H

    def currents(self, surface: PeriodicSurface, params: np.ndarray):
        """Reference surface currents J = n x H, M = E x n (upward normal)."""
        pts, _, _, normal, _ = surface_eval_points(surface, np.atleast_2d(params))
        E, H = self.fields(pts)
        return np.cross(normal, H), np.cross(E, normal)

    def reflectance_transmittance(self) -> tuple[float, float]:
        """Energy reflectance and transmittance (specular only: plane layers)."""
        st = self.stack
        k3_top, k3_bot = self.k3[0], self.k3[-1]
        if abs(k3_top.imag) > 0 or abs(k3_bot.imag) > 0:
            raise ValueError("R/T need propagating top and bottom waves")
        inc = abs(self.te[0, 0]) ** 2 / st.mu[0] + abs(self.tm[0, 0]) ** 2 / st.eps[0]
        ref = abs(self.te[0, 1]) ** 2 / st.mu[0] + abs(self.tm[0, 1]) ** 2 / st.eps[0]
        tra = abs(self.te[-1, 0]) ** 2 / st.mu[-1] + abs(self.tm[-1, 0]) ** 2 / st.eps[-1]
        R = ref / inc
        T = (k3_bot.real / k3_top.real) * tra / inc
        return float(R), float(T)

    def export_fields_csv(self, path, surface: PeriodicSurface, n: int = 20):
        """Reference currents on an n x n parameter grid, as CSV for debugging."""
        (a1, b1), (a2, b2) = surface.domain
        t1 = np.linspace(a1, b1, n)
        t2 = np.linspace(a2, b2, n)
        grid = np.stack(np.meshgrid(t1, t2, indexing="ij"), axis=-1).reshape(-1, 2)
        J, M = self.currents(surface, grid)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t1", "t2"] + [f"{nm}_{c}_{ri}" for nm in ("J", "M")
                                       for c in "xyz" for ri in ("re", "im")])
            for row, (jv, mv) in enumerate(zip(J, M)):
                vals = []
                for v in (jv, mv):
                    for c in range(3):
                        vals += [v[c].real, v[c].imag]
                w.writerow([grid[row, 0], grid[row, 1]] + vals)


def _vertical_wavenumbers(stack: PlanarStack) -> tuple[np.ndarray, np.ndarray]:
    wave = stack.wave
    kt = wave.k_inc[:2]
    kt2 = float(kt @ kt)
    k3 = np.empty(len(stack.eps), dtype=complex)
    for d, (e, m) in enumerate(zip(stack.eps, stack.mu)):
        kd2 = wave.omega**2 * e * m
        arg = kd2 - kt2
        k3[d] = math.sqrt(arg) if arg > 0 else 1j * math.sqrt(-arg)
        if abs(k3[d]) < 1e-12 * wave.k0:
            raise ValueError(f"degenerate vertical wavenumber in layer {d}")
    return kt, k3


def _solve_polarization(stack: PlanarStack, k3: np.ndarray, eta: np.ndarray,
                        incident: complex) -> np.ndarray:
    """Amplitudes [down, up] per layer for one polarization.

    The scalar field in layer d is D e^{-i k3 z} + U e^{+i k3 z}; continuity
    of the field and of its z-derivative divided by eta (mu for TE, eps for
    TM) holds at every interface.
    """
    n = len(stack.eps)
    N = 2 * (n - 1)
    A = np.zeros((N, N), dtype=complex)
    rhs = np.zeros(N, dtype=complex)

    def col(d, updown):
        # unknown layout: [U_0, D_1, U_1, ..., D_{n-2}, U_{n-2}, D_{n-1}]
        if d == 0:
            return 0 if updown == 1 else None
        if d == n - 1:
            return N - 1 if updown == 0 else None
        return 1 + 2 * (d - 1) + updown

    for i, z in enumerate(stack.heights):
        for row, deriv in ((2 * i, False), (2 * i + 1, True)):
            for d, sgn in ((i, 1.0), (i + 1, -1.0)):
                for updown, s3 in ((0, -1.0), (1, 1.0)):
                    coeff = np.exp(1j * s3 * k3[d] * z)
                    if deriv:
                        coeff *= 1j * s3 * k3[d] / eta[d]
                    c = col(d, updown)
                    if c is None:
                        if d == 0 and updown == 0:
                            rhs[row] -= sgn * coeff * incident
                        continue
                    A[row, c] += sgn * coeff
    sol = np.linalg.solve(A, rhs)
    out = np.zeros((n, 2), dtype=complex)
    out[0, 0] = incident
    out[0, 1] = sol[0]
    for d in range(1, n - 1):
        out[d, 0] = sol[1 + 2 * (d - 1)]
        out[d, 1] = sol[2 + 2 * (d - 1)]
    out[n - 1, 0] = sol[N - 1]
    return out


def tmatrix_solve(stack: PlanarStack) -> TMatrixSolution:
    """Solve the plane multilayer per polarization by field matching."""
    wave = stack.wave
    kt, k3 = _vertical_wavenumbers(stack)
    s_hat = np.array([-math.sin(wave.phi), math.cos(wave.phi), 0.0])
    a_te = complex(wave.a_inc @ s_hat)
    b_tm = complex(wave.b_inc @ s_hat)
    te = _solve_polarization(stack, k3, np.asarray(stack.mu, dtype=complex), a_te)
    tm = _solve_polarization(stack, k3, np.asarray(stack.eps, dtype=complex), b_tm)
    return TMatrixSolution(stack, kt, k3, s_hat, te, tm)


def exact_same_media(wave: IncidentWave, surface: PeriodicSurface, t1, t2):
    """Exact currents when both media agree: J = n x H_inc, M = E_inc x n."""
    params = np.atleast_2d(np.stack(np.broadcast_arrays(t1, t2), axis=-1))
    pts, _, _, normal, _ = surface_eval_points(surface, params.reshape(-1, 2))
    E = wave.e_field(pts)
    H = wave.h_field(pts)
    return np.cross(normal, H), np.cross(E, normal)


def sp_dispersion(eps_metal: complex, omega: float) -> tuple[complex, complex]:
    """Surface-plasmon propagation constants +-(omega/c0) sqrt(eps/(1+eps))."""
    if abs(1.0 + eps_metal) < 1e-14:
        raise ZeroDivisionError("surface-plasmon pole at eps = -1")
    c0 = 1.0 / math.sqrt(EPS0_SI * MU0_SI)
    k = (omega / c0) * np.sqrt(np.asarray(eps_metal / (1.0 + eps_metal), dtype=complex))
    return complex(k), complex(-k)


def diffraction_order_k1(omega: float, theta: float, L: float, m: int) -> float:
    """Horizontal wavenumber of the m-th diffracted order of a grating."""
    c0 = 1.0 / math.sqrt(EPS0_SI * MU0_SI)
    return (omega / c0) * math.sin(theta) + 2.0 * math.pi * m / L
