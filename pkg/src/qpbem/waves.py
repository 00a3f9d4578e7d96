"""Incident plane-wave definition shared by the solver and the oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# SI vacuum constants (used by the dispersion utilities)
EPS0_SI = 8.8541878e-12
MU0_SI = 1.2566370e-6


@dataclass(frozen=True)
class IncidentWave:
    """Time-harmonic plane wave incident from above onto the top layer.

    The propagation direction is (cos phi sin theta, sin phi sin theta,
    -cos theta); ``eps0``/``mu0`` are the material constants of the top layer,
    fixing k0 = omega sqrt(eps0 mu0).  The electric amplitude must be
    transverse; the magnetic amplitude follows from omega mu0 b = k x a.
    """

    omega: float
    theta: float
    phi: float
    a_inc: np.ndarray
    eps0: float = 1.0
    mu0: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.a_inc, dtype=complex)
        object.__setattr__(self, "a_inc", a)
        if abs(np.dot(a, self.k_inc)) > 1e-10 * max(1.0, np.linalg.norm(a) * self.k0):
            raise ValueError("a_inc must be transverse to the propagation direction")

    @property
    def k0(self) -> float:
        return self.omega * math.sqrt(self.eps0 * self.mu0)

    @property
    def direction(self) -> np.ndarray:
        st, ct = math.sin(self.theta), math.cos(self.theta)
        return np.array([math.cos(self.phi) * st, math.sin(self.phi) * st, -ct])

    @property
    def k_inc(self) -> np.ndarray:
        return self.k0 * self.direction

    @property
    def b_inc(self) -> np.ndarray:
        return np.cross(self.k_inc, self.a_inc) / (self.omega * self.mu0)

    def beta(self, L1: float, L2: float) -> tuple[float, float]:
        """Bloch phase differences (L1 k1_inc, L2 k2_inc)."""
        k = self.k_inc
        return (L1 * k[0], L2 * k[1])

    def e_field(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        phase = np.exp(1j * x @ self.k_inc)
        return phase[..., None] * self.a_inc

    def h_field(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        phase = np.exp(1j * x @ self.k_inc)
        return phase[..., None] * self.b_inc


def make_incident_wave(omega, theta, phi, a_like, eps0=1.0, mu0=1.0,
                       normalize: bool = True) -> IncidentWave:
    """Build a wave, projecting ``a_like`` onto the transverse plane.

    A convenience for specifying polarizations loosely: the longitudinal
    component is removed and, if ``normalize``, the result is scaled to unit
    amplitude.
    """
    st, ct = math.sin(theta), math.cos(theta)
    direction = np.array([math.cos(phi) * st, math.sin(phi) * st, -ct])
    a = np.asarray(a_like, dtype=complex)
    a = a - (a @ direction) * direction
    norm = np.linalg.norm(a)
    if norm < 1e-14:
        raise ValueError("polarization vector is parallel to the propagation direction")
    if normalize:
        a = a / norm
    return IncidentWave(omega, theta, phi, a, eps0, mu0)
