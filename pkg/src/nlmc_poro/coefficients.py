"""Closed-form coefficient models for the poroelastic fracture model."""
from __future__ import annotations

from dataclasses import dataclass, replace

SECONDS_PER_YEAR = 365.0 * 24.0 * 3600.0

POROSITY_FLOOR = 1e-6
POROSITY_CEIL = 1.0 - 1e-6


@dataclass(frozen=True)
class MaterialParams:
    """Coefficients of the linear coupled model.

    ``a_m``/``a_f`` are the matrix/fracture storage coefficients, ``b_m``/``b_f``
    the mobilities, ``beta`` the matrix-fracture transfer coefficient and ``q``
    the rate of each of the two point sources.
    """

    E: float = 1e10
    nu: float = 0.3
    alpha: float = 0.1
    a_m: float = 1e-6
    a_f: float = 1e-7
    b_m: float = 1e-11
    b_f: float = 1e-6
    beta: float = 1e-10
    p0: float = 1e7
    q: float = 0.01
    t_max: float = 10.0 * SECONDS_PER_YEAR
    n_steps: int = 50

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("Young's modulus must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("Biot coefficient must lie in [0, 1]")
        for name in ("a_m", "a_f", "b_m", "b_f", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    @property
    def tau(self) -> float:
        return self.t_max / self.n_steps

    @property
    def lame(self):
        return lame(self.E, self.nu)

    def with_(self, **kw) -> "MaterialParams":
        return replace(self, **kw)


PAPER_PRESET = MaterialParams()


@dataclass(frozen=True)
class PoroState:
    phi0: float
    k0: float
    Ks: float
    cf: float
    n_exp: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.phi0 < 1.0:
            raise ValueError("reference porosity must lie in (0, 1)")
        if not (self.k0 > 0 and self.Ks > 0):
            raise ValueError("k0 and Ks must be positive")
        if self.cf < 0:
            raise ValueError("fluid compressibility must be non-negative")


def lame(E: float, nu: float) -> tuple[float, float]:
    """Return ``(mu, lambda)`` from Young's modulus and Poisson ratio."""
    if not E > 0:
        raise ValueError("Young's modulus must be positive")
    if not 0.0 <= nu < 0.5:
        raise ValueError(f"Poisson ratio {nu} outside [0, 0.5)")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def biot_inverse_modulus(ps: PoroState, phi: float, alpha: float) -> float:
    """``1/M = phi * c_f + (alpha - phi0) / K_s``."""
    return phi * ps.cf + (alpha - ps.phi0) / ps.Ks


def porosity_update(ps: PoroState, alpha: float, eps_v: float, p_m: float, p0: float) -> float:
    phi = ps.phi0 + alpha * eps_v + (alpha - ps.phi0) / ps.Ks * (p_m - p0)
    return min(max(phi, POROSITY_FLOOR), POROSITY_CEIL)


def permeability_update(ps: PoroState, phi: float) -> float:
    """Power-law permeability ``k0 (phi / phi0)^n``."""
    if not phi > 0:
        raise ValueError("porosity must be positive")
    return ps.k0 * (phi / ps.phi0) ** ps.n_exp


def aperture(p_f: float, E: float, nu: float) -> float:
    """Fracture opening proportional to fracture pressure."""
    if not E > 0:
        raise ValueError("Young's modulus must be positive")
    return 2.0 * (1.0 - nu * nu) / E * p_f
