"""Nonlinear CSTR ground truth: exothermic first-order reaction in a
cylindrical tank with level dynamics.

States are concentration c (kmol/m3), temperature T (K), level h (m);
inputs are coolant temperature T_c (K) and outlet flow F (m3/min). The
structural mismatch against the linear control model is injected through
outlet_factor, which scales F wherever it enters the dynamics (the level
equation); an alternative reading that perturbs the species balance instead
is available as concentration_mismatch (default off).
"""

import dataclasses
from dataclasses import dataclass

import numpy as np


class NonPhysicalState(Exception):
    pass


class UnknownEvent(Exception):
    pass


@dataclass(frozen=True)
class CstrParams:
    F0: float = 0.1          # feed flow, m3/min
    T0: float = 350.0        # feed temperature, K
    c0: float = 1.0          # feed concentration, kmol/m3
    r: float = 0.219         # tank radius, m
    k0: float = 7.2e10       # rate pre-exponential, 1/min
    E_over_R: float = 8750.0 # activation temperature, K
    U: float = 54.94         # heat transfer coefficient, kJ/min m2 K
    rho: float = 1000.0      # density, kg/m3
    Cp: float = 0.239        # heat capacity, kJ/kg K
    dH: float = -5e4         # reaction enthalpy, kJ/kmol (exothermic)
    outlet_factor: float = 1.0
    substeps: int = 20
    concentration_mismatch: bool = False

    def __post_init__(self):
        positive = ("F0", "T0", "c0", "r", "k0", "E_over_R", "U", "rho",
                    "Cp", "outlet_factor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.dH < 0:
            raise ValueError("dH must be < 0 (exothermic)")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def area(self):
        return np.pi * self.r ** 2


@dataclass(frozen=True)
class PlantState:
    c: float
    T: float
    h: float

    def __post_init__(self):
        vals = (self.c, self.T, self.h)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise NonPhysicalState(f"state {vals} left the physical region")

    def as_array(self):
        return np.array([self.c, self.T, self.h])


@dataclass(frozen=True)
class OperatingPoint:
    x_ss: np.ndarray         # (c, T, h)
    u_ss: np.ndarray         # (T_c, F)


def default_operating_point():
    return OperatingPoint(np.array([0.878, 324.5, 0.659]),
                          np.array([300.0, 0.1]))


def _deriv(x, u, p):
    c, T, h = x
    if not (np.isfinite(c) and np.isfinite(T) and np.isfinite(h)
            and c > 0 and T > 0 and h > 0):
        raise NonPhysicalState(f"state ({c}, {T}, {h}) left the physical region")
    Tc, F = u
    V = p.area * h
    kT = p.k0 * np.exp(-p.E_over_R / T)
    dc = p.F0 * (p.c0 - c) / V - kT * c
    if p.concentration_mismatch:
        # alternative mismatch: outlet stream carries 1.03x the bulk
        # concentration, which adds an extra outlet term to the balance
        dc -= 0.03 * F * c / V
    dT = (p.F0 * (p.T0 - T) / V
          - p.dH / (p.rho * p.Cp) * kT * c
          + 2.0 * p.U / (p.r * p.rho * p.Cp) * (Tc - T))
    dh = (p.F0 - p.outlet_factor * F) / p.area
    return np.array([dc, dT, dh])


def derivatives(s, u, p):
    return _deriv(s.as_array(), np.asarray(u, dtype=float), p)


def step(s, u, p, dt):
    """Classical RK4 with dt/substeps internal step."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    u = np.asarray(u, dtype=float)
    x = s.as_array()
    hstep = dt / p.substeps
    for _ in range(p.substeps):
        k1 = _deriv(x, u, p)
        k2 = _deriv(x + 0.5 * hstep * k1, u, p)
        k3 = _deriv(x + 0.5 * hstep * k2, u, p)
        k4 = _deriv(x + hstep * k3, u, p)
        x = x + hstep / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not (np.all(np.isfinite(x)) and np.all(x > 0)):
            raise NonPhysicalState(f"state {tuple(x)} left the physical region")
    return PlantState(x[0], x[1], x[2])


def measure(s, op):
    """Full-state measurement in deviation coordinates."""
    return s.as_array() - op.x_ss


def apply_event(p, event):
    """New params with the overrides in event ({field: value}) applied."""
    fields = {f.name for f in dataclasses.fields(CstrParams)}
    for key in event:
        if key not in fields:
            raise UnknownEvent(f"unknown plant parameter {key!r}")
    return dataclasses.replace(p, **event)


def steady_height(c, T, p):
    """Level at which the species balance closes for a given (c, T)."""
    kT = p.k0 * np.exp(-p.E_over_R / T)
    return p.F0 * (p.c0 - c) / (kT * c * p.area)
