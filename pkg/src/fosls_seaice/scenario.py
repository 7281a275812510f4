"""Cyclone/anticyclone benchmark: prescribed wind, ocean gyre and initial data.

Points are unit-square coordinates and times are in days.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constitutive import PhysParams

SECONDS_PER_DAY = 86400.0


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def wind_ramp(t):
    """Switching factor 1 - 2 / (exp(t_m) exp(8 - |t_m|) + 1) with t_m = t - 4."""
    tm = np.asarray(t, dtype=float) - 4.0
    return 1.0 - 2.0 / (np.exp(tm) * np.exp(8.0 - np.abs(tm)) + 1.0)


def cyclone_center(t) -> np.ndarray:
    tm = float(t) - 4.0
    xm = 0.1 * (9.0 - abs(tm))
    return np.array([xm, xm])


def wind_angle(t) -> float:
    # sign(0) = 0 picks the midpoint angle 17 pi / 40
    return 17.0 * np.pi / 40.0 + np.sign(float(t) - 4.0) * np.pi / 40.0


def wind(x, t, params: PhysParams = PhysParams(), ramp=wind_ramp):
    """Atmospheric velocity (m/s) at unit-square points ``x (..., 2)`` and time ``t`` (days).

    ``ramp`` is the time switching factor; pass a different callable to try
    another temporal profile.
    """
    x = np.asarray(x, dtype=float)
    xt = x - cyclone_center(t)
    r = np.linalg.norm(xt, axis=-1)
    amp = 10.0 * params.v_a_max * ramp(t) * np.exp(-r / 10.0)
    return amp[..., None] * (xt @ rotation(wind_angle(t)).T)


def ocean(x, params: PhysParams = PhysParams()):
    """Steady circular ocean current (m/s)."""
    x = np.asarray(x, dtype=float)
    return params.v_o_max * np.stack([2.0 * x[..., 1] - 1.0, 1.0 - 2.0 * x[..., 0]], axis=-1)


def initial_height(x):
    x = np.asarray(x, dtype=float)
    return 0.3 + 0.005 * (np.sin(250.0 * x[..., 0]) + np.sin(250.0 * x[..., 1]))


def initial_concentration(x):
    return np.ones(np.shape(x)[:-1])


@dataclass
class BenchmarkConfig:
    n: int = 32
    dt: float = 1800.0  # s
    t_end_days: float = 8.0
    theta: float = 0.5
    elements: str = "rt0p1"
    params: PhysParams = field(default_factory=PhysParams)
    trace_factor: float = 2.0
    length_scale: float = 1.0  # m, physical side of the unit square
    quad_order: int = 4
    gn_tol: float = 1e-6
    gn_max_iter: int = 50
    armijo: float = 1e-4
    linear_solver: str = "auto"
    output_dir: str = "output"
    output_every_hours: float = 6.0
    write_vtk: bool = True
    wind_enabled: bool = True
    ocean_enabled: bool = True

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("mesh resolution n must be a positive integer")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.t_end_days < 0.0:
            raise ValueError("t_end must be non-negative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.elements not in ("rt0p1", "rt1p2"):
            raise ValueError(f"elements must be 'rt0p1' or 'rt1p2', got {self.elements!r}")
        if self.trace_factor not in (1.0, 2.0):
            raise ValueError("trace_factor must be 1 or 2")
        if self.output_every_hours <= 0.0:
            raise ValueError("output cadence must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end_days * SECONDS_PER_DAY / self.dt))
