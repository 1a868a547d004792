"""Frozen Gaussian (coherent-state) variational dynamics in one dimension.

The ansatz is a Gaussian of fixed width ``dq``,

    psi(q) = (2 pi dq^2)^(-1/4) exp(-(q-q0)^2/(4 dq^2) + i p0 (q - q0/2)/hbar + i theta),

parametrized by the Bargmann variable ``z = q0/(2 dq) + i p0/(2 dp)`` with
``dp = hbar/(2 dq)``. Its tangent space is ``span_C{psi, chi}`` with
``chi = (a^+ - z*) psi``, a unit vector orthogonal to ``psi``, so the
variational derivative is ``zdot chi - (i E_bar/hbar) psi`` with
``zdot = <chi|H psi>/(i hbar)``. Expectations are taken by grid
quadrature, so any tabulated potential is admissible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .diagnostics import ErrorReport, guided_error, local_error, with_bounds
from .exact import NumericalFailure
from .grid import Grid, HamiltonianSpec, WaveState, apply_h, derivative_1d, energy_moments, inner

logger = logging.getLogger(__name__)

COVERAGE_WIDTHS = 6.0
ODE_RTOL = 1e-10
ODE_ATOL = 1e-12


class GridCoverageError(ValueError):
    """The Gaussian is not contained in the grid."""


@dataclass(frozen=True)
class CoherentState:
    z: complex
    dq: float
    mass: float
    theta: float = 0.0
    hbar: float = 1.0

    def __post_init__(self):
        if self.dq <= 0 or self.mass <= 0 or self.hbar <= 0:
            raise ValueError("dq, mass and hbar must be positive")
        object.__setattr__(self, "z", complex(self.z))

    @classmethod
    def from_qp(cls, q0: float, p0: float, dq: float, mass: float, theta: float = 0.0,
                hbar: float = 1.0) -> "CoherentState":
        dp = hbar / (2.0 * dq)
        return cls(complex(q0 / (2.0 * dq), p0 / (2.0 * dp)), dq, mass, theta, hbar)

    @property
    def dp(self) -> float:
        return self.hbar / (2.0 * self.dq)

    @property
    def omega(self) -> float:
        """Frequency of the oscillator whose ground state has width ``dq``."""
        return self.hbar / (2.0 * self.mass * self.dq**2)

    @property
    def q0(self) -> float:
        return 2.0 * self.dq * self.z.real

    @property
    def p0(self) -> float:
        return 2.0 * self.dp * self.z.imag


@dataclass(frozen=True)
class PotentialDerivatives:
    """Second to fourth derivatives of ``V`` at the packet centre."""

    v2: float
    v3: float
    v4: float

    def __post_init__(self):
        if not all(np.isfinite([self.v2, self.v3, self.v4])):
            raise ValueError("potential derivatives must be finite")

    @classmethod
    def from_polynomial(cls, coeffs: Sequence[float], q0: float) -> "PotentialDerivatives":
        """From ``V(q) = sum_k coeffs[k] q^k``."""
        p = np.polynomial.Polynomial(coeffs)
        return cls(float(p.deriv(2)(q0)), float(p.deriv(3)(q0)), float(p.deriv(4)(q0)))

    @classmethod
    def from_callable(cls, V: Callable[[float], float], q0: float, h: float = 1e-2):
        """Central differences of a smooth callable, O(h^2) accurate."""
        f = np.array([V(q0 + k * h) for k in (-3, -2, -1, 0, 1, 2, 3)], dtype=float)
        v2 = (-f[1] + 16 * f[2] - 30 * f[3] + 16 * f[4] - f[5]) / (12 * h**2)
        v3 = (f[0] - 8 * f[1] + 13 * f[2] - 13 * f[4] + 8 * f[5] - f[6]) / (8 * h**3)
        v4 = (-f[0] + 12 * f[1] - 39 * f[2] + 56 * f[3] - 39 * f[4] + 12 * f[5] - f[6]) / (6 * h**4)
        return cls(float(v2), float(v3), float(v4))


def _check_coverage(s: CoherentState, g: Grid):
    if g.ndim != 1:
        raise ValueError("coherent states live on 1D grids")
    ax = g.axes[0]
    lo, hi = s.q0 - COVERAGE_WIDTHS * s.dq, s.q0 + COVERAGE_WIDTHS * s.dq
    x = ax.points
    if lo < x[0] or hi > x[-1]:
        raise GridCoverageError(
            f"packet at q0={s.q0:.6g} (dq={s.dq:.3g}) needs [{lo:.6g}, {hi:.6g}] "
            f"but the grid spans [{x[0]:.6g}, {x[-1]:.6g}]")


def coherent_to_grid(s: CoherentState, g: Grid) -> WaveState:
    """Tabulate the normalized Gaussian on ``g``."""
    _check_coverage(s, g)
    q = g.points(0)
    amp = (2.0 * math.pi * s.dq**2) ** -0.25 * np.exp(
        -((q - s.q0) ** 2) / (4.0 * s.dq**2)
        + 1j * s.p0 * (q - 0.5 * s.q0) / s.hbar + 1j * s.theta)
    return WaveState(g, amp, s.hbar)


def momentum(psi: WaveState) -> WaveState:
    """``p psi = -i hbar d/dq psi`` (spectral)."""
    return psi.with_amplitudes(-1j * psi.hbar * derivative_1d(psi.amplitudes, psi.grid.axes[0]))


def annihilate(psi: WaveState, dq: float) -> WaveState:
    """``a psi`` with ``a = q/(2 dq) + i p/(2 dp)``."""
    dp = psi.hbar / (2.0 * dq)
    q = psi.grid.points(0)
    return psi.with_amplitudes(q * psi.amplitudes / (2 * dq)) + (1j / (2 * dp)) * momentum(psi)


def create(psi: WaveState, dq: float) -> WaveState:
    """``a^+ psi`` with ``a^+ = q/(2 dq) - i p/(2 dp)``."""
    dp = psi.hbar / (2.0 * dq)
    q = psi.grid.points(0)
    return psi.with_amplitudes(q * psi.amplitudes / (2 * dq)) - (1j / (2 * dp)) * momentum(psi)


def excitation(s: CoherentState, psi: WaveState) -> WaveState:
    """``chi = (a^+ - z*) psi``, the non-trivial tangent direction."""
    return create(psi, s.dq) - s.z.conjugate() * psi


def fga_rhs(H: HamiltonianSpec, s: CoherentState, psi: WaveState | None = None,
            hpsi: WaveState | None = None) -> complex:
    """``zdot = (i/hbar) <[H, a]>`` evaluated by grid quadrature."""
    if psi is None:
        psi = coherent_to_grid(s, H.grid)
    else:
        _check_coverage(s, H.grid)
    if hpsi is None:
        hpsi = apply_h(H, psi)
    return inner(excitation(s, psi), hpsi) / (1j * H.hbar)


def mean_force(H: HamiltonianSpec, psi: WaveState) -> float:
    """``-<V'>`` from ``(i/hbar)<[V, p]>``, without differentiating ``V``."""
    vpsi = psi.with_amplitudes(H.potential * psi.amplitudes)
    return 2.0 * inner(momentum(psi), vpsi).imag / psi.hbar


def variational_derivative(H: HamiltonianSpec, s: CoherentState, psi: WaveState,
                           hpsi: WaveState | None = None):
    """``(psidot, zdot, E_bar)`` in the optimal gauge."""
    if hpsi is None:
        hpsi = apply_h(H, psi)
    chi = excitation(s, psi)
    zdot = inner(chi, hpsi) / (1j * H.hbar)
    e_bar = inner(psi, hpsi).real
    return zdot * chi - (1j * e_bar / H.hbar) * psi, zdot, e_bar


def fga_error(H: HamiltonianSpec, s: CoherentState, t: float = 0.0) -> ErrorReport:
    """Local error of the frozen-Gaussian dynamics at ``s``.

    ``eps^2 = (var_E - hbar^2 |zdot|^2)/hbar^2``; the returned report also
    carries the direct residual and ``crosscheck_ok`` for the scalar formula.
    """
    psi = coherent_to_grid(s, H.grid)
    hpsi = apply_h(H, psi)
    psidot, zdot, _ = variational_derivative(H, s, psi, hpsi)
    rep = local_error(H, psi, psidot, t=t, hpsi=hpsi)
    scalar = rep.var_E / H.hbar**2 - abs(zdot) ** 2
    ok = abs(scalar - rep.eps**2) <= 1e-7 * rep.eps**2 + 1e-9 * rep.var_E / H.hbar**2
    return replace(rep, crosscheck_ok=bool(ok))


def hv_variance(H: HamiltonianSpec, s: CoherentState) -> float:
    """Variance of ``H_v = (p0/m) dp + <V'> dq`` in the packet."""
    psi = coherent_to_grid(s, H.grid)
    m = H.masses[0]
    q = H.grid.points(0)
    dvbar = -mean_force(H, psi)
    hv = (s.p0 / m) * (momentum(psi) - s.p0 * psi) + psi.with_amplitudes(dvbar * (q - s.q0) * psi.amplitudes)
    mean = inner(psi, hv)
    return inner(hv, hv).real - abs(mean) ** 2


def matched_width(v2: float, mass: float, hbar: float = 1.0) -> float:
    """Width with ``m omega^2 = V''`` (valid at the matching instant only)."""
    if v2 <= 0:
        raise ValueError("width matching needs V'' > 0")
    return math.sqrt(hbar / (2.0 * math.sqrt(mass * v2)))


def fga_error_lowest_order(d: PotentialDerivatives, dq: float, mass: float, omega: float) -> float:
    """Leading small-width estimate of ``hbar * eps`` (energy units).

    ``hbar eps ~ dq^2 sqrt((m Delta^2)^2/2 + (V'''^2/6 + m Delta^2 V''''/2) dq^2)``
    with ``m Delta^2 = V'' - m omega^2``. For a matched width this is
    ``|V'''| dq^3 / sqrt(6)``.
    """
    if dq <= 0:
        raise ValueError("dq must be positive")
    md2 = d.v2 - mass * omega**2
    rad = 0.5 * md2**2 + (d.v3**2 / 6.0 + 0.5 * md2 * d.v4) * dq**2
    if rad < 0:
        raise ValueError(f"negative radicand {rad:.3g}: derivative set inconsistent with this width")
    return dq**2 * math.sqrt(rad)


def delta_w_squared(H: HamiltonianSpec, s: CoherentState) -> float:
    """Variance of ``W = V - (m w^2/2)(q - qbar)^2`` in the packet.

    ``w`` is the packet's own frequency and ``qbar = q0 - <V'>/(m w^2)``;
    ``hbar^2 eps^2`` equals this quantity for ``H = p^2/2m + V``.
    """
    psi = coherent_to_grid(s, H.grid)
    m = H.masses[0]
    w = H.hbar / (2.0 * m * s.dq**2)
    qbar = s.q0 + mean_force(H, psi) / (m * w**2)
    q = H.grid.points(0)
    W = H.potential - 0.5 * m * w**2 * (q - qbar) ** 2
    rho = np.abs(psi.amplitudes) ** 2 * H.grid.volume_element
    mean = np.sum(rho * W)
    return float(np.sum(rho * (W - mean) ** 2))


def width_derivative(s: CoherentState, psi: WaveState) -> WaveState:
    """``d psi / d dq`` at fixed ``(q0, p0, theta)``."""
    q = psi.grid.points(0)
    fac = -0.5 / s.dq + (q - s.q0) ** 2 / (2.0 * s.dq**3)
    return psi.with_amplitudes(fac * psi.amplitudes)


@dataclass(frozen=True)
class WidthSchedule:
    """Prescribed width ``dq(t) = dq0 (1 + a sin(W t))``."""

    dq0: float
    amplitude: float
    frequency: float

    def __post_init__(self):
        if self.dq0 <= 0 or not 0 <= abs(self.amplitude) < 1:
            raise ValueError("need dq0 > 0 and |amplitude| < 1")

    def __call__(self, t: float) -> float:
        return self.dq0 * (1.0 + self.amplitude * math.sin(self.frequency * t))

    def rate(self, t: float) -> float:
        return self.dq0 * self.amplitude * self.frequency * math.cos(self.frequency * t)


@dataclass(frozen=True, eq=False)
class FGARun:
    times: np.ndarray
    states: tuple[CoherentState, ...]
    grid_states: tuple[WaveState, ...]
    reports: tuple[ErrorReport, ...]
    guided: bool


def _state(y, dq, mass, hbar) -> CoherentState:
    return CoherentState.from_qp(y[0], y[1], dq, mass, y[2], hbar)


def propagate_fga(H: HamiltonianSpec, s0: CoherentState, t_final: float, n_samples: int = 200,
                  schedule: WidthSchedule | None = None, rtol: float = ODE_RTOL,
                  atol: float = ODE_ATOL) -> FGARun:
    """Integrate the frozen-Gaussian equations and sample diagnostics.

    The ODE variables are ``(q0, p0, theta)``. With a width ``schedule`` the
    width is a guided (prescribed) parameter and the reports come from
    :func:`guided_error`.
    """
    hbar, mass = H.hbar, s0.mass
    if schedule is not None and abs(schedule(0.0) - s0.dq) > 1e-12 * s0.dq:
        raise ValueError("width schedule must start at the initial width")

    def width(t):
        return s0.dq if schedule is None else schedule(t)

    def rhs(t, y):
        s = _state(y, width(t), mass, hbar)
        psi = coherent_to_grid(s, H.grid)
        hpsi = apply_h(H, psi)
        zdot = fga_rhs(H, s, psi, hpsi)
        e_bar = inner(psi, hpsi).real
        qd = 2.0 * s.dq * zdot.real
        pd = 2.0 * s.dp * zdot.imag
        thd = -e_bar / hbar + (y[1] * qd - y[0] * pd) / (2.0 * hbar)
        return [qd, pd, thd]

    times = np.linspace(0.0, t_final, n_samples)
    y0 = [s0.q0, s0.p0, s0.theta]
    sol = solve_ivp(rhs, (0.0, t_final), y0, method="DOP853", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise NumericalFailure(f"frozen-Gaussian integration failed: {sol.message}")

    states, grids, reports = [], [], []
    for k, t in enumerate(times):
        s = _state(sol.y[:, k], width(t), mass, hbar)
        psi = coherent_to_grid(s, H.grid)
        if schedule is None:
            rep = fga_error(H, s, t=t)
        else:
            hpsi = apply_h(H, psi)
            psidot, _, _ = variational_derivative(H, s, psi, hpsi)
            guided = schedule.rate(t) * width_derivative(s, psi)
            rep = guided_error(H, psi, psidot, guided, t=t)
        states.append(s)
        grids.append(psi)
        reports.append(rep)
    reports = with_bounds(reports)
    logger.debug("FGA run: max eps %.3e", max(r.eps for r in reports))
    return FGARun(times, tuple(states), tuple(grids), tuple(reports), schedule is not None)


def energy_drift(H: HamiltonianSpec, run: FGARun) -> float:
    """``max_t |E_bar(t) - E_bar(0)|``."""
    e = [energy_moments(H, psi)[0] for psi in run.grid_states]
    return float(np.max(np.abs(np.array(e) - e[0])))
