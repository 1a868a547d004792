"""Local-in-time error of variational dynamics.

Given a state ``psi`` on some variational manifold and the derivative
``psidot`` its equations of motion produce, these functions compute the
local error ``eps`` two ways (the variance form and the direct residual
``||i hbar psidot - H psi|| / hbar``), the r-index, the relevant/irrelevant
split of ``H psi`` and the accumulated a-posteriori bound.

Gauge handling lives here: any derivative is first brought to the standard
gauge (orthogonal to ``psi``) and the optimal phase component
``-i E_bar/hbar psi`` is then re-added, so manifold modules need not agree
on a phase convention.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .grid import HamiltonianSpec, WaveState, apply_h, energy_moments, inner

#: relative tolerance on |eps_var - eps_direct| before a derivative is
#: declared not to be a stationary point of the minimum-distance problem
AGREEMENT_RTOL = 1e-7
#: eps^2 below -NEGATIVE_TOL * var_E/hbar^2 is a stationarity violation;
#: |eps^2| within it is below the resolution of the variance form, and the
#: report then carries the direct residual instead
NEGATIVE_TOL = 1e-9
BOUNDEDNESS_RTOL = 1e-9
STATIONARY_RTOL = 1e-9


@dataclass(frozen=True)
class ErrorReport:
    t: float
    eps: float
    r_index: float
    E_bar: float
    var_E: float
    deriv_norm_sq: float
    eps_direct: float
    eps_variance: float
    stationarity_flag: bool
    h_norm: float
    deriv_norm: float
    stationarity_defect: float
    stationary: bool = False
    bound_accum: float = 0.0
    crosscheck_ok: bool | None = None
    residual_guided: float | None = None
    energy_drift: float | None = None
    drift_bound: float | None = None

    @property
    def bounded_ok(self) -> bool:
        """``hbar ||psidot|| <= ||H psi||`` (or its guided generalization)."""
        rhs = self.residual_guided if self.residual_guided is not None else self.h_norm
        return self.deriv_norm <= rhs * (1.0 + BOUNDEDNESS_RTOL)

    @property
    def drift_ok(self) -> bool | None:
        if self.energy_drift is None:
            return None
        return abs(self.energy_drift) <= self.drift_bound * (1.0 + 1e-9) + 1e-14


class StationaryState(NamedTuple):
    """Returned instead of dividing by a vanishing energy spread."""

    E_bar: float


def standard_gauge_derivative(psi: WaveState, psidot: WaveState,
                              E_bar: float | None = None) -> WaveState:
    """Derivative in the standard gauge, ``<psi|psidot+> = 0``.

    With ``E_bar`` given, ``psidot + (i E_bar/hbar) psi`` is formed first;
    whatever component along ``psi`` remains (a gauge mismatch) is then
    projected out, so the result is orthogonal to ``psi`` either way.
    """
    if E_bar is not None:
        psidot = psidot + (1j * E_bar / psi.hbar) * psi
    return psidot - inner(psi, psidot) * psi


def _stable_difference(a: WaveState, b: WaveState) -> float:
    # ||a||^2 - ||b||^2 without subtracting two rounded norms
    return inner(a - b, a + b).real


def _resolve(eps2: float, eps_direct: float, scale: float):
    """Pick the reported eps from the variance form and the direct residual.

    Returns ``(eps, eps_variance, stationarity_flag)``.
    """
    eps_var = math.sqrt(max(eps2, 0.0))
    if eps2 < -NEGATIVE_TOL * scale:
        return eps_direct, eps_var, True
    if eps2 <= NEGATIVE_TOL * scale:
        # the variance form cannot resolve eps here; the residual can
        return eps_direct, eps_var, eps_direct**2 > 2 * NEGATIVE_TOL * scale
    flag = (abs(eps_var - eps_direct) > AGREEMENT_RTOL * eps_direct
            and abs(eps2 - eps_direct**2) > NEGATIVE_TOL * scale)
    return eps_var, eps_var, flag


def local_error(H: HamiltonianSpec, psi: WaveState, psidot: WaveState, t: float = 0.0,
                hpsi: WaveState | None = None) -> ErrorReport:
    """Local error of a variational derivative ``psidot`` at ``psi``."""
    hbar = H.hbar
    if hpsi is None:
        hpsi = apply_h(H, psi)
    e_bar, var = energy_moments(H, psi, hpsi)
    plus = standard_gauge_derivative(psi, psidot)
    full = plus - (1j * e_bar / hbar) * psi

    a = hpsi - e_bar * psi
    b = (1j * hbar) * plus
    eps2 = _stable_difference(a, b) / hbar**2
    resid = (1j * hbar) * full - hpsi
    eps_direct = resid.norm() / hbar
    h_norm = hpsi.norm()
    # rounding in eps2 is of order machine-eps * ||H psi||^2, so keep a floor
    scale = max(var, 1e-14 * h_norm**2) / hbar**2
    eps, eps_var, flag = _resolve(eps2, eps_direct, scale)

    deriv_sq = inner(plus, plus).real
    full_sq = inner(full, full).real
    im = inner(full, hpsi).imag
    defect = abs(hbar * full_sq - im) / max(hbar * full_sq, 1e-300)
    stationary = math.sqrt(var) <= STATIONARY_RTOL * max(h_norm, 1e-300)
    return ErrorReport(
        t=float(t), eps=eps, r_index=r_index(var, deriv_sq, hbar) if not stationary else math.nan,
        E_bar=e_bar, var_E=var, deriv_norm_sq=deriv_sq, eps_direct=eps_direct,
        eps_variance=eps_var, stationarity_flag=flag, h_norm=h_norm,
        deriv_norm=hbar * math.sqrt(full_sq), stationarity_defect=defect, stationary=stationary)


def r_index(var_E: float, deriv_norm_sq: float, hbar: float = 1.0) -> float:
    """``hbar ||psidot+|| / Delta E``; NaN signals a stationary state."""
    if var_E <= 0.0:
        return math.nan
    return math.sqrt(hbar**2 * deriv_norm_sq / var_E)


def relevant_split(H: HamiltonianSpec, psi: WaveState):
    """Split ``H psi = E_bar psi + dE psi_perp``.

    Returns ``(psi_perp, dE)`` or a :class:`StationaryState` when ``dE``
    vanishes to within ``STATIONARY_RTOL`` of ``||H psi||``.
    """
    hpsi = apply_h(H, psi)
    e_bar, var = energy_moments(H, psi, hpsi)
    de = math.sqrt(var)
    if de <= STATIONARY_RTOL * max(hpsi.norm(), 1e-300):
        return StationaryState(e_bar)
    return (hpsi - e_bar * psi) / de, de


def projector_error(H: HamiltonianSpec, psi: WaveState, tangent: Sequence[WaveState]) -> float:
    """``eps`` from ``hbar^2 eps^2 = <(H-E)psi|Q (H-E)psi>``.

    Valid only for complex-linear tangent spaces; ``tangent`` must span
    the space (with ``psi`` among its directions).
    """
    hpsi = apply_h(H, psi)
    e_bar, _ = energy_moments(H, psi, hpsi)
    a = (hpsi - e_bar * psi).amplitudes.ravel()
    B = np.stack([v.amplitudes.ravel() for v in tangent], axis=1)
    Q, R = np.linalg.qr(B)
    keep = np.abs(np.diag(R)) > 1e-12 * np.max(np.abs(np.diag(R)))
    Q = Q[:, keep]
    rest = a - Q @ (Q.conj().T @ a)
    return math.sqrt(np.vdot(rest, rest).real * psi.grid.volume_element) / H.hbar


def accumulate_bound(reports: Sequence[ErrorReport]) -> np.ndarray:
    """Trapezoidal running integral of ``eps`` over the report times."""
    t = np.array([r.t for r in reports], dtype=float)
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("reports must be strictly time-ordered")
    eps = np.array([r.eps for r in reports], dtype=float)
    if len(t) < 2:
        return np.zeros(len(t))
    return cumulative_trapezoid(eps, t, initial=0.0)


def with_bounds(reports: Sequence[ErrorReport]) -> list[ErrorReport]:
    bounds = accumulate_bound(reports)
    return [replace(r, bound_accum=float(b)) for r, b in zip(reports, bounds)]


def bound_self_check(reports: Sequence[ErrorReport]) -> float:
    """Relative change of the final bound when every other sample is dropped.

    Large values mean the sampling is too coarse for the trapezoid rule.
    """
    full = accumulate_bound(reports)[-1]
    sub = list(reports[::2])
    if sub[-1] is not reports[-1]:
        sub.append(reports[-1])
    half = accumulate_bound(sub)[-1]
    return abs(full - half) / max(abs(full), 1e-300)


def guided_error(H: HamiltonianSpec, psi: WaveState, psidot_var: WaveState,
                 psidot_guided: WaveState, t: float = 0.0) -> ErrorReport:
    """Local error when part of the motion is prescribed (guided parameters).

    ``psidot_var`` is the variational part (in the tangent space, optimal
    given the guide) and ``psidot_guided`` the prescribed part.
    """
    hbar = H.hbar
    hpsi = apply_h(H, psi)
    e_bar, var = energy_moments(H, psi, hpsi)
    R = hpsi - (1j * hbar) * psidot_guided
    b = (1j * hbar) * psidot_var
    eps2 = _stable_difference(R, b) / hbar**2
    total = psidot_var + psidot_guided
    eps_direct = ((1j * hbar) * total - hpsi).norm() / hbar

    var_sq = inner(psidot_var, psidot_var).real
    im = inner(psidot_var, R).imag
    defect = abs(hbar * var_sq - im) / max(hbar * var_sq, 1e-300)
    r_norm = R.norm()
    eps, eps_var, flag = _resolve(eps2, eps_direct, max(r_norm**2, 1e-300) / hbar**2)
    if defect > AGREEMENT_RTOL:
        flag, eps = True, eps_direct

    resid = hpsi - (1j * hbar) * total
    drift = 2.0 * inner(psidot_guided, resid).real
    drift_bound = 2.0 * hbar * eps * psidot_guided.norm()
    return ErrorReport(
        t=float(t), eps=eps, r_index=hbar * math.sqrt(var_sq) / max(r_norm, 1e-300),
        E_bar=e_bar, var_E=var, deriv_norm_sq=var_sq, eps_direct=eps_direct,
        eps_variance=eps_var, stationarity_flag=flag, h_norm=hpsi.norm(), deriv_norm=hbar * math.sqrt(var_sq),
        stationarity_defect=defect, residual_guided=r_norm, energy_drift=drift,
        drift_bound=drift_bound)


CSV_COLUMNS = ["t", "eps", "r", "E_bar", "var_E", "deriv_norm_sq", "bound_accum",
               "eps_direct", "stationarity_flag"]
GUIDED_COLUMNS = ["residual_guided", "energy_drift", "drift_bound"]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    return f"{float(x):.17g}"


def report_row(r: ErrorReport, guided: bool = False) -> list[str]:
    row = [r.t, r.eps, r.r_index, r.E_bar, r.var_E, r.deriv_norm_sq, r.bound_accum,
           r.eps_direct, r.stationarity_flag]
    if guided:
        row += [r.residual_guided, r.energy_drift, r.drift_bound]
    return [_fmt(x) for x in row]


def write_reports_csv(reports: Sequence[ErrorReport], path: str | Path, extra=None):
    """Write the diagnostics table; ``extra`` maps column name -> values."""
    guided = any(r.residual_guided is not None for r in reports)
    header = CSV_COLUMNS + (GUIDED_COLUMNS if guided else [])
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header + list(extra))
        for i, r in enumerate(reports):
            w.writerow(report_row(r, guided) + [_fmt(v[i]) for v in extra.values()])


def report_fields() -> list[str]:
    return [f.name for f in fields(ErrorReport)]
