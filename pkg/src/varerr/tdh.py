"""Time-dependent Hartree (single product) dynamics for a few distinguishable modes.

The whole potential ``V(x_1..x_N)`` is treated as the interaction; the
mean-field Hamiltonian of mode ``i`` is the partial expectation of ``H`` over
the other spfs. All error quantities are evaluated on the dense joint grid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .diagnostics import NEGATIVE_TOL, ErrorReport, local_error, with_bounds
from .exact import NumericalFailure
from .grid import (Grid, HamiltonianSpec, WaveState, apply_h, energy_moments, kinetic_1d,
                   kinetic_matrix_1d)

logger = logging.getLogger(__name__)

ODE_RTOL = 1e-10
ODE_ATOL = 1e-12
RENORM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TDHState:
    spfs: tuple[WaveState, ...]
    gauges: tuple[float, ...] | None = None

    def __post_init__(self):
        spfs = tuple(self.spfs)
        if len(spfs) < 2:
            raise ValueError("Hartree products need at least two modes")
        for k, f in enumerate(spfs):
            if f.grid.ndim != 1:
                raise ValueError(f"spf {k} must live on a 1D grid")
            if abs(f.norm() - 1.0) > 1e-9:
                raise ValueError(f"spf {k} not normalized (norm {f.norm():.12g})")
        gauges = tuple(self.gauges) if self.gauges is not None else (0.0,) * len(spfs)
        if len(gauges) != len(spfs) or abs(sum(gauges)) > 1e-12:
            raise ValueError("need one gauge per mode with zero sum")
        object.__setattr__(self, "spfs", spfs)
        object.__setattr__(self, "gauges", gauges)

    @property
    def n_modes(self) -> int:
        return len(self.spfs)

    @property
    def hbar(self) -> float:
        return self.spfs[0].hbar


@dataclass(frozen=True)
class MeanFieldDecomposition:
    var_E: float
    var_mf: float
    var_dV: float
    cross: float
    eps_mf: float
    r_mf: float
    r_lower: float
    eps_full: float
    crosscheck_ok: bool


def joint_grid(s: TDHState) -> Grid:
    return Grid.product([f.grid for f in s.spfs])


def _product(arrays: Sequence[np.ndarray]) -> np.ndarray:
    out = arrays[0]
    for a in arrays[1:]:
        out = np.multiply.outer(out, a)
    return out


def hartree_to_grid(s: TDHState, joint: Grid | None = None) -> WaveState:
    """Tensor product of the spfs on the joint grid."""
    g = joint_grid(s)
    if joint is not None:
        if joint.shape != g.shape or joint.axes != g.axes:
            raise ValueError("joint grid does not match the per-mode grids")
        g = joint
    if g.size > g.point_cap:
        raise ValueError(f"joint grid has {g.size} points, above the cap {g.point_cap}")
    return WaveState(g, _product([f.amplitudes for f in s.spfs]), s.hbar)


def _densities(H: HamiltonianSpec, amps):
    return [np.abs(a) ** 2 * ax.dx for a, ax in zip(amps, H.grid.axes)]


def partial_average(field: np.ndarray, s: TDHState, i: int) -> np.ndarray:
    """``<Psi^i|field|Psi^i>``: contract a joint-grid field with all densities but mode ``i``."""
    rho = [np.abs(f.amplitudes) ** 2 * f.grid.axes[0].dx for f in s.spfs]
    return _contract(field, rho, i)


def _contract(field, rho, i):
    out = field
    for j in reversed(range(len(rho))):
        if j != i:
            out = np.tensordot(out, rho[j], axes=([j], [0]))
    return out


def _kinetic(H: HamiltonianSpec, amp, j):
    return kinetic_1d(amp, H.grid.axes[j], H.masses[j], H.hbar, H.kinetic, H.grid.boundary)


def _kinetic_expectations(H: HamiltonianSpec, amps):
    return [float(np.vdot(a, _kinetic(H, a, j)).real * H.grid.axes[j].dx)
            for j, a in enumerate(amps)]


def _check(H: HamiltonianSpec, s: TDHState):
    if H.n_el is not None or H.grid.ndim != s.n_modes:
        raise ValueError("Hamiltonian must be scalar with one grid axis per mode")
    for j, f in enumerate(s.spfs):
        if f.grid.axes[0] != H.grid.axes[j]:
            raise ValueError(f"spf {j} grid differs from axis {j} of the Hamiltonian")


def mean_field_h(H: HamiltonianSpec, s: TDHState, i: int) -> np.ndarray:
    """Dense one-mode matrix ``H_i = <Psi^i|H|Psi^i>``."""
    _check(H, s)
    ax = H.grid.axes[i]
    T = kinetic_matrix_1d(ax, H.masses[i], H.hbar, H.kinetic, H.grid.boundary)
    amps = [f.amplitudes for f in s.spfs]
    t_other = sum(t for j, t in enumerate(_kinetic_expectations(H, amps)) if j != i)
    v = partial_average(H.potential, s, i)
    return T + np.diag(v) + t_other * np.eye(ax.n_points)


def _mean_field_apply(H: HamiltonianSpec, amps):
    """``H_i phi_i`` for every mode, plus ``E_bar``, ``<V>`` and the ``v_i``."""
    tex = _kinetic_expectations(H, amps)
    rho = _densities(H, amps)
    vs = [_contract(H.potential, rho, i) for i in range(len(amps))]
    vbar = float(np.sum(vs[0] * rho[0]))
    e_bar = sum(tex) + vbar
    out = [_kinetic(H, a, i) + (vs[i] + sum(tex) - tex[i]) * a for i, a in enumerate(amps)]
    return out, e_bar, vbar, vs


def tdh_rhs(H: HamiltonianSpec, s: TDHState) -> list[WaveState]:
    """``phi_i dot = (H_i + g_i - E_bar) phi_i / (i hbar)``."""
    _check(H, s)
    hphi, e_bar, _, _ = _mean_field_apply(H, [f.amplitudes for f in s.spfs])
    return [f.with_amplitudes((h + (g - e_bar) * f.amplitudes) / (1j * H.hbar))
            for f, h, g in zip(s.spfs, hphi, s.gauges)]


def joint_derivative(s: TDHState, dots: Sequence[WaveState], joint: Grid | None = None) -> WaveState:
    """``sum_i phi_1 .. phidot_i .. phi_N`` on the joint grid."""
    psi = hartree_to_grid(s, joint)
    amp = np.zeros_like(psi.amplitudes)
    for i in range(s.n_modes):
        amp += _product([d.amplitudes if j == i else f.amplitudes
                         for j, (f, d) in enumerate(zip(s.spfs, dots))])
    return psi.with_amplitudes(amp)


def fluctuating_potential(H: HamiltonianSpec, s: TDHState) -> np.ndarray:
    """``dV = V + (N-1)<V> - sum_i v_i`` on the joint grid (zero mean)."""
    _, _, vbar, vs = _mean_field_apply(H, [f.amplitudes for f in s.spfs])
    dv = H.potential + (s.n_modes - 1) * vbar
    for i, v in enumerate(vs):
        shape = [1] * s.n_modes
        shape[i] = -1
        dv = dv - v.reshape(shape)
    return dv


def tdh_error(H: HamiltonianSpec, s: TDHState, t: float = 0.0):
    """Mean-field decomposition of the energy variance and the local error.

    Returns ``(MeanFieldDecomposition, ErrorReport)``; the report is the
    general diagnostic of the reconstructed joint state and derivative.
    """
    _check(H, s)
    hbar = H.hbar
    psi = hartree_to_grid(s, H.grid)
    hpsi = apply_h(H, psi)
    e_bar, var = energy_moments(H, psi, hpsi)
    hphi, _, _, _ = _mean_field_apply(H, [f.amplitudes for f in s.spfs])
    mf_vecs = [h - e_bar * f.amplitudes for h, f in zip(hphi, s.spfs)]
    var_mf = sum(float(np.vdot(v, v).real) * f.grid.axes[0].dx for v, f in zip(mf_vecs, s.spfs))

    dv = fluctuating_potential(H, s)
    dv_psi = dv * psi.amplitudes
    dvol = H.grid.volume_element
    var_dV = float(np.vdot(dv_psi, dv_psi).real * dvol)
    cross = 0.0
    for i in range(s.n_modes):
        hi_psi = _product([mf_vecs[i] if j == i else f.amplitudes for j, f in enumerate(s.spfs)])
        cross += 2.0 * float(np.vdot(hi_psi, dv_psi).real * dvol)

    corr = var_dV + cross
    # the residual is dV psi itself; below the rounding floor of the sum use it directly
    eps_mf = math.sqrt(var_dV if abs(corr) <= NEGATIVE_TOL * var else max(corr, 0.0)) / hbar
    de_mf, dv0 = math.sqrt(var_mf), math.sqrt(var_dV)
    r_mf = de_mf / math.sqrt(var) if var > 0 else math.nan
    r_lower = de_mf / (de_mf + dv0) if de_mf + dv0 > 0 else math.nan

    dots = tdh_rhs(H, s)
    rep = local_error(H, psi, joint_derivative(s, dots, H.grid), t=t, hpsi=hpsi)
    ok = abs(eps_mf - rep.eps) <= 1e-7 * max(rep.eps, 1e-300) or (
        abs(eps_mf**2 - rep.eps**2) <= 1e-9 * max(var, 1e-300) / hbar**2)
    dec = MeanFieldDecomposition(var, var_mf, var_dV, cross, eps_mf, r_mf, r_lower, rep.eps, bool(ok))
    return dec, rep


@dataclass(frozen=True, eq=False)
class TDHRun:
    times: np.ndarray
    states: tuple[TDHState, ...]
    phases: np.ndarray
    reports: tuple[ErrorReport, ...]
    decompositions: tuple[MeanFieldDecomposition, ...]
    renormalizations: int

    def joint_states(self, joint: Grid | None = None) -> list[WaveState]:
        """Joint-grid states including the accumulated optimal-gauge phase."""
        return [np.exp(1j * ph) * hartree_to_grid(s, joint) for s, ph in zip(self.states, self.phases)]


def propagate_tdh(H: HamiltonianSpec, s0: TDHState, t_final: float, n_samples: int = 200,
                  rtol: float = ODE_RTOL, atol: float = ODE_ATOL) -> TDHRun:
    """Integrate the Hartree equations (gauges fixed at zero).

    The spfs evolve in the standard gauge; the phase ``-int E_bar dt/hbar``
    is integrated alongside so the product can be compared with the exact
    wavefunction.
    """
    _check(H, s0)
    sizes = [f.amplitudes.size for f in s0.spfs]
    splits = np.cumsum(sizes)[:-1]
    grids = [f.grid for f in s0.spfs]

    def rhs(t, y):
        parts = np.split(y[:-1], splits)
        hphi, e_bar, _, _ = _mean_field_apply(H, parts)
        out = [(h + (g - e_bar) * p) / (1j * H.hbar) for h, p, g in zip(hphi, parts, s0.gauges)]
        return np.concatenate(out + [np.array([-e_bar / H.hbar], dtype=complex)])

    y0 = np.concatenate([f.amplitudes for f in s0.spfs] + [np.zeros(1, dtype=complex)])
    times = np.linspace(0.0, t_final, n_samples)
    sol = solve_ivp(rhs, (0.0, t_final), y0, method="DOP853", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise NumericalFailure(f"Hartree integration failed: {sol.message}")

    states, phases, reports, decs = [], [], [], []
    renorm = 0
    for k, t in enumerate(times):
        parts = np.split(sol.y[:-1, k], splits)
        spfs = []
        for g, p in zip(grids, parts):
            f = WaveState(g, p, H.hbar)
            if abs(f.norm() - 1.0) > RENORM_TOL:
                logger.info("renormalizing spf at t=%.6g (norm %.12g)", t, f.norm())
                f = f.normalized()
                renorm += 1
            spfs.append(f)
        st = TDHState(tuple(spfs), s0.gauges)
        dec, rep = tdh_error(H, st, t=t)
        states.append(st)
        phases.append(sol.y[-1, k].real)
        reports.append(rep)
        decs.append(dec)
    return TDHRun(times, tuple(states), np.array(phases), tuple(with_bounds(reports)),
                  tuple(decs), renorm)


DECOMPOSITION_COLUMNS = ["t", "var_E", "var_mf", "var_dV", "cross", "eps_mf", "r_mf", "r_lower"]


def write_decomposition_csv(run: TDHRun, path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECOMPOSITION_COLUMNS)
        for t, d in zip(run.times, run.decompositions):
            w.writerow([f"{x:.17g}" for x in (t, d.var_E, d.var_mf, d.var_dV, d.cross,
                                               d.eps_mf, d.r_mf, d.r_lower)])


def gaussian_spf(grid: Grid, q0: float, p0: float, width: float, hbar: float = 1.0) -> WaveState:
    """Normalized Gaussian spf with coordinate spread ``width``."""
    q = grid.points(0)
    amp = np.exp(-((q - q0) ** 2) / (4 * width**2) + 1j * p0 * q / hbar)
    return WaveState(grid, amp, hbar).normalized()
