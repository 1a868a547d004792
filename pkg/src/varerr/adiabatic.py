"""Born-Oppenheimer error diagnostics for analytic diabatic models.

A model is a Hermitian electronic matrix ``h(X)`` on a 1D nuclear grid. The
adiabatic frames are sign/phase-fixed eigenvectors; their first and second
X-derivatives come from fourth-order central differences of off-grid
eigensolves at ``X +- k h``, each aligned with the frame at ``X``.

The nuclear blocks of the kinetic energy are built in a manifestly
Hermitian form,

    <T>_mn = delta_mn T - (hbar^2/2M) (d_mn D + D d_mn - G_mn),

with ``d_mn = <Phi_m|dPhi_n>``, ``G_mn = <dPhi_m|dPhi_n>`` and ``D`` the
spectral derivative; it reduces to ``-(hbar^2/2M)(2 d_mn D + B_mn)`` for
``m != n``, ``B_mn = <Phi_m|d^2 Phi_n>``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .diagnostics import ErrorReport, local_error, with_bounds
from .exact import EigenPropagator
from .grid import (Grid, HamiltonianSpec, WaveState, derivative_1d, derivative_matrix_1d,
                   kinetic_matrix_1d)

DEGENERACY_FLOOR = 1e-6
SUPPORT_DENSITY = 1e-12


class DegeneracyError(ValueError):
    """Adiabatic surfaces too close on the wavepacket support."""


def _align(ref: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Rotate each column's phase so its overlap with ``ref`` is real positive."""
    ov = np.einsum("an,an->n", ref.conj(), vecs)
    mag = np.abs(ov)
    ph = np.divide(ov, mag, out=np.ones_like(ov), where=mag > 0)
    return vecs * ph.conj()


class AdiabaticModel:
    """Adiabatic surfaces, frames and derivative couplings of ``h(X)``.

    Parameters
    ----------
    grid : Grid
        1D nuclear grid.
    mass : float
        Nuclear mass ``M``.
    h, dh : callable
        ``h(X)`` and ``dh/dX(X)`` returning ``(n_el, n_el)`` Hermitian arrays.
    hbar : float
    fd_step : float, optional
        Finite-difference step for the frame derivatives; defaults to
        ``min(dx, 1e-3)``.
    """

    def __init__(self, grid: Grid, mass: float, h: Callable, dh: Callable, hbar: float = 1.0,
                 fd_step: float | None = None, name: str = "custom"):
        if grid.ndim != 1:
            raise ValueError("the nuclear grid must be 1D")
        if mass <= 0:
            raise ValueError("mass must be positive")
        self.grid, self.mass, self.hbar, self.name = grid, float(mass), float(hbar), name
        self.h, self.dh = h, dh
        self.X = grid.points(0)
        self.fd_step = float(fd_step if fd_step is not None else min(grid.dx[0], 1e-3))
        self.h_table = np.array([h(x) for x in self.X])
        herm = np.max(np.abs(self.h_table - np.conj(np.swapaxes(self.h_table, 1, 2))))
        if herm > 1e-12 * max(1.0, np.max(np.abs(self.h_table))):
            raise ValueError(f"diabatic matrix not Hermitian (residual {herm:.3g})")
        self.n_el = self.h_table.shape[-1]
        if self.n_el not in (2, 3):
            raise ValueError("electronic dimension must be 2 or 3")

        evals, frames = np.linalg.eigh(self.h_table)
        for j in range(1, len(self.X)):
            frames[j] = _align(frames[j - 1], frames[j])
        self.energies = evals
        self.frames = frames
        self.dframes, self.d2frames = self._frame_derivatives(self.fd_step)

    def _frame_derivatives(self, step: float):
        d1 = np.empty_like(self.frames)
        d2 = np.empty_like(self.frames)
        for j, x in enumerate(self.X):
            f = {}
            for k in (-2, -1, 1, 2):
                _, v = np.linalg.eigh(self.h(x + k * step))
                f[k] = _align(self.frames[j], v)
            f[0] = self.frames[j]
            d1[j] = (-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * step)
            d2[j] = (-f[2] + 16 * f[1] - 30 * f[0] + 16 * f[-1] - f[-2]) / (12 * step**2)
        return d1, d2

    @cached_property
    def d(self) -> np.ndarray:
        """``d[j, m, n] = <Phi_m|dPhi_n/dX>`` at ``X_j``."""
        return np.einsum("jam,jan->jmn", self.frames.conj(), self.dframes)

    @cached_property
    def B(self) -> np.ndarray:
        """``B[j, m, n] = <Phi_m|d^2 Phi_n/dX^2>``."""
        return np.einsum("jam,jan->jmn", self.frames.conj(), self.d2frames)

    @cached_property
    def G(self) -> np.ndarray:
        """``G[j, m, n] = <dPhi_m|dPhi_n>``."""
        return np.einsum("jam,jan->jmn", self.dframes.conj(), self.dframes)

    @cached_property
    def force(self) -> np.ndarray:
        """Hellmann-Feynman ``F[j, m, n] = -<Phi_m|dh/dX|Phi_n>``."""
        dh = np.array([self.dh(x) for x in self.X])
        return -np.einsum("jam,jab,jbn->jmn", self.frames.conj(), dh, self.frames)

    def gap(self, m: int, n: int) -> np.ndarray:
        """``E_m(X) - E_n(X)``."""
        return self.energies[:, m] - self.energies[:, n]

    def coupling_hf(self, m: int, n: int) -> np.ndarray:
        """``F_mn / (E_m - E_n)``, the first-derivative coupling from the force."""
        return self.force[:, m, n] / self.gap(m, n)

    def richardson_change(self) -> float:
        """Largest change of ``d`` and ``B`` when the difference step is halved."""
        d1, d2 = self._frame_derivatives(0.5 * self.fd_step)
        d_h = np.einsum("jam,jan->jmn", self.frames.conj(), d1)
        b_h = np.einsum("jam,jan->jmn", self.frames.conj(), d2)
        return float(max(np.max(np.abs(d_h - self.d)), np.max(np.abs(b_h - self.B))))

    def diabatic_hamiltonian(self) -> HamiltonianSpec:
        """Full nuclear-electronic Hamiltonian on the joint grid."""
        return HamiltonianSpec(self.grid, (self.mass,), self.h_table, "spectral", self.hbar)

    def embed(self, psi: WaveState, n: int) -> WaveState:
        """``Psi(X, a) = Phi_an(X) psi(X)`` (electronic index last)."""
        return WaveState(self.grid, psi.amplitudes[:, None] * self.frames[:, :, n], self.hbar)

    def project(self, Psi: WaveState, n: int) -> WaveState:
        """``<Phi_n|Psi>_el`` as a nuclear state."""
        amp = np.einsum("ja,ja->j", self.frames[:, :, n].conj(), Psi.amplitudes)
        return WaveState(self.grid, amp, self.hbar)


# -- named models -------------------------------------------------------------

def avoided_crossing(grid: Grid, mass: float = 1.0, k: float = 1.0, x0: float = 0.0,
                     gap: float = 1.0, coupling: float = 0.1, width: float = 1.0,
                     hbar: float = 1.0, **kw) -> AdiabaticModel:
    """Two displaced parabolas with a Gaussian-localized diabatic coupling.

    ``V11 = k(X+x0)^2/2``, ``V22 = k(X-x0)^2/2 + gap``,
    ``V12 = coupling * exp(-X^2/(2 width^2))``.
    """
    def h(x):
        c = coupling * math.exp(-x * x / (2 * width**2))
        return np.array([[0.5 * k * (x + x0) ** 2, c], [c, 0.5 * k * (x - x0) ** 2 + gap]])

    def dh(x):
        dc = -coupling * x / width**2 * math.exp(-x * x / (2 * width**2))
        return np.array([[k * (x + x0), dc], [dc, k * (x - x0)]])

    return AdiabaticModel(grid, mass, h, dh, hbar, name="avoided_crossing", **kw)


def tanh_crossing(grid: Grid, mass: float = 1.0, k: float = 0.5, a: float = 0.5,
                  b: float = 1.0, coupling: float = 0.1, width: float = 1.0,
                  hbar: float = 1.0, **kw) -> AdiabaticModel:
    """Confined tanh crossing: ``V11 = k X^2/2 + a tanh(bX) = V22 + 2a tanh(bX)``."""
    def h(x):
        t = a * math.tanh(b * x)
        c = coupling * math.exp(-x * x / (2 * width**2))
        return np.array([[0.5 * k * x * x + t, c], [c, 0.5 * k * x * x - t]])

    def dh(x):
        dt = a * b / math.cosh(b * x) ** 2
        dc = -coupling * x / width**2 * math.exp(-x * x / (2 * width**2))
        return np.array([[k * x + dt, dc], [dc, k * x - dt]])

    return AdiabaticModel(grid, mass, h, dh, hbar, name="tanh_crossing", **kw)


def linear_vibronic(grid: Grid, mass: float = 1.0, k: float = 1.0, kappa=(0.5, -0.5),
                    offsets=(0.0, 1.0), coupling=0.2, hbar: float = 1.0, **kw) -> AdiabaticModel:
    """``V_aa = k X^2/2 + kappa_a X + offset_a`` with constant couplings.

    ``coupling`` is a scalar (all pairs) or a symmetric matrix; two or three
    states follow from the length of ``kappa``.
    """
    kappa = np.asarray(kappa, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    n = len(kappa)
    if len(offsets) != n:
        raise ValueError("kappa and offsets must have equal length")
    lam = np.asarray(coupling, dtype=float)
    lam = (np.full((n, n), float(lam)) if lam.ndim == 0 else lam.copy())
    np.fill_diagonal(lam, 0.0)
    if not np.allclose(lam, lam.T):
        raise ValueError("coupling matrix must be symmetric")

    def h(x):
        return lam + np.diag(0.5 * k * x * x + kappa * x + offsets)

    def dh(x):
        return np.diag(k * x + kappa)

    return AdiabaticModel(grid, mass, h, dh, hbar, name="linear_vibronic", **kw)


NAMED_MODELS = {
    "avoided_crossing": avoided_crossing,
    "tanh_crossing": tanh_crossing,
    "linear_vibronic": linear_vibronic,
}


def tabulated_model(grid: Grid, mass: float, X, entries, hbar: float = 1.0, **kw) -> AdiabaticModel:
    """Model from tabulated real symmetric entries, interpolated by cubic splines.

    ``entries`` maps ``"V11", "V12", "V22"`` (and optionally the 3-state
    entries) to arrays over ``X``.
    """
    from scipy.interpolate import CubicSpline

    names = sorted(entries)
    n = 3 if "V33" in entries else 2
    splines = {key: CubicSpline(X, entries[key]) for key in names}

    def build(x, der):
        m = np.zeros((n, n))
        for key, sp in splines.items():
            a, b = int(key[1]) - 1, int(key[2]) - 1
            m[a, b] = m[b, a] = sp(x, der)
        return m

    return AdiabaticModel(grid, mass, lambda x: build(x, 0), lambda x: build(x, 1), hbar,
                          name="tabulated", **kw)


# -- operators -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NuclearState:
    psi: WaveState
    n: int

    def __post_init__(self):
        if abs(self.psi.norm() - 1.0) > 1e-9:
            raise ValueError("nuclear state must be normalized")


def _kinetic_prefactor(model: AdiabaticModel) -> float:
    return model.hbar**2 / (2.0 * model.mass)


def reduced_kinetic(model: AdiabaticModel, m: int, n: int) -> np.ndarray:
    """Dense ``<T>_mn`` on the nuclear grid."""
    ax = model.grid.axes[0]
    D = derivative_matrix_1d(ax)
    d = np.diag(model.d[:, m, n])
    out = -_kinetic_prefactor(model) * (d @ D + D @ d - np.diag(model.G[:, m, n]))
    if m == n:
        out = out + kinetic_matrix_1d(ax, model.mass, model.hbar)
    return out


def bo_hamiltonian(model: AdiabaticModel, n: int) -> np.ndarray:
    """``H_n = <T>_nn + E_n(X)``."""
    return reduced_kinetic(model, n, n) + np.diag(model.energies[:, n])


def bo_error_fluctuation(model: AdiabaticModel, s: NuclearState) -> float:
    """``eps`` from the kinetic-energy fluctuation ``sum_{m!=n} <T>_nm <T>_mn``."""
    v = s.psi.amplitudes
    tot = 0.0
    for m in range(model.n_el):
        if m == s.n:
            continue
        fl = reduced_kinetic(model, s.n, m) @ (reduced_kinetic(model, m, s.n) @ v)
        tot += np.vdot(v, fl).real
    return math.sqrt(max(tot * model.grid.volume_element, 0.0)) / model.hbar


def _check_gaps(model: AdiabaticModel, s: NuclearState):
    support = np.abs(s.psi.amplitudes) ** 2 > SUPPORT_DENSITY
    for m in range(model.n_el):
        if m == s.n:
            continue
        gap = np.abs(model.gap(m, s.n))
        gap = np.where(support, gap, np.inf)
        j = int(np.argmin(gap))
        if gap[j] < DEGENERACY_FLOOR:
            raise DegeneracyError(
                f"surfaces {s.n} and {m} are {gap[j]:.3g} apart at X = {model.X[j]:.6g}, "
                f"below the floor {DEGENERACY_FLOOR:g}")


def transition_amplitudes(model: AdiabaticModel, s: NuclearState) -> dict[int, WaveState]:
    """``phi_{m<-n} = -(hbar^2/2M)[2 (F_mn/dE_mn) dpsi/dX + B_mn psi]``."""
    _check_gaps(model, s)
    v = s.psi.amplitudes
    dv = derivative_1d(v, model.grid.axes[0])
    out = {}
    for m in range(model.n_el):
        if m == s.n:
            continue
        amp = -_kinetic_prefactor(model) * (2.0 * model.coupling_hf(m, s.n) * dv + model.B[:, m, s.n] * v)
        out[m] = s.psi.with_amplitudes(amp)
    return out


def bo_error_transitions(model: AdiabaticModel, s: NuclearState):
    """``(eps, per_m)`` with ``hbar^2 eps^2 = sum_m ||phi_{m<-n}||^2``."""
    amps = transition_amplitudes(model, s)
    per = [amps[m].norm() ** 2 / model.hbar**2 if m in amps else 0.0 for m in range(model.n_el)]
    return math.sqrt(sum(per)), per


def full_space_error(model: AdiabaticModel, s: NuclearState, Hn: np.ndarray | None = None,
                     t: float = 0.0) -> ErrorReport:
    """Diagnostics of the embedded BO state with derivative ``Phi_n H_n psi/(i hbar)``."""
    if Hn is None:
        Hn = bo_hamiltonian(model, s.n)
    Psi = model.embed(s.psi, s.n)
    psidot = s.psi.with_amplitudes(Hn @ s.psi.amplitudes / (1j * model.hbar))
    return local_error(model.diabatic_hamiltonian(), Psi, model.embed(psidot, s.n), t=t)


@dataclass(frozen=True, eq=False)
class BORun:
    times: np.ndarray
    states: tuple[WaveState, ...]
    surface: int
    reports: tuple[ErrorReport, ...]
    eps_fluct: np.ndarray
    eps_trans: np.ndarray
    per_transition: np.ndarray


def propagate_bo(model: AdiabaticModel, psi0: WaveState, n: int, t_final: float,
                 n_samples: int = 200) -> BORun:
    """Evolve the nuclear wavefunction on surface ``n`` (exactly, by diagonalization)."""
    Hn = bo_hamiltonian(model, n)
    prop = EigenPropagator(0.5 * (Hn + Hn.conj().T), model.hbar)
    times = np.linspace(0.0, t_final, n_samples)
    states, reports, ef, et, per = [], [], [], [], []
    for t in times:
        psi = psi0.with_amplitudes(prop(psi0.amplitudes, t))
        s = NuclearState(psi, n)
        states.append(psi)
        reports.append(full_space_error(model, s, Hn, t=t))
        ef.append(bo_error_fluctuation(model, s))
        e, p = bo_error_transitions(model, s)
        et.append(e)
        per.append(p)
    return BORun(times, tuple(states), n, tuple(with_bounds(reports)), np.array(ef),
                 np.array(et), np.array(per))


def write_bo_csv(run: BORun, path: str | Path):
    """Columns ``t, eps_fluct, eps_trans`` and one ``eps2_<m><-<n>`` per transition."""
    n_el = run.per_transition.shape[1]
    others = [m for m in range(n_el) if m != run.surface]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "eps_fluct", "eps_trans"] + [f"eps2_{m}<-{run.surface}" for m in others])
        for k, t in enumerate(run.times):
            row = [t, run.eps_fluct[k], run.eps_trans[k]] + [run.per_transition[k, m] for m in others]
            w.writerow([f"{x:.17g}" for x in row])
