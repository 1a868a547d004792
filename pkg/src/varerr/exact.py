"""Reference evolution on the dense grid.

The eigendecomposition path is exact up to the diagonalization tolerance and
is used whenever the Hilbert-space dimension is at most
``EIGEN_DIMENSION_LIMIT``; larger problems use short-iterative Lanczos steps
with an a-posteriori residual check.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import (GridMismatchError, HamiltonianSpec, WaveState, apply_h,
                   dense_matrix, inner, require_normalized)

logger = logging.getLogger(__name__)

EIGEN_DIMENSION_LIMIT = 2048
KRYLOV_TOLERANCE = 1e-10


class NumericalFailure(RuntimeError):
    """Diagonalization or Krylov propagation failed."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: tuple[WaveState, ...]
    method: str
    norms: np.ndarray
    energies: np.ndarray

    @property
    def norm_drift(self) -> float:
        return float(np.max(np.abs(self.norms - 1.0)))

    @property
    def energy_drift(self) -> float:
        e0 = self.energies[0]
        return float(np.max(np.abs(self.energies - e0)) / max(abs(e0), 1e-300))

    def state_at(self, t: float) -> WaveState:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not stored")
        return self.states[i]


class EigenPropagator:
    """``exp(-i H t / hbar)`` from a full eigendecomposition of a dense matrix."""

    def __init__(self, matrix: np.ndarray, hbar: float = 1.0):
        self.hbar = hbar
        try:
            self.evals, self.evecs = np.linalg.eigh(matrix)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(matrix)
            raise NumericalFailure(
                f"eigendecomposition failed (dimension {matrix.shape[0]}, "
                f"condition number {cond:.3g})") from exc

    def __call__(self, vec: np.ndarray, t: float) -> np.ndarray:
        coef = self.evecs.conj().T @ vec
        return self.evecs @ (np.exp(-1j * self.evals * t / self.hbar) * coef)


def _lanczos_step(apply, v: np.ndarray, dt: float, hbar: float, m_max: int = 40):
    """One short-iterative Lanczos step; returns (new vector, error estimate)."""
    beta0 = np.linalg.norm(v)
    V = [v / beta0]
    alpha, beta = [], []
    err = np.inf
    for j in range(m_max):
        w = apply(V[j])
        a = np.vdot(V[j], w).real
        w = w - a * V[j]
        if j:
            w = w - beta[-1] * V[j - 1]
        # full reorthogonalization keeps the small basis clean
        for u in V:
            w = w - np.vdot(u, w) * u
        b = np.linalg.norm(w)
        alpha.append(a)
        T = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
        ev, U = np.linalg.eigh(T)
        c = U @ (np.exp(-1j * ev * dt / hbar) * U[0].conj())
        err = b * abs(c[-1]) * beta0
        if err < KRYLOV_TOLERANCE * beta0 or b < 1e-14 * beta0:
            break
        beta.append(b)
        V.append(w / b)
    return beta0 * (np.array(V[: len(c)]).T @ c), err


def _krylov_propagate(H: HamiltonianSpec, psi: WaveState, t: float):
    shape = psi.amplitudes.shape

    def apply(v):
        return apply_h(H, psi.with_amplitudes(v.reshape(shape))).amplitudes.ravel()

    v = psi.amplitudes.ravel().copy()
    done, dt = 0.0, t
    while done < t - 1e-15 * max(1.0, t):
        dt = min(dt, t - done)
        new, err = _lanczos_step(apply, v, dt, H.hbar)
        if err > KRYLOV_TOLERANCE * np.linalg.norm(v):
            dt *= 0.5
            if dt < 1e-12 * t:
                raise NumericalFailure("Krylov step size underflow")
            continue
        v = new
        done += dt
        dt *= 1.5
    return v.reshape(shape)


def propagate_exact(H: HamiltonianSpec, psi0: WaveState, t_final: float,
                    n_store: int = 200, method: str = "auto") -> Trajectory:
    """Evolve ``psi0`` under ``H`` and store ``n_store`` equally spaced states.

    ``t_final == 0`` returns the initial state unchanged.
    """
    require_normalized(psi0)
    if t_final < 0:
        raise ValueError("t_final must be non-negative")
    if psi0.grid != H.grid:
        raise GridMismatchError("Hamiltonian and state live on different grids")
    times = np.linspace(0.0, t_final, max(int(n_store), 2)) if t_final > 0 else np.zeros(1)
    dim = psi0.amplitudes.size
    if method == "auto":
        method = "eigendecomposition" if dim <= EIGEN_DIMENSION_LIMIT else "short-iterative-Krylov"

    states = [psi0]
    if method == "eigendecomposition":
        prop = EigenPropagator(dense_matrix(H), H.hbar)
        v0 = psi0.amplitudes.ravel()
        for t in times[1:]:
            states.append(psi0.with_amplitudes(prop(v0, t).reshape(psi0.amplitudes.shape)))
    elif method == "short-iterative-Krylov":
        for t0, t1 in zip(times[:-1], times[1:]):
            states.append(states[-1].with_amplitudes(_krylov_propagate(H, states[-1], t1 - t0)))
    else:
        raise ValueError(f"unknown method {method!r}")

    norms = np.array([s.norm() for s in states])
    energies = np.array([inner(s, apply_h(H, s)).real for s in states])
    traj = Trajectory(times, tuple(states), method, norms, energies)
    logger.debug("exact propagation (%s): norm drift %.2e, energy drift %.2e",
                 method, traj.norm_drift, traj.energy_drift)
    return traj


def propagate_matrix(matrix: np.ndarray, psi0: WaveState, times, hbar: float = 1.0):
    """Evolve with an explicit dense Hermitian matrix (e.g. a BO Hamiltonian)."""
    prop = EigenPropagator(0.5 * (matrix + matrix.conj().T), hbar)
    v0 = psi0.amplitudes.ravel()
    return [psi0.with_amplitudes(prop(v0, t).reshape(psi0.amplitudes.shape)) for t in times]


def distance(psi: WaveState, phi: WaveState) -> float:
    """``||psi - phi||``."""
    if psi.grid != phi.grid:
        raise GridMismatchError("states live on different grids")
    return (psi - phi).norm()


def observable_error_bounds(delta: float, a_opnorm: float):
    """Bounds implied by a wavefunction error ``delta = ||Psi - Psi_exact||``.

    Returns ``(autocorr_bound, observable_bound)``: the autocorrelation error
    is at most ``delta`` and the error in ``<A>`` at most ``2 ||A|| delta``.
    """
    if delta < 0 or a_opnorm < 0:
        raise ValueError("delta and operator norm must be non-negative")
    return float(delta), float(2.0 * a_opnorm * delta)


def write_trajectory_csv(traj: Trajectory, path: str | Path, sidecar: str | Path | None = None):
    """Write ``t,norm,energy`` rows; optionally dump amplitudes as little-endian complex64."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "norm", "energy"])
        for t, n, e in zip(traj.times, traj.norms, traj.energies):
            w.writerow([f"{t:.17g}", f"{n:.17g}", f"{e:.17g}"])
    if sidecar is not None:
        data = np.stack([s.amplitudes.ravel() for s in traj.states]).astype("<c8")
        Path(sidecar).write_bytes(data.tobytes())


def read_sidecar(path: str | Path, n_points: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<c8")
    return raw.reshape(-1, n_points)

