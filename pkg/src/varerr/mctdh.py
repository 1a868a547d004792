"""Two-mode MCTDH ansatz with a numerically exact tangent-space solve and spf spawning.

``Psi(x1, x2) = sum_ij C_ij phi1_i(x1) phi2_j(x2) = U1 C U2^T`` with the
columns of ``U1``/``U2`` orthonormal under the grid quadrature. The
variational derivative is the least-squares minimizer of
``||i hbar Psidot - H Psi||`` over the span of all real and imaginary
parameter derivatives, assembled explicitly on the joint grid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .diagnostics import ErrorReport, local_error
from .exact import NumericalFailure
from .grid import Grid, HamiltonianSpec, WaveState, apply_h

logger = logging.getLogger(__name__)

SVD_RCOND = 1e-10
#: gamma below this fraction of hbar^2 eps^2 counts as "no useful spawn"
GAMMA_RTOL = 1e-10
PROPAGATION_DAMPING = 1e-4
#: adaptive quadrature of the bound between samples (relative tolerance, max bisections)
BOUND_QUAD_RTOL = 1e-4
BOUND_QUAD_DEPTH = 8


def orthonormalize(U: np.ndarray, dx: float) -> np.ndarray:
    """Columns orthonormal under ``<f|g> = dx * f^H g`` (QR)."""
    Q, R = np.linalg.qr(np.sqrt(dx) * np.asarray(U, dtype=complex))
    Q = Q * np.sign(np.diag(R).real + (np.diag(R).real == 0))
    return Q / np.sqrt(dx)


@dataclass(frozen=True, eq=False)
class MCTDHState:
    grids: tuple[Grid, Grid]
    U1: np.ndarray
    U2: np.ndarray
    C: np.ndarray
    hbar: float = 1.0

    def __post_init__(self):
        U1 = np.asarray(self.U1, dtype=complex)
        U2 = np.asarray(self.U2, dtype=complex)
        C = np.asarray(self.C, dtype=complex)
        for g in self.grids:
            if g.ndim != 1:
                raise ValueError("mode grids must be 1D")
        if U1.shape[0] != self.grids[0].size or U2.shape[0] != self.grids[1].size:
            raise ValueError("spf tables do not match the mode grids")
        if C.shape != (U1.shape[1], U2.shape[1]):
            raise ValueError(f"coefficient shape {C.shape} does not match spf counts")
        for k, (U, g) in enumerate(((U1, self.grids[0]), (U2, self.grids[1]))):
            S = U.conj().T @ U * g.dx[0]
            if np.max(np.abs(S - np.eye(U.shape[1]))) > 1e-10:
                raise ValueError(f"mode {k} spfs are not orthonormal")
        if abs(np.linalg.norm(C) - 1.0) > 1e-9:
            raise ValueError(f"coefficients must have unit norm (got {np.linalg.norm(C):.12g})")
        object.__setattr__(self, "U1", U1)
        object.__setattr__(self, "U2", U2)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> tuple[int, int]:
        return self.C.shape

    @property
    def joint(self) -> Grid:
        return Grid.product(list(self.grids))

    def amplitudes(self) -> np.ndarray:
        return self.U1 @ self.C @ self.U2.T

    def to_grid(self, joint: Grid | None = None) -> WaveState:
        return WaveState(joint or self.joint, self.amplitudes(), self.hbar)

    def spfs(self, k: int) -> np.ndarray:
        return self.U1 if k == 0 else self.U2


def _unchecked(grids, U1, U2, C, hbar) -> MCTDHState:
    s = object.__new__(MCTDHState)
    for name, val in (("grids", grids), ("U1", U1), ("U2", U2), ("C", C), ("hbar", hbar)):
        object.__setattr__(s, name, val)
    return s


def from_functions(grids: Sequence[Grid], f1: Sequence[np.ndarray], f2: Sequence[np.ndarray],
                   C: np.ndarray, hbar: float = 1.0) -> MCTDHState:
    """Orthonormalize the given spf tables and normalize ``C``."""
    U1 = orthonormalize(np.stack(f1, axis=1), grids[0].dx[0])
    U2 = orthonormalize(np.stack(f2, axis=1), grids[1].dx[0])
    C = np.asarray(C, dtype=complex)
    return MCTDHState(tuple(grids), U1, U2, C / np.linalg.norm(C), hbar)


# -- tangent space ------------------------------------------------------------

def tangent_basis(s: MCTDHState) -> tuple[np.ndarray, dict[str, slice]]:
    """Complex parameter derivatives of ``Psi`` as columns (joint grid, C-order).

    Each column ``v`` stands for two real directions, ``v`` (real part of the
    parameter) and ``i v`` (imaginary part).
    """
    N1, N2 = s.grids[0].size, s.grids[1].size
    n1, n2 = s.n
    cols = []
    for i in range(n1):
        for j in range(n2):
            cols.append(np.outer(s.U1[:, i], s.U2[:, j]).ravel())
    chi2 = s.U2 @ s.C.T          # chi2[:, i] = sum_j C_ij phi2_j
    for x in range(N1):
        for i in range(n1):
            v = np.zeros((N1, N2), dtype=complex)
            v[x] = chi2[:, i]
            cols.append(v.ravel())
    chi1 = s.U1 @ s.C            # chi1[:, j] = sum_i C_ij phi1_i
    for y in range(N2):
        for j in range(n2):
            v = np.zeros((N1, N2), dtype=complex)
            v[:, y] = chi1[:, j]
            cols.append(v.ravel())
    nc, nu1 = n1 * n2, N1 * n1
    sl = {"C": slice(0, nc), "U1": slice(nc, nc + nu1), "U2": slice(nc + nu1, nc + nu1 + N2 * n2)}
    return np.stack(cols, axis=1), sl


@dataclass(frozen=True, eq=False)
class TangentSolution:
    psidot: WaveState
    eps: float
    report: ErrorReport | None
    Cdot: np.ndarray
    U1dot: np.ndarray
    U2dot: np.ndarray
    rank: int
    n_real_params: int
    condition: float
    residual: WaveState
    hpsi: WaveState


def _real_lsq(A: np.ndarray, b: np.ndarray, rcond: float, damping: float = 0.0):
    """Minimize ``||A_r x - b_r||`` over real ``x`` for real/imag split columns ``[v, i v]``.

    Singular values below ``rcond * s_max`` are dropped; ``damping > 0``
    additionally applies the Tikhonov filter ``s / (s^2 + (damping s_max)^2)``.
    """
    Ar = np.block([[A.real, -A.imag], [A.imag, A.real]])
    br = np.concatenate([b.real, b.imag])
    U, sv, Vh = np.linalg.svd(Ar, full_matrices=False)
    keep = sv > rcond * sv[0] if sv.size and sv[0] > 0 else np.zeros(sv.size, bool)
    s = sv[keep]
    inv = s / (s**2 + (damping * sv[0]) ** 2) if damping > 0 else 1.0 / s
    x = Vh[keep].T @ ((U[:, keep].T @ br) * inv)
    m = A.shape[1]
    cond = float(sv[0] / sv[keep][-1]) if keep.any() else math.inf
    return x[:m] + 1j * x[m:], int(keep.sum()), cond, Ar.shape[1]


def tangent_lsq(H: HamiltonianSpec, s: MCTDHState, extra: Sequence[np.ndarray] = (),
                rcond: float = SVD_RCOND, diagnose: bool = True,
                damping: float = 0.0) -> TangentSolution:
    """McLachlan derivative on the (optionally enlarged) tangent space.

    ``extra`` are additional joint-grid directions (complex-linear) appended
    to the parameter derivatives. The truncated-SVD minimum-norm solution
    absorbs the gauge redundancy of the parametrization. With ``diagnose``
    the general error report (variance form, stationarity flag) is attached;
    it requires a normalized state. The returned spf
    derivatives are moved to the gauge ``<phi_i|phidot_j> = 0`` with the
    difference absorbed in ``Cdot``; ``psidot`` is unchanged by this.
    """
    if H.grid.ndim != 2 or H.n_el is not None:
        raise ValueError("MCTDH Hamiltonian must be scalar on a 2D grid")
    hbar = H.hbar
    psi = s.to_grid(H.grid)
    hpsi = apply_h(H, psi)
    A, sl = tangent_basis(s)
    if len(extra):
        A = np.concatenate([A] + [np.asarray(e).reshape(-1, 1) for e in extra], axis=1)
    w = math.sqrt(H.grid.volume_element)
    # i hbar A c = H psi  <=>  A c = H psi / (i hbar)
    c, rank, cond, npar = _real_lsq(w * A, w * hpsi.amplitudes.ravel() / (1j * hbar), rcond,
                                    damping)
    pd = (A @ c).reshape(psi.amplitudes.shape)
    psidot = psi.with_amplitudes(pd)
    resid = hpsi - (1j * hbar) * psidot
    report = local_error(H, psi, psidot, hpsi=hpsi) if diagnose else None

    N1, N2 = s.grids[0].size, s.grids[1].size
    n1, n2 = s.n
    Cdot = c[sl["C"]].reshape(n1, n2).copy()
    U1dot = c[sl["U1"]].reshape(N1, n1)
    U2dot = c[sl["U2"]].reshape(N2, n2)
    A1 = s.U1.conj().T @ U1dot * s.grids[0].dx[0]
    A2 = s.U2.conj().T @ U2dot * s.grids[1].dx[0]
    U1dot = U1dot - s.U1 @ A1
    U2dot = U2dot - s.U2 @ A2
    Cdot = Cdot + A1 @ s.C + s.C @ A2.T
    return TangentSolution(psidot, resid.norm() / hbar, report, Cdot, U1dot, U2dot, rank,
                           npar, cond, resid, hpsi)


# -- spawning -----------------------------------------------------------------

def _single_hole_projections(s: MCTDHState, hpsi: np.ndarray, k: int) -> np.ndarray:
    """``g[:, J] = <Phi_J^(k)|H Psi>`` as functions of mode ``k``."""
    if k == 0:
        return hpsi @ s.U2.conj() * s.grids[1].dx[0]
    return hpsi.T @ s.U1.conj() * s.grids[0].dx[0]


def gamma_operator(H: HamiltonianSpec, s: MCTDHState, k: int, hpsi: WaveState | None = None) -> np.ndarray:
    """Dense matrix of the mode-``k`` rate operator.

    Acting on grid values ``f`` it returns ``sum_J g_J <g_J|f>``; its
    eigenvalues are ``<eta|Gamma|eta>`` for normalized eigenfunctions.
    """
    if hpsi is None:
        hpsi = apply_h(H, s.to_grid(H.grid))
    g = _single_hole_projections(s, hpsi.amplitudes, k)
    return s.grids[k].dx[0] * (g @ g.conj().T)


def residual_space(s: MCTDHState, k: int, spf_dot: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (grid values, dx-weighted) of the complement of occupied spfs and their derivatives."""
    dx = s.grids[k].dx[0]
    B = np.concatenate([s.spfs(k), spf_dot], axis=1) * math.sqrt(dx)
    U, sv, _ = np.linalg.svd(B, full_matrices=True)
    r = int(np.sum(sv > tol * max(sv.max(), 1.0)))
    return U[:, r:] / math.sqrt(dx)


@dataclass(frozen=True, eq=False)
class ModeSpawn:
    eta: np.ndarray | None
    gamma: float
    residual_dim: int
    residual_basis: np.ndarray
    gamma_matrix: np.ndarray
    spawnable: bool = False

    def gamma_of(self, f: np.ndarray, dx: float) -> float:
        """``<f|Gamma|f>`` for a normalized grid function ``f``."""
        return float(np.vdot(f, self.gamma_matrix @ f).real * dx)


@dataclass(frozen=True, eq=False)
class SpawnResult:
    modes: tuple[ModeSpawn, ModeSpawn]
    eps_before: float
    eps_after_predicted: float
    eps_after_restricted: float
    eps_after_measured: float
    hbar: float = 1.0

    @property
    def gammas(self) -> tuple[float, float]:
        return tuple(m.gamma for m in self.modes)

    @property
    def identity_defect(self) -> float:
        """``|hbar^2 eps'^2 - (hbar^2 eps^2 - sum gamma)|`` for the restricted enlargement."""
        h2 = self.hbar**2
        return abs(h2 * self.eps_after_restricted**2 - (h2 * self.eps_before**2 - sum(self.gammas)))


def _mode_spawn(H, s, k, sol) -> ModeSpawn:
    G = gamma_operator(H, s, k, sol.hpsi)
    dot = sol.U1dot if k == 0 else sol.U2dot
    Q = residual_space(s, k, dot)
    dx = s.grids[k].dx[0]
    if Q.shape[1] == 0:
        return ModeSpawn(None, 0.0, 0, Q, G)
    Gr = Q.conj().T @ G @ Q * dx
    ev, vec = np.linalg.eigh(0.5 * (Gr + Gr.conj().T))
    eta = Q @ vec[:, -1]
    gamma = float(np.vdot(eta, G @ eta).real * dx)
    if abs(gamma - ev[-1]) > 1e-9 * max(1.0, abs(ev[-1])):
        raise NumericalFailure("Rayleigh quotient of the spawned spf disagrees with its eigenvalue")
    return ModeSpawn(eta, max(gamma, 0.0), Q.shape[1], Q, G)


def enlarge(s: MCTDHState, k: int, eta: np.ndarray) -> MCTDHState:
    """Append ``eta`` (orthogonalized) to mode ``k`` with zero coefficients."""
    dx = s.grids[k].dx[0]
    U = s.spfs(k)
    f = eta - U @ (U.conj().T @ eta * dx)
    f = f / math.sqrt(np.vdot(f, f).real * dx)
    if k == 0:
        return MCTDHState(s.grids, np.column_stack([s.U1, f]), s.U2,
                          np.vstack([s.C, np.zeros((1, s.n[1]))]), s.hbar)
    return MCTDHState(s.grids, s.U1, np.column_stack([s.U2, f]),
                      np.hstack([s.C, np.zeros((s.n[0], 1))]), s.hbar)


def single_excitations(s: MCTDHState, k: int, eta: np.ndarray) -> list[np.ndarray]:
    """Joint-grid configurations with ``eta`` in mode ``k`` and an occupied spf in the other."""
    if k == 0:
        return [np.outer(eta, s.U2[:, j]).ravel() for j in range(s.n[1])]
    return [np.outer(s.U1[:, i], eta).ravel() for i in range(s.n[0])]


def spawn_select(H: HamiltonianSpec, s: MCTDHState, sol: TangentSolution | None = None) -> SpawnResult:
    """Best new spf per mode and the resulting error reductions.

    ``eps_after_predicted`` follows from the gamma values,
    ``eps_after_restricted`` re-solves with the new single-excitation
    coefficient directions added, and ``eps_after_measured`` re-solves on the
    fully enlarged ansatz (new spfs variational, all coefficients).
    """
    if sol is None:
        sol = tangent_lsq(H, s)
    hbar = H.hbar
    floor = GAMMA_RTOL * (hbar * sol.eps) ** 2
    modes = tuple(replace(m, spawnable=m.eta is not None and m.gamma > floor)
                  for m in (_mode_spawn(H, s, k, sol) for k in (0, 1)))
    gsum = sum(m.gamma for m in modes)
    pred2 = sol.eps**2 - gsum / hbar**2
    pred = math.sqrt(max(pred2, 0.0))

    extra = []
    for k, m in enumerate(modes):
        if m.spawnable:
            extra += single_excitations(s, k, m.eta)
    restricted = tangent_lsq(H, s, extra).eps if extra else sol.eps

    big = s
    for k, m in enumerate(modes):
        if m.spawnable:
            big = enlarge(big, k, m.eta)
    measured = tangent_lsq(H, big).eps if big is not s else sol.eps
    return SpawnResult(modes, sol.eps, pred, restricted, measured, hbar)


class SpawnTrigger:
    """Fire once ``eps`` has exceeded ``threshold`` for ``consecutive`` samples in a row."""

    def __init__(self, threshold: float, consecutive: int = 3):
        self.threshold, self.consecutive = float(threshold), int(consecutive)
        self.count = 0

    def update(self, eps: float) -> bool:
        self.count = self.count + 1 if eps > self.threshold else 0
        if self.count >= self.consecutive:
            self.count = 0
            return True
        return False


# -- continuation runs --------------------------------------------------------

@dataclass
class SpawnEvent:
    t: float
    mode: int
    gamma: float
    eps_before: float
    eps_after_predicted: float
    eps_after_measured: float


@dataclass(frozen=True, eq=False)
class MCTDHRun:
    times: np.ndarray
    states: tuple[MCTDHState, ...]
    reports: tuple[ErrorReport, ...]
    events: tuple[SpawnEvent, ...]
    eps_integrated: np.ndarray
    eps_after: np.ndarray
    spawn_results: tuple[SpawnResult, ...] = field(default=())
    #: quadrature nodes of the bound: times, eps from the left, eps to the right
    nodes: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def _pack(s: MCTDHState) -> np.ndarray:
    return np.concatenate([s.C.ravel(), s.U1.ravel(), s.U2.ravel()])


def _unpack(y, grids, n, hbar) -> MCTDHState:
    n1, n2 = n
    N1, N2 = grids[0].size, grids[1].size
    C = y[: n1 * n2].reshape(n1, n2)
    U1 = y[n1 * n2: n1 * n2 + N1 * n1].reshape(N1, n1)
    U2 = y[n1 * n2 + N1 * n1:].reshape(N2, n2)
    return _unchecked(tuple(grids), U1, U2, C, hbar)


def propagate_mctdh(H: HamiltonianSpec, s0: MCTDHState, t_final: float, n_samples: int = 50,
                    threshold: float | None = None, max_spfs: int = 4, rtol: float = 1e-9,
                    atol: float = 1e-11, damping: float = PROPAGATION_DAMPING) -> MCTDHRun:
    """Short continuation run with optional eps-triggered spawning.

    Between samples the parameters follow the tangent-space derivative; at
    each sample the diagnostics are recorded and, when the trigger fires,
    the best spf of each mode (when spawnable, below ``max_spfs``) is added
    with zero coefficients. The bound integral between samples is refined
    adaptively on the integrator's dense output, since eps can drop within a
    fraction of a sample interval once a spawned spf becomes occupied. Freshly spawned spfs are unoccupied, which makes
    their velocities ill-conditioned; the integrator therefore uses a
    Tikhonov-filtered solve (``damping``). The recorded reports describe the
    undamped minimizer, while ``eps_integrated`` is the residual of the
    derivative actually integrated; the accumulated bound uses the latter,
    since the a-posteriori bound holds for any trajectory with its own
    residual.
    """
    times = np.linspace(0.0, t_final, n_samples)
    trigger = SpawnTrigger(threshold) if threshold is not None else None
    s = s0
    states, reports, events, results, eps_int, eps_after = [], [], [], [], [], []
    nt, nb, na = [], [], []
    for k, t in enumerate(times):
        if k:
            grids, n, hbar = s.grids, s.n, s.hbar

            def rhs(_, y):
                st = _unpack(y, grids, n, hbar)
                sol = tangent_lsq(H, st, diagnose=False, damping=damping)
                return np.concatenate([sol.Cdot.ravel(), sol.U1dot.ravel(), sol.U2dot.ravel()])

            out = solve_ivp(rhs, (times[k - 1], t), _pack(s), method="DOP853", rtol=rtol, atol=atol,
                            dense_output=True)
            if not out.success:
                raise NumericalFailure(f"MCTDH integration failed: {out.message}")
            st = _unpack(out.y[:, -1], grids, n, hbar)
            # re-orthonormalize against integrator drift; Psi is unchanged up to drift
            U1 = orthonormalize(st.U1, grids[0].dx[0])
            U2 = orthonormalize(st.U2, grids[1].dx[0])
            Cn = (U1.conj().T @ st.U1 * grids[0].dx[0]) @ st.C @ (U2.conj().T @ st.U2 * grids[1].dx[0]).T
            s = MCTDHState(grids, U1, U2, Cn / np.linalg.norm(Cn), hbar)
            e_end = _integrated_eps(H, s, None, damping)

            def eps_at(tau, out=out, grids=grids, n=n, hbar=hbar):
                return tangent_lsq(H, _unpack(out.sol(tau), grids, n, hbar), diagnose=False,
                                   damping=damping).eps

            for tau, e in _refine(eps_at, times[k - 1], t, na[-1], e_end, BOUND_QUAD_DEPTH):
                nt.append(tau), nb.append(e), na.append(e)
        sol = tangent_lsq(H, s)
        reports.append(replace(sol.report, t=float(t)))
        eps_int.append(_integrated_eps(H, s, sol, damping))
        states.append(s)
        if trigger is not None and trigger.update(sol.eps):
            res = spawn_select(H, s, sol)
            results.append(res)
            for mode, m in enumerate(res.modes):
                if m.spawnable and s.n[mode] < max_spfs:
                    s = enlarge(s, mode, m.eta)
                    events.append(SpawnEvent(float(t), mode, m.gamma, res.eps_before,
                                             res.eps_after_predicted, res.eps_after_measured))
                    logger.info("spawned spf in mode %d at t=%.4g (gamma %.3e)", mode, t, m.gamma)
        # the next interval starts from the (possibly enlarged) state
        eps_after.append(_integrated_eps(H, s, None, damping) if s is not states[-1] else eps_int[-1])
        nt.append(float(t)), nb.append(eps_int[-1]), na.append(eps_after[-1])
    nodes = (np.array(nt), np.array(nb), np.array(na))
    cum = piecewise_bound(*nodes)
    at_samples = cum[np.searchsorted(nodes[0], times)]
    reports = [replace(r, bound_accum=float(b)) for r, b in zip(reports, at_samples)]
    return MCTDHRun(times, tuple(states), tuple(reports), tuple(events), np.array(eps_int),
                    np.array(eps_after), tuple(results), nodes)


def _refine(f, a, b, fa, fb, depth):
    """Interior nodes of an adaptive trapezoid rule for ``int_a^b f``."""
    m = 0.5 * (a + b)
    fm = f(m)
    coarse = 0.5 * (b - a) * (fa + fb)
    fine = 0.25 * (b - a) * (fa + 2 * fm + fb)
    if depth <= 0 or abs(coarse - fine) <= BOUND_QUAD_RTOL * abs(fine) + 1e-14 * (b - a):
        return [(m, fm)]
    return _refine(f, a, m, fa, fm, depth - 1) + [(m, fm)] + _refine(f, m, b, fm, fb, depth - 1)


def _integrated_eps(H, s, sol, damping) -> float:
    if damping > 0:
        return tangent_lsq(H, s, diagnose=False, damping=damping).eps
    return (sol or tangent_lsq(H, s, diagnose=False)).eps


def piecewise_bound(times, eps_before, eps_after, stride: int = 1) -> np.ndarray:
    """Trapezoidal bound allowing eps to jump at samples (spawns).

    Interval ``[t_a, t_b]`` uses ``eps_after[a]`` and ``eps_before[b]``;
    ``stride`` > 1 keeps every ``stride``-th sample (plus the last) for the
    sampling self-check.
    """
    idx = list(range(0, len(times), stride))
    if idx[-1] != len(times) - 1:
        idx.append(len(times) - 1)
    out = [0.0]
    for a, b in zip(idx[:-1], idx[1:]):
        out.append(out[-1] + 0.5 * (times[b] - times[a]) * (eps_after[a] + eps_before[b]))
    return np.array(out)


SPAWN_LOG_COLUMNS = ["t", "mode", "gamma_k", "eps_before", "eps_after_predicted", "eps_after_measured"]


def write_spawn_log(events: Sequence[SpawnEvent], path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPAWN_LOG_COLUMNS)
        for e in events:
            w.writerow([f"{e.t:.17g}", str(e.mode), f"{e.gamma:.17g}", f"{e.eps_before:.17g}",
                        f"{e.eps_after_predicted:.17g}", f"{e.eps_after_measured:.17g}"])
