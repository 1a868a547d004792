"""Dense-grid wavefunctions and Hamiltonians.

Everything else in the package is built on the three value types defined
here: :class:`Grid`, :class:`WaveState` and :class:`HamiltonianSpec`.
Inner products use uniform trapezoidal weights ``dx**d``; this is the single
place where quadrature is defined.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

DEFAULT_POINT_CAP = 2**20


class GridMismatchError(ValueError):
    """Two objects that must share a grid do not."""


class NormalizationError(ValueError):
    """An operation that requires a normalized state received another."""


class PreconditionWarning(UserWarning):
    """A soft precondition (e.g. edge decay on a boxed grid) is violated."""


@dataclass(frozen=True)
class Axis:
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError(f"n_points must be >= 8, got {self.n_points}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_points

    @property
    def points(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.dx)


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid.

    Points along each axis are ``x_min + j*dx`` with ``dx = (x_max - x_min)/n``
    so the right end point is excluded (periodic convention). ``boundary``
    only matters for the finite-difference stencil and for the edge-decay
    check applied to boxed states.
    """

    axes: tuple[Axis, ...]
    boundary: str = "periodic"
    point_cap: int = DEFAULT_POINT_CAP

    def __post_init__(self):
        if self.boundary not in ("periodic", "boxed"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if not self.axes:
            raise ValueError("grid needs at least one axis")
        if self.size > self.point_cap:
            raise ValueError(
                f"grid has {self.size} points, above the cap of {self.point_cap}")

    @classmethod
    def uniform(cls, x_min, x_max, n_points, boundary="periodic", **kw) -> "Grid":
        return cls((Axis(float(x_min), float(x_max), int(n_points)),), boundary, **kw)

    @classmethod
    def product(cls, grids: Sequence["Grid"], boundary=None) -> "Grid":
        axes = tuple(a for g in grids for a in g.axes)
        return cls(axes, boundary or grids[0].boundary)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.n_points for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple(a.dx for a in self.axes)

    @property
    def volume_element(self) -> float:
        return float(np.prod(self.dx))

    def points(self, axis: int = 0) -> np.ndarray:
        return self.axes[axis].points

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*(a.points for a in self.axes), indexing="ij")

    def factor(self, axis: int) -> "Grid":
        return Grid((self.axes[axis],), self.boundary, self.point_cap)


@dataclass(frozen=True, eq=False)
class WaveState:
    """Complex amplitudes on a grid.

    ``amplitudes`` has shape ``grid.shape`` or ``grid.shape + (n_el,)`` for
    states carrying an electronic (diabatic) index.
    """

    grid: Grid
    amplitudes: np.ndarray
    hbar: float = 1.0

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex)
        if amp.shape[: self.grid.ndim] != self.grid.shape or amp.ndim > self.grid.ndim + 1:
            raise GridMismatchError(
                f"amplitude shape {amp.shape} incompatible with grid {self.grid.shape}")
        if not np.all(np.isfinite(amp)):
            raise ValueError("non-finite amplitudes")
        if self.hbar <= 0:
            raise ValueError("hbar must be positive")
        object.__setattr__(self, "amplitudes", amp)

    @property
    def n_el(self) -> int | None:
        return self.amplitudes.shape[-1] if self.amplitudes.ndim > self.grid.ndim else None

    def norm(self) -> float:
        return float(np.sqrt(inner(self, self).real))

    def normalized(self) -> "WaveState":
        return self.with_amplitudes(self.amplitudes / self.norm())

    def with_amplitudes(self, amp) -> "WaveState":
        return WaveState(self.grid, amp, self.hbar)

    def _other(self, other):
        if isinstance(other, WaveState):
            if other.grid != self.grid:
                raise GridMismatchError("states live on different grids")
            return other.amplitudes
        return NotImplemented

    def __add__(self, other):
        amp = self._other(other)
        return NotImplemented if amp is NotImplemented else self.with_amplitudes(self.amplitudes + amp)

    def __sub__(self, other):
        amp = self._other(other)
        return NotImplemented if amp is NotImplemented else self.with_amplitudes(self.amplitudes - amp)

    def __mul__(self, c):
        if isinstance(c, WaveState):
            return NotImplemented
        return self.with_amplitudes(self.amplitudes * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self.with_amplitudes(self.amplitudes / c)

    def __neg__(self):
        return self.with_amplitudes(-self.amplitudes)


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    """``H = sum_k p_k^2/2m_k + V``.

    ``potential`` is either real with shape ``grid.shape`` or a Hermitian
    matrix field with shape ``grid.shape + (n_el, n_el)`` (diabatic variant).
    """

    grid: Grid
    masses: tuple[float, ...]
    potential: np.ndarray
    kinetic: str = "spectral"
    hbar: float = 1.0

    def __post_init__(self):
        masses = tuple(float(m) for m in np.atleast_1d(self.masses))
        if len(masses) == 1 and self.grid.ndim > 1:
            masses = masses * self.grid.ndim
        if len(masses) != self.grid.ndim or min(masses) <= 0:
            raise ValueError("need one positive mass per grid dimension")
        object.__setattr__(self, "masses", masses)
        if self.kinetic not in ("spectral", "fd4"):
            raise ValueError(f"unknown kinetic discretization {self.kinetic!r}")
        pot = np.asarray(self.potential)
        if pot.shape == self.grid.shape:
            if np.iscomplexobj(pot):
                if np.max(np.abs(pot.imag)) > 0:
                    raise ValueError("scalar potential must be real")
                pot = pot.real
            pot = pot.astype(float)
        elif pot.ndim == self.grid.ndim + 2 and pot.shape[: self.grid.ndim] == self.grid.shape:
            nel = pot.shape[-1]
            if pot.shape[-2] != nel:
                raise ValueError("diabatic matrices must be square")
            herm = np.max(np.abs(pot - np.conj(np.swapaxes(pot, -1, -2))))
            if herm > 1e-12 * max(1.0, np.max(np.abs(pot))):
                raise ValueError(f"diabatic matrix not Hermitian (residual {herm:.3g})")
            pot = pot.astype(complex) if np.iscomplexobj(pot) else pot.astype(float)
        else:
            raise GridMismatchError(
                f"potential shape {pot.shape} incompatible with grid {self.grid.shape}")
        object.__setattr__(self, "potential", pot)

    @property
    def n_el(self) -> int | None:
        return self.potential.shape[-1] if self.potential.ndim > self.grid.ndim else None

    def shifted(self, energy: float) -> "HamiltonianSpec":
        """Return ``H - energy``."""
        if self.n_el is None:
            pot = self.potential - energy
        else:
            pot = self.potential - energy * np.eye(self.n_el)
        return HamiltonianSpec(self.grid, self.masses, pot, self.kinetic, self.hbar)

    @cached_property
    def _kinetic_factors(self):
        return [
            0.5 * self.hbar**2 * ax.wavenumbers**2 / m
            for ax, m in zip(self.grid.axes, self.masses)
        ]


def _check_same_grid(a: WaveState, b: WaveState):
    if a.grid != b.grid:
        raise GridMismatchError("states live on different grids")
    if a.amplitudes.shape != b.amplitudes.shape:
        raise GridMismatchError(
            f"amplitude shapes differ: {a.amplitudes.shape} vs {b.amplitudes.shape}")


def inner(psi: WaveState, phi: WaveState) -> complex:
    """``<psi|phi>`` with trapezoidal weights (conjugate-linear in ``psi``)."""
    _check_same_grid(psi, phi)
    return complex(np.vdot(psi.amplitudes, phi.amplitudes) * psi.grid.volume_element)


def norm(psi: WaveState) -> float:
    return psi.norm()


def kinetic_1d(f: np.ndarray, axis: Axis, mass: float, hbar: float,
               kind: str = "spectral", boundary: str = "periodic", along: int = 0) -> np.ndarray:
    """Apply ``-hbar^2/2m d^2/dx^2`` along one array axis."""
    if kind == "spectral":
        k2 = 0.5 * hbar**2 * axis.wavenumbers**2 / mass
        shape = [1] * f.ndim
        shape[along] = -1
        return np.fft.ifft(np.fft.fft(f, axis=along) * k2.reshape(shape), axis=along)
    # fourth-order central stencil
    c = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * axis.dx**2)
    if boundary == "periodic":
        d2 = sum(ck * np.roll(f, -s, axis=along) for ck, s in zip(c, (-2, -1, 0, 1, 2)))
    else:
        pad = [(0, 0)] * f.ndim
        pad[along] = (2, 2)
        g = np.pad(f, pad)
        n = f.shape[along]
        d2 = sum(ck * np.take(g, np.arange(2 + s, 2 + s + n), axis=along)
                 for ck, s in zip(c, (-2, -1, 0, 1, 2)))
    return -0.5 * hbar**2 / mass * d2


def derivative_1d(f: np.ndarray, axis: Axis, along: int = 0, order: int = 1) -> np.ndarray:
    """Spectral derivative of ``f`` along one array axis."""
    k = axis.wavenumbers
    if order % 2 and axis.n_points % 2 == 0:
        # the Nyquist mode has no consistent odd derivative
        k = k.copy()
        k[axis.n_points // 2] = 0.0
    shape = [1] * f.ndim
    shape[along] = -1
    return np.fft.ifft(np.fft.fft(f, axis=along) * ((1j * k) ** order).reshape(shape), axis=along)


def _edge_check(H: HamiltonianSpec, psi: WaveState):
    if H.grid.boundary != "boxed":
        return
    amp = np.abs(psi.amplitudes)
    peak = amp.max()
    for ax in range(H.grid.ndim):
        edge = max(np.take(amp, 0, axis=ax).max(), np.take(amp, -1, axis=ax).max())
        if edge > 1e-8 * peak:
            warnings.warn(
                f"boxed state not decayed at the edge of axis {ax} "
                f"(edge/max = {edge / peak:.2e})", PreconditionWarning, stacklevel=3)
            return


def apply_kinetic(H: HamiltonianSpec, psi: WaveState) -> np.ndarray:
    out = np.zeros_like(psi.amplitudes)
    for ax, (axis, m) in enumerate(zip(H.grid.axes, H.masses)):
        out += kinetic_1d(psi.amplitudes, axis, m, H.hbar, H.kinetic, H.grid.boundary, along=ax)
    return out


def apply_h(H: HamiltonianSpec, psi: WaveState) -> WaveState:
    """Return ``H|psi>``."""
    if psi.grid != H.grid:
        raise GridMismatchError("Hamiltonian and state live on different grids")
    if psi.n_el != H.n_el:
        raise GridMismatchError(
            f"state has n_el={psi.n_el} but Hamiltonian has n_el={H.n_el}")
    _edge_check(H, psi)
    out = apply_kinetic(H, psi)
    if H.n_el is None:
        out += H.potential * psi.amplitudes
    else:
        out += np.einsum("...ab,...b->...a", H.potential, psi.amplitudes)
    return psi.with_amplitudes(out)


def require_normalized(psi: WaveState, tol: float = 1e-9):
    nrm = psi.norm()
    if abs(nrm - 1.0) > tol:
        raise NormalizationError(f"state must be normalized (norm = {nrm!r})")


def energy_moments(H: HamiltonianSpec, psi: WaveState, hpsi: WaveState | None = None):
    """Mean energy and energy variance ``||(H - E)psi||^2`` of a normalized state."""
    require_normalized(psi)
    if hpsi is None:
        hpsi = apply_h(H, psi)
    e_bar = inner(psi, hpsi).real
    resid = hpsi - e_bar * psi
    return e_bar, max(inner(resid, resid).real, 0.0)


def kinetic_matrix_1d(axis: Axis, mass: float, hbar: float = 1.0,
                      kind: str = "spectral", boundary: str = "periodic") -> np.ndarray:
    """Dense kinetic-energy matrix along one axis (real symmetric)."""
    n = axis.n_points
    if kind == "spectral":
        k2 = 0.5 * hbar**2 * axis.wavenumbers**2 / mass
        col = np.fft.ifft(k2).real
        return scipy.linalg.circulant(col)
    c = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * axis.dx**2)
    T = np.zeros((n, n))
    for ck, s in zip(c, (-2, -1, 0, 1, 2)):
        if boundary == "periodic":
            T += ck * np.roll(np.eye(n), s, axis=1)
        else:
            T += ck * np.eye(n, k=s)
    return -0.5 * hbar**2 / mass * T


def derivative_matrix_1d(axis: Axis) -> np.ndarray:
    """Dense spectral first-derivative matrix (real antisymmetric)."""
    n = axis.n_points
    k = axis.wavenumbers.copy()
    if n % 2 == 0:
        k[n // 2] = 0.0
    col = np.fft.ifft(1j * k).real
    return scipy.linalg.circulant(col)


def dense_matrix(H: HamiltonianSpec) -> np.ndarray:
    """Dense matrix of ``H`` in the grid basis (C-order, electronic index last)."""
    g = H.grid
    mats = [kinetic_matrix_1d(a, m, H.hbar, H.kinetic, g.boundary)
            for a, m in zip(g.axes, H.masses)]
    nel = H.n_el or 1
    N = g.size
    Hm = np.zeros((N * nel, N * nel), dtype=complex if np.iscomplexobj(H.potential) else float)
    for ax, T in enumerate(mats):
        left = np.eye(int(np.prod(g.shape[:ax]))) if ax else np.eye(1)
        right = np.eye(int(np.prod(g.shape[ax + 1:])) * nel)
        Hm += np.kron(np.kron(left, T), right)
    if H.n_el is None:
        Hm[np.diag_indices(N)] += H.potential.ravel()
    else:
        pot = H.potential.reshape(N, nel, nel)
        for j in range(N):
            Hm[j * nel:(j + 1) * nel, j * nel:(j + 1) * nel] += pot[j]
    return 0.5 * (Hm + Hm.conj().T)


def load_potential_csv(path: str | Path, masses, kinetic="spectral", hbar=1.0,
                       boundary="periodic") -> HamiltonianSpec:
    """Read a tabulated potential.

    Columns ``x[,y]`` followed by ``V`` (scalar) or ``V11,V12,V22`` (two-state
    diabatic, real symmetric). Coordinates must be uniformly spaced; for 2D
    tables rows are ordered with ``y`` varying fastest.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty potential table")
    cols = rows[0].keys()
    coords = [c for c in ("x", "y") if c in cols]
    if not coords:
        raise ValueError(f"{path}: missing coordinate column 'x'")
    data = {c: np.array([float(r[c]) for r in rows]) for c in cols}

    axes = []
    for c in coords:
        u = np.unique(data[c])
        d = np.diff(u)
        if len(u) < 8 or np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, abs(d[0])):
            raise ValueError(f"{path}: column {c!r} is not a uniform grid of >= 8 points")
        axes.append(Axis(float(u[0]), float(u[0] + d[0] * len(u)), len(u)))
    grid = Grid(tuple(axes), boundary)

    if "V" in cols:
        pot = data["V"].reshape(grid.shape)
    elif {"V11", "V12", "V22"} <= set(cols):
        v11, v12, v22 = (data[k].reshape(grid.shape) for k in ("V11", "V12", "V22"))
        pot = np.stack([np.stack([v11, v12], -1), np.stack([v12, v22], -1)], -2)
    else:
        raise ValueError(f"{path}: need a 'V' column or 'V11,V12,V22' columns")
    return HamiltonianSpec(grid, masses, pot, kinetic, hbar)
