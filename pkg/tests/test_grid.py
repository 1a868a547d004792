import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gaussian, ho, ho_eigenstate, smooth_random
from varerr.grid import (Axis, Grid, GridMismatchError, HamiltonianSpec, NormalizationError,
                         PreconditionWarning, WaveState, apply_h, dense_matrix, energy_moments,
                         inner, load_potential_csv)
from varerr.diagnostics import StationaryState, relevant_split


def test_grid_points_exclude_right_end():
    g = Grid.uniform(-1.0, 1.0, 8)
    assert g.dx == (0.25,)
    assert np.allclose(g.points(0), -1.0 + 0.25 * np.arange(8))


def test_grid_invariants():
    with pytest.raises(ValueError):
        Axis(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        Axis(1.0, 0.0, 16)
    with pytest.raises(ValueError, match="above the cap"):
        Grid((Axis(0, 1, 64), Axis(0, 1, 64)), point_cap=1000)


def test_inner_orthogonality_of_oscillator_states(grid1d):
    for n, m in [(0, 1), (1, 3), (2, 5)]:
        assert abs(inner(ho_eigenstate(grid1d, n), ho_eigenstate(grid1d, m))) < 1e-10


def test_inner_normalized_gaussian(grid1d):
    psi = gaussian(grid1d, 0.7, -0.4, 0.8)
    assert abs(inner(psi, psi) - 1) < 1e-12


def test_inner_matches_coherent_state_overlap(grid1d):
    # <z1|z2> = exp(-|z1|^2/2 - |z2|^2/2 + z1* z2) for dq = 1/sqrt(2), hbar = m = 1
    from varerr.fga import CoherentState, coherent_to_grid

    z1, z2 = 0.3 + 0.8j, -0.5 + 0.2j
    a = coherent_to_grid(CoherentState(z1, 1 / math.sqrt(2), 1.0), grid1d)
    b = coherent_to_grid(CoherentState(z2, 1 / math.sqrt(2), 1.0), grid1d)
    exact = np.exp(-abs(z1) ** 2 / 2 - abs(z2) ** 2 / 2 + np.conj(z1) * z2)
    assert abs(inner(a, b) - exact) < 1e-8


def test_inner_grid_mismatch(grid1d):
    other = Grid.uniform(-10.0, 10.0, 128)
    with pytest.raises(GridMismatchError):
        inner(gaussian(grid1d), gaussian(other))


def test_apply_h_oscillator_ground_state(grid1d):
    for omega in (0.5, 1.0, 2.0):
        H = ho(grid1d, omega=omega)
        psi = ho_eigenstate(grid1d, 0, omega=omega)
        hpsi = apply_h(H, psi)
        assert (hpsi - 0.5 * omega * psi).norm() < 1e-8 * 0.5 * omega


def test_apply_h_plane_wave():
    g = Grid.uniform(0.0, 2 * math.pi, 64)
    H = HamiltonianSpec(g, (1.3,), np.zeros(64), hbar=0.7)
    k = 5.0
    psi = WaveState(g, np.exp(1j * k * g.points(0)), 0.7)
    expected = 0.7**2 * k**2 / (2 * 1.3)
    assert np.max(np.abs(apply_h(H, psi).amplitudes - expected * psi.amplitudes)) < 1e-10


def test_spectral_and_fd4_agree_on_smooth_state():
    # fd4 error ~ dx^4, so a fine grid is needed for 1e-8
    g = Grid.uniform(-15.0, 15.0, 2048)
    psi = gaussian(g, 0.5, 0.8, 1.2)
    hs = apply_h(ho(g, kinetic="spectral"), psi)
    hf = apply_h(ho(g, kinetic="fd4"), psi)
    assert (hs - hf).norm() < 1e-8 * hs.norm()


@given(st.integers(0, 2**31 - 1), st.sampled_from(["spectral", "fd4"]))
def test_hermiticity_on_random_states(seed, kind):
    g = Grid.uniform(-10.0, 10.0, 128)
    rng = np.random.default_rng(seed)
    H = HamiltonianSpec(g, (1.0,), 0.5 * g.points(0) ** 2 + 0.1 * g.points(0) ** 4 / 10, kind)
    phi, psi = smooth_random(g, rng), smooth_random(g, rng)
    hpsi = apply_h(H, psi)
    lhs = abs(inner(phi, hpsi) - inner(apply_h(H, phi), psi))
    assert lhs < 1e-9 * phi.norm() * hpsi.norm()


def test_hermiticity_2d(rng):
    g = Grid.product([Grid.uniform(-6, 6, 32), Grid.uniform(-6, 6, 32)])
    X, Y = g.mesh()
    H = HamiltonianSpec(g, (1.0, 2.0), 0.5 * X**2 + 0.5 * Y**2 + 0.3 * X * Y)
    phi, psi = smooth_random(g, rng), smooth_random(g, rng)
    hpsi = apply_h(H, psi)
    assert abs(inner(phi, hpsi) - inner(apply_h(H, phi), psi)) < 1e-9 * hpsi.norm()


def test_dense_matrix_matches_apply_h(rng):
    g = Grid.product([Grid.uniform(-5, 5, 16), Grid.uniform(-5, 5, 12)])
    X, Y = g.mesh()
    H = HamiltonianSpec(g, (1.0, 0.5), X**2 + 0.2 * X * Y**2)
    psi = smooth_random(g, rng)
    M = dense_matrix(H)
    assert np.allclose(M @ psi.amplitudes.ravel(), apply_h(H, psi).amplitudes.ravel(), atol=1e-10)


def test_energy_moments_eigenstate(grid1d):
    _, var = energy_moments(ho(grid1d), ho_eigenstate(grid1d, 3))
    assert var < 1e-9


def test_energy_moments_coherent_state(grid1d):
    from varerr.fga import CoherentState, coherent_to_grid

    omega = 1.7
    dq = math.sqrt(1 / (2 * omega))
    z = 0.9 - 0.4j
    psi = coherent_to_grid(CoherentState(z, dq, 1.0), grid1d)
    _, var = energy_moments(ho(grid1d, omega=omega), psi)
    assert abs(var - omega**2 * abs(z) ** 2) < 1e-6 * omega**2 * abs(z) ** 2


@given(st.floats(-5, 5), st.integers(0, 1000))
def test_energy_moments_shift_invariance(shift, seed):
    g = Grid.uniform(-10, 10, 128)
    H = ho(g)
    psi = smooth_random(g, np.random.default_rng(seed))
    e1, v1 = energy_moments(H, psi)
    e2, v2 = energy_moments(H.shifted(shift), psi)
    assert abs(v1 - v2) <= 1e-12 * max(1.0, v1)
    assert abs(e1 - shift - e2) < 1e-10 * max(1.0, abs(e1))


def test_energy_moments_requires_normalization(grid1d):
    with pytest.raises(NormalizationError):
        energy_moments(ho(grid1d), 2.0 * gaussian(grid1d))


def test_relevant_split_completeness(grid1d, rng):
    H = ho(grid1d)
    psi = smooth_random(grid1d, rng)
    perp, de = relevant_split(H, psi)
    e_bar, var = energy_moments(H, psi)
    assert abs(inner(psi, perp)) < 1e-10
    assert abs(perp.norm() - 1) < 1e-9
    recon = e_bar * psi + de * perp
    hpsi = apply_h(H, psi)
    assert (recon - hpsi).norm() < 1e-9 * hpsi.norm()


def test_relevant_split_eigenstate(grid1d):
    out = relevant_split(ho(grid1d), ho_eigenstate(grid1d, 1))
    assert isinstance(out, StationaryState)
    assert abs(out.E_bar - 1.5) < 1e-9


def test_grid_refinement_moments():
    e, v = [], []
    for n in (128, 256):
        g = Grid.uniform(-10, 10, n)
        H = HamiltonianSpec(g, (1.0,), 0.5 * g.points(0) ** 2 + 0.05 * g.points(0) ** 4)
        m = energy_moments(H, gaussian(g, 1.0, 0.5, 0.6))
        e.append(m[0]), v.append(m[1])
    assert abs(e[1] - e[0]) < 1e-7 * abs(e[1])
    assert abs(v[1] - v[0]) < 1e-7 * abs(v[1])


def test_boxed_state_edge_warning():
    g = Grid.uniform(-3, 3, 64, boundary="boxed")
    H = HamiltonianSpec(g, (1.0,), np.zeros(64))
    with pytest.warns(PreconditionWarning):
        apply_h(H, gaussian(g, 0.0, 0.0, 2.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        apply_h(H, gaussian(g, 0.0, 0.0, 0.3))


def test_potential_validation():
    g = Grid.uniform(-1, 1, 16)
    with pytest.raises(ValueError, match="real"):
        HamiltonianSpec(g, (1.0,), np.ones(16) * 1j)
    bad = np.zeros((16, 2, 2))
    bad[:, 0, 1] = 1.0
    with pytest.raises(ValueError, match="Hermitian"):
        HamiltonianSpec(g, (1.0,), bad)
    with pytest.raises(GridMismatchError):
        HamiltonianSpec(g, (1.0,), np.zeros(15))


def test_load_potential_csv(tmp_path):
    x = -4 + 0.5 * np.arange(16)
    p = tmp_path / "v.csv"
    p.write_text("x,V\n" + "".join(f"{float(a)!r},{float(0.5 * a * a)!r}\n" for a in x))
    H = load_potential_csv(p, [1.0])
    assert H.grid.shape == (16,)
    assert np.allclose(H.potential, 0.5 * x**2)
    q = tmp_path / "d.csv"
    q.write_text("x,V11,V12,V22\n" + "".join(f"{float(a)!r},{float(a)!r},0.1,{float(-a)!r}\n" for a in x))
    Hd = load_potential_csv(q, [1.0])
    assert Hd.n_el == 2 and np.allclose(Hd.potential[:, 0, 1], 0.1)
