import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gaussian, ho_eigenstate, smooth_random
from varerr.exact import distance, propagate_exact
from varerr.grid import Grid, HamiltonianSpec, apply_h, energy_moments, kinetic_matrix_1d
from varerr.tdh import (DECOMPOSITION_COLUMNS, TDHState, fluctuating_potential, gaussian_spf,
                        hartree_to_grid, joint_derivative, mean_field_h, partial_average,
                        propagate_tdh, tdh_error, tdh_rhs, write_decomposition_csv)

G = Grid.uniform(-8.0, 8.0, 48)
JOINT = Grid.product([G, G])


def bilinear(lam=0.3, ky=1.0, extra=0.0):
    X, Y = JOINT.mesh()
    return HamiltonianSpec(JOINT, (1.0, 1.0), 0.5 * X**2 + 0.5 * ky * Y**2 + lam * X * Y + extra * X**2 * Y**2)


def random_product(seed):
    rng = np.random.default_rng(seed)
    return TDHState((smooth_random(G, rng), smooth_random(G, rng)))


def packets():
    return TDHState((gaussian(G, 1.0, 0.5, 0.8), gaussian(G, -0.5, 0.0, 0.6)))


def test_state_validation():
    f = gaussian(G)
    with pytest.raises(ValueError, match="two modes"):
        TDHState((f,))
    with pytest.raises(ValueError, match="normalized"):
        TDHState((f, 2.0 * f))
    with pytest.raises(ValueError, match="gauge"):
        TDHState((f, f), gauges=(0.1, 0.2))


def test_hartree_product_factorizes():
    s = packets()
    psi = hartree_to_grid(s)
    a, b = (f.amplitudes for f in s.spfs)
    assert np.array_equal(psi.amplitudes, np.outer(a, b))
    assert psi.norm() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        hartree_to_grid(s, Grid.product([G, Grid.uniform(-8.0, 8.0, 40)]))


def test_mean_field_matrix_matches_quadrature():
    lam = 0.3
    H = bilinear(lam)
    s = packets()
    x = G.points(0)
    a, b = (f.amplitudes for f in s.spfs)
    dx = G.dx[0]
    T = kinetic_matrix_1d(G.axes[0], 1.0)
    y_mean = np.sum(np.abs(b) ** 2 * x) * dx
    y2_mean = np.sum(np.abs(b) ** 2 * x**2) * dx
    t_b = (np.vdot(b, T @ b) * dx).real
    ref = T + np.diag(0.5 * x**2 + lam * x * y_mean + 0.5 * y2_mean + t_b)
    assert np.max(np.abs(mean_field_h(H, s, 0) - ref)) < 1e-10
    v = partial_average(H.potential, s, 1)
    x_mean = np.sum(np.abs(a) ** 2 * x) * dx
    x2_mean = np.sum(np.abs(a) ** 2 * x**2) * dx
    assert np.max(np.abs(v - (0.5 * x**2 + lam * x * x_mean + 0.5 * x2_mean))) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_mean_field_expectation_equals_energy(seed):
    H = bilinear(0.4, extra=0.05)
    s = random_product(seed)
    e_bar, _ = energy_moments(H, hartree_to_grid(s, JOINT))
    dx = G.dx[0]
    for i, f in enumerate(s.spfs):
        a = f.amplitudes
        assert (np.vdot(a, mean_field_h(H, s, i) @ a) * dx).real == pytest.approx(e_bar, rel=1e-10)


@given(st.integers(0, 10_000), st.floats(-0.6, 0.6), st.floats(0.0, 0.1))
def test_variance_decomposition(seed, lam, extra):
    H = bilinear(lam, extra=extra)
    s = random_product(seed)
    dec, rep = tdh_error(H, s)
    scale = max(dec.var_E, 1e-12)
    assert abs(dec.var_E - (dec.var_mf + dec.var_dV + dec.cross)) < 1e-9 * scale
    assert abs(dec.cross) < 1e-9 * scale
    assert dec.crosscheck_ok
    assert abs(dec.eps_mf**2 - rep.eps**2) < 1e-9 * scale
    assert dec.r_lower <= dec.r_mf * (1 + 1e-9) + 1e-12
    assert dec.r_mf <= 1 + 1e-9
    assert abs(dec.cross) <= 2 * math.sqrt(dec.var_mf * dec.var_dV) + 1e-12


def test_fluctuating_potential_has_zero_mean_and_partial_averages():
    H = bilinear(0.3, extra=0.05)
    s = random_product(3)
    dv = fluctuating_potential(H, s)
    psi = hartree_to_grid(s, JOINT)
    rho = np.abs(psi.amplitudes) ** 2 * JOINT.volume_element
    assert abs(np.sum(rho * dv)) < 1e-10
    # each partial average is constant
    for i in range(2):
        avg = partial_average(dv, s, i)
        assert np.ptp(avg) < 1e-10


def test_derivative_norm_is_mean_field_variance():
    H = bilinear(0.5, extra=0.02)
    for hbar in (1.0, 0.5):
        Hh = HamiltonianSpec(H.grid, H.masses, H.potential, hbar=hbar)
        rng = np.random.default_rng(5)
        s = TDHState((smooth_random(G, rng, hbar), smooth_random(G, rng, hbar)))
        dots = tdh_rhs(Hh, s)
        psidot = joint_derivative(s, dots, JOINT)
        dec, _ = tdh_error(Hh, s)
        assert hbar**2 * psidot.norm() ** 2 == pytest.approx(dec.var_mf, rel=1e-10)


def test_gauge_leaves_error_unchanged():
    H = bilinear(0.3)
    s = random_product(7)
    _, r0 = tdh_error(H, s)
    _, r1 = tdh_error(H, TDHState(s.spfs, (0.4, -0.4)))
    assert r1.eps == pytest.approx(r0.eps, rel=1e-12)


def test_eigenstate_product_is_stationary():
    H = bilinear(0.0, ky=4.0)
    s = TDHState((ho_eigenstate(G, 0), ho_eigenstate(G, 1, omega=2.0)))
    for d in tdh_rhs(H, s):
        assert d.norm() < 1e-8
    dec, rep = tdh_error(H, s)
    assert rep.eps < 1e-8 and dec.var_E < 1e-14


def test_separable_run_matches_oracle():
    H = bilinear(0.0, ky=2.0)
    s0 = packets()
    run = propagate_tdh(H, s0, 4.0, 21)
    exact = propagate_exact(H, hartree_to_grid(s0, JOINT), 4.0, 21)
    assert max(r.eps for r in run.reports) < 1e-7
    assert max(distance(a, b) for a, b in zip(run.joint_states(JOINT), exact.states)) < 1e-7


def test_coupled_run_is_bounded_and_decomposes():
    H = bilinear(0.3)
    s0 = packets()
    run = propagate_tdh(H, s0, 3.0, 31)
    exact = propagate_exact(H, hartree_to_grid(s0, JOINT), 3.0, 31)
    assert run.renormalizations == 0
    for psi, phi, rep, dec in zip(run.joint_states(JOINT), exact.states, run.reports, run.decompositions):
        assert distance(psi, phi) <= rep.bound_accum * (1 + 1e-6) + 1e-10
        assert rep.bounded_ok and dec.crosscheck_ok
    assert run.reports[-1].eps > 0.01


def test_decomposition_csv(tmp_path):
    run = propagate_tdh(bilinear(0.3), packets(), 0.5, 6)
    path = tmp_path / "d.csv"
    write_decomposition_csv(run, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == DECOMPOSITION_COLUMNS and len(rows) == 7
    assert float(rows[3][1]) == pytest.approx(run.decompositions[2].var_E, rel=1e-15)


def test_gaussian_spf_is_normalized():
    f = gaussian_spf(G, 0.5, 1.0, 0.7)
    assert f.norm() == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(f.amplitudes - gaussian(G, 0.5, 1.0, 0.7).amplitudes)) < 1e-12


def test_mismatched_hamiltonian_rejected():
    H1 = HamiltonianSpec(G, (1.0,), 0.5 * G.points(0) ** 2)
    with pytest.raises(ValueError):
        tdh_error(H1, packets())
    with pytest.raises(ValueError):
        apply_h(H1, hartree_to_grid(packets()))
