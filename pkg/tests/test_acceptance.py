"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at
the end of the pytest run (section "acceptance criteria").
"""

import math
from functools import lru_cache

import numpy as np

from conftest import gaussian, ho, record_criterion, smooth_random
from varerr.adiabatic import (NuclearState, avoided_crossing, bo_error_fluctuation, bo_error_transitions,
                              propagate_bo)
from varerr.exact import distance, observable_error_bounds, propagate_exact
from varerr.fga import (CoherentState, PotentialDerivatives, WidthSchedule, coherent_to_grid, fga_error,
                        fga_error_lowest_order, matched_width, propagate_fga)
from varerr.grid import Grid, HamiltonianSpec, inner
from varerr.mctdh import from_functions, propagate_mctdh, spawn_select
from varerr.tdh import TDHState, gaussian_spf, hartree_to_grid, propagate_tdh

G1 = Grid.uniform(-10.0, 10.0, 256)
T_HO = 6 * math.pi  # three periods at omega = 1


def quartic_h():
    q = G1.points(0)
    return HamiltonianSpec(G1, (1.0,), 0.5 * q**2 + 0.1 * q**4)


def quartic_s0():
    return CoherentState.from_qp(1.0, 0.0, 0.5, 1.0)


@lru_cache(None)
def fga_ho():
    H = ho(G1)
    run = propagate_fga(H, CoherentState.from_qp(1.0, 0.5, 1 / math.sqrt(2), 1.0), T_HO, 121)
    return run, propagate_exact(H, run.grid_states[0], T_HO, 121)


@lru_cache(None)
def fga_quartic():
    H = quartic_h()
    run = propagate_fga(H, quartic_s0(), 6.0, 61)
    return run, propagate_exact(H, run.grid_states[0], 6.0, 61)


@lru_cache(None)
def fga_guided():
    return propagate_fga(quartic_h(), quartic_s0(), 6.0, 61, schedule=WidthSchedule(0.5, 0.2, 1.5))


G2 = Grid.uniform(-7.0, 7.0, 40)
J2 = Grid.product([G2, G2])


def tdh_h(lam):
    X, Y = J2.mesh()
    return HamiltonianSpec(J2, (1.0, 1.0), 0.5 * X**2 + 0.845 * Y**2 + lam * X * Y)


def tdh_s0():
    return TDHState((gaussian_spf(G2, 1.0, 0.0, 1 / math.sqrt(2)), gaussian_spf(G2, 0.0, 0.5, 0.62)))


@lru_cache(None)
def tdh_run(lam):
    H = tdh_h(lam)
    run = propagate_tdh(H, tdh_s0(), 4.0, 41)
    return run, propagate_exact(H, hartree_to_grid(tdh_s0(), J2), 4.0, 41)


GM = Grid.uniform(-6.0, 6.0, 16)
JM = Grid.product([GM, GM])


def mctdh_h(quartic=0.0):
    X, Y = JM.mesh()
    return HamiltonianSpec(JM, (1.0, 1.0), 0.5 * X**2 + 0.845 * Y**2 + 0.3 * X * Y + quartic * X**2 * Y**2)


def mctdh_state(n2):
    f1 = [gaussian(GM, 1.0, 0.0, 0.7071).amplitudes]
    f2 = [gaussian(GM, -0.5, 0.3, 0.62).amplitudes, gaussian(GM, 0.5, -0.3, 0.8).amplitudes][:n2]
    return from_functions((GM, GM), f1, f2, np.array([[0.8, 0.6][:n2]]))


@lru_cache(None)
def mctdh_run():
    return propagate_mctdh(mctdh_h(), mctdh_state(2), 1.0, 6)


GA = Grid.uniform(-6.0, 6.0, 256)


def avoided(coupling=0.2, gap=0.5):
    return avoided_crossing(GA, mass=20.0, k=1.0, x0=0.5, gap=gap, coupling=coupling, width=1.0)


@lru_cache(None)
def bo_run():
    return propagate_bo(avoided(), gaussian(GA, -1.0, 2.0, 0.3), 0, 4.0, 41)


# -- criteria -------------------------------------------------------------------

def test_criterion_01_harmonic_fga_exact():
    run, traj = fga_ho()
    eps = max(r.eps for r in run.reports)
    dist = max(distance(a, b) for a, b in zip(run.grid_states, traj.states))
    ok = eps < 1e-8 and dist < 1e-6
    assert record_criterion(1, "harmonic FGA exactness", ok,
                            f"max eps {eps:.2e} (< 1e-8), max oracle distance {dist:.2e} (< 1e-6)")


def test_criterion_02_variance_form_matches_residual():
    groups = {"FGA quartic": fga_quartic()[0].reports, "TDH bilinear": tdh_run(0.3)[0].reports,
              "MCTDH bilinear": mctdh_run().reports}
    worst = {k: max(abs(r.eps_variance - r.eps_direct) / r.eps_direct for r in reps)
             for k, reps in groups.items()}
    ok = all(w < 1e-7 for w in worst.values())
    detail = ", ".join(f"{k} {w:.1e}" for k, w in worst.items())
    assert record_criterion(2, "variance form vs direct residual", ok, f"max rel. difference {detail} (< 1e-7)")


def test_criterion_03_boundedness():
    runs = [fga_ho()[0].reports, fga_quartic()[0].reports, tdh_run(0.3)[0].reports,
            tdh_run(0.0)[0].reports, mctdh_run().reports, bo_run().reports]
    ratios = [r.deriv_norm / r.h_norm for reps in runs for r in reps]
    worst = max(ratios)
    ok = worst <= 1 + 1e-9
    assert record_criterion(3, "boundedness", ok,
                            f"max hbar|psidot|/|H psi| {worst:.12f} over {len(ratios)} samples (<= 1 + 1e-9)")


def _bound_excess(run_states, traj, reports):
    d = np.array([distance(a, b) for a, b in zip(run_states, traj.states)])
    b = np.array([r.bound_accum for r in reports])
    return d, b, float(np.max(d - b * (1 + 1e-6)))


def test_criterion_04_a_posteriori_bound():
    (fr, ft), (tr, tt) = fga_quartic(), tdh_run(0.3)
    df, bf, ef = _bound_excess(fr.grid_states, ft, fr.reports)
    dt, bt, et = _bound_excess(tr.joint_states(J2), tt, tr.reports)
    # corollaries on the FGA run: autocorrelation and <tanh q> (operator norm 1)
    psi0 = ft.states[0]
    A = np.tanh(G1.points(0))
    corr_excess, obs_excess = -math.inf, -math.inf
    for v, e, b in zip(fr.grid_states, ft.states, bf):
        ac_b, obs_b = observable_error_bounds(float(b), 1.0)
        ac = abs(inner(psi0, v) - inner(psi0, e))
        obs = abs(inner(v, v.with_amplitudes(A * v.amplitudes)) - inner(e, e.with_amplitudes(A * e.amplitudes)))
        corr_excess = max(corr_excess, ac - ac_b * (1 + 1e-6))
        obs_excess = max(obs_excess, obs - obs_b * (1 + 1e-6))
    worst = max(ef, et, corr_excess, obs_excess)
    ok = worst <= 1e-10 and df[-1] > 1e-3 and dt[-1] > 1e-3
    assert record_criterion(
        4, "a-posteriori bound", ok,
        f"final distance/bound FGA {df[-1]:.3g}/{bf[-1]:.3g}, TDH {dt[-1]:.3g}/{bt[-1]:.3g}; "
        f"max excess {worst:.1e} including autocorrelation and observable corollaries")


def test_criterion_05_lowest_order_fga_formula():
    coeffs = [0.0, 0.0, 0.5, 1 / 6, 1 / 24]
    g = Grid.uniform(-1.5, 1.5, 256)
    eps, rel = {}, {}
    for dq in (0.2, 0.1, 0.05):
        m = 1 / (4 * dq**4)  # matched width equals dq for V'' = 1
        H = HamiltonianSpec(g, (m,), np.polynomial.Polynomial(coeffs)(g.points(0)))
        s = CoherentState(0.0, matched_width(1.0, m), m)
        eps[dq] = fga_error(H, s).eps
        est = fga_error_lowest_order(PotentialDerivatives.from_polynomial(coeffs, 0.0), dq, m, s.omega)
        rel[dq] = abs(est - eps[dq]) / eps[dq]
    orders = [math.log2(eps[0.2] / eps[0.1]), math.log2(eps[0.1] / eps[0.05])]
    ok = rel[0.1] < 0.1 and min(orders) >= 3
    assert record_criterion(5, "lowest-order FGA formula", ok,
                            f"rel. error at dq=0.1 {rel[0.1]:.2%} (< 10%), orders "
                            f"{orders[0]:.3f}, {orders[1]:.3f} (>= 3)")


def test_criterion_06_tdh_decomposition():
    decs = tdh_run(0.3)[0].decompositions
    ident = max(abs(d.var_E - d.var_mf - d.var_dV - d.cross) / d.var_E for d in decs)
    low = min(d.r_mf - d.r_lower for d in decs)
    sep = max(d.eps_mf for d in tdh_run(0.0)[0].decompositions)
    ok = ident <= 1e-8 and sep < 1e-9 and low >= -1e-9
    assert record_criterion(6, "TDH decomposition", ok,
                            f"identity {ident:.1e} (<= 1e-8), separable eps_mf {sep:.1e} (< 1e-9), "
                            f"min r_mf - lower {low:.3g} (>= -1e-9)")


def test_criterion_07_adiabatic_equivalence():
    run = bo_run()
    rel = float(np.max(np.abs(run.eps_fluct - run.eps_trans) / run.eps_fluct))
    # zero diabatic coupling; the diabats then cross at X = gap, placed outside the box
    model = avoided(coupling=0.0, gap=12.0)
    s = NuclearState(gaussian(GA, -1.0, 2.0, 0.3), 0)
    zero = max(bo_error_fluctuation(model, s), bo_error_transitions(model, s)[0])
    ok = rel < 1e-6 and zero < 1e-9
    assert record_criterion(7, "adiabatic formula equivalence", ok,
                            f"max rel. difference {rel:.1e} (< 1e-6), zero-coupling eps {zero:.1e} (< 1e-9)")


def _optimality_margin(res, seed):
    rng = np.random.default_rng(seed)
    dx = GM.dx[0]
    worst = -math.inf
    for m in res.modes:
        if not m.spawnable:
            continue
        Q = m.residual_basis
        for _ in range(50):
            f = Q @ (rng.normal(size=Q.shape[1]) + 1j * rng.normal(size=Q.shape[1]))
            f /= math.sqrt(np.vdot(f, f).real * dx)
            worst = max(worst, m.gamma_of(f, dx) - m.gamma)
    return worst


def test_criterion_08_spawning_identity():
    cases = {"bilinear 1x1": (mctdh_h(), mctdh_state(1)), "bilinear 1x2": (mctdh_h(), mctdh_state(2)),
             "anharmonic 1x2": (mctdh_h(0.05), mctdh_state(2))}
    parts, ok = [], True
    for name, (H, s) in cases.items():
        res = spawn_select(H, s)
        defect = res.identity_defect
        not_worse = res.eps_after_measured <= res.eps_after_predicted * (1 + 1e-9)
        margin = _optimality_margin(res, 7)
        ok &= defect <= 1e-8 and not_worse and margin <= 1e-12 * max(res.gammas + (1.0,))
        parts.append(f"{name}: gamma sum {sum(res.gammas):.2e}, defect {defect:.1e}, "
                     f"full {res.eps_after_measured:.6g} vs predicted {res.eps_after_predicted:.6g}")
    assert record_criterion(8, "spawning identity", ok,
                            "; ".join(parts) + "; 50 random residual-space candidates per mode never beat eta")


def test_criterion_09_guided_parameters():
    reps = fga_guided().reports
    bounded = max(r.deriv_norm / r.residual_guided for r in reps)
    drift = max(abs(r.energy_drift) / r.drift_bound for r in reps if r.drift_bound > 0)
    ok = all(r.bounded_ok for r in reps) and all(r.drift_ok for r in reps)
    assert record_criterion(9, "guided-parameter generalization", ok,
                            f"max hbar|psidot|/|H psi - i hbar phidot| {bounded:.6f}, "
                            f"max |W|/(2 hbar eps |phidot|) {drift:.6f} (both <= 1)")


def test_criterion_10_oracle_integrity():
    rng = np.random.default_rng(2024)
    q = G1.points(0)
    H = HamiltonianSpec(G1, (1.0,), 0.5 * q**2 + 0.1 * q**4 - 0.3 * q**3 / (1 + q**2))
    traj = propagate_exact(H, smooth_random(G1, rng), 5.0, 51)
    tdh_traj = tdh_run(0.3)[1]
    norm = max(traj.norm_drift, tdh_traj.norm_drift)
    energy = max(traj.energy_drift, tdh_traj.energy_drift)
    # coherent state orbit in the harmonic oscillator, z(t) = z0 exp(-i t)
    s0 = CoherentState.from_qp(1.0, 0.5, 1 / math.sqrt(2), 1.0)
    orbit = fga_ho()[1]
    overlap = min(abs(inner(coherent_to_grid(CoherentState(s0.z * np.exp(-1j * t), s0.dq, 1.0), G1), psi))
                  for t, psi in zip(orbit.times, orbit.states))
    ok = norm <= 1e-9 and energy <= 1e-8 and overlap >= 1 - 1e-7
    assert record_criterion(10, "oracle integrity", ok,
                            f"norm drift {norm:.1e} (<= 1e-9), rel. energy drift {energy:.1e} (<= 1e-8), "
                            f"min orbit overlap 1 - {1 - overlap:.1e} (>= 1 - 1e-7)")
