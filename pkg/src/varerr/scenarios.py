"""Scenario pipelines: build, propagate, compare with the oracle, write artifacts.

Every scenario writes ``diagnostics.csv`` (or the oracle table for
``exact-only``), any scenario-specific tables, and ``summary.json``. When an
invariant fails the artifacts are kept and a ``FAILED`` marker is written
next to them.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adiabatic, fga, mctdh, tdh
from .config import ScenarioConfig
from .diagnostics import AGREEMENT_RTOL, bound_self_check, write_reports_csv
from .exact import NumericalFailure, distance, propagate_exact, write_trajectory_csv
from .grid import Axis, Grid, HamiltonianSpec, WaveState, load_potential_csv

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
#: relative slack on the accumulated bound
BOUND_RTOL = 1e-6
#: absolute slack on the bound, covering integrator and oracle error
BOUND_ATOL = 1e-8
#: allowed relative change of the final bound when every other sample is dropped
SAMPLING_RTOL = 1e-2
NORM_TOL = 1e-9
ENERGY_RTOL = 1e-8

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclass
class Check:
    passed: bool
    value: float
    tolerance: float

    def as_dict(self):
        return {"pass": bool(self.passed), "value": _num(self.value), "tolerance": _num(self.tolerance)}


@dataclass
class Outcome:
    summary: dict
    files: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.summary["verdict"] == "PASS"


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


# -- builders ---------------------------------------------------------------------

def build_grid(cfg: ScenarioConfig) -> Grid:
    g = cfg.data["grid"]
    axes = tuple(Axis(float(a["x_min"]), float(a["x_max"]), int(a["n_points"])) for a in g["axes"])
    kw = {"point_cap": g["point_cap"]} if "point_cap" in g else {}
    return Grid(axes, g.get("boundary", "periodic"), **kw)


def polynomial_potential(grid: Grid, terms) -> np.ndarray:
    mesh = grid.mesh()
    V = np.zeros(grid.shape)
    for term in terms:
        part = np.full(grid.shape, float(term["coef"]))
        for X, p in zip(mesh, term["powers"]):
            part = part * X**p
        V += part
    return V


def build_hamiltonian(cfg: ScenarioConfig, grid: Grid) -> HamiltonianSpec:
    ham = cfg.data["hamiltonian"]
    masses = ham["mass"] if isinstance(ham["mass"], list) else [ham["mass"]]
    kinetic, hbar = ham.get("kinetic", "spectral"), float(cfg.data["hbar"])
    pot = ham["potential"]
    if "file" in pot:
        H = load_potential_csv(cfg.resolve(pot["file"]), masses, kinetic, hbar, grid.boundary)
        if H.grid.shape != grid.shape or not np.allclose(H.grid.dx, grid.dx):
            raise ValueError("potential table grid differs from the configured grid")
        return HamiltonianSpec(grid, tuple(masses), H.potential, kinetic, hbar)
    return HamiltonianSpec(grid, tuple(masses), polynomial_potential(grid, pot["terms"]), kinetic, hbar)


def _packet(g: Grid, pk, hbar) -> WaveState:
    return tdh.gaussian_spf(g, pk["q0"], pk["p0"], pk["width"], hbar)


def product_state(grid: Grid, packets, hbar) -> WaveState:
    factors = [_packet(grid.factor(k), pk, hbar).amplitudes for k, pk in enumerate(packets)]
    amp = factors[0]
    for f in factors[1:]:
        amp = np.multiply.outer(amp, f)
    return WaveState(grid, amp, hbar)


def random_state(grid: Grid, hbar: float, rng: np.random.Generator) -> WaveState:
    """Smooth random state: random low-momentum Fourier content times a Gaussian envelope."""
    mesh = grid.mesh()
    amp = np.ones(grid.shape, dtype=complex)
    for X, ax in zip(mesh, grid.axes):
        c, L = 0.5 * (ax.x_min + ax.x_max), ax.x_max - ax.x_min
        amp *= np.exp(-((X - c) ** 2) / (2 * (L / 10) ** 2))
    spec = np.zeros(grid.shape, dtype=complex)
    for k in range(5):
        kvec = [rng.uniform(-2, 2) for _ in mesh]
        phase = sum(kk * X for kk, X in zip(kvec, mesh))
        spec += complex(rng.normal(), rng.normal()) * np.exp(1j * phase)
    return WaveState(grid, amp * spec, hbar).normalized()


def build_model(cfg: ScenarioConfig, grid: Grid) -> adiabatic.AdiabaticModel:
    ham, hbar = cfg.data["hamiltonian"], float(cfg.data["hbar"])
    mass = ham["mass"][0] if isinstance(ham["mass"], list) else ham["mass"]
    model = ham["model"]
    if "file" in model:
        with open(cfg.resolve(model["file"]), newline="") as fh:
            rows = list(csv.DictReader(fh))
        X = np.array([float(r["X"]) for r in rows])
        entries = {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k != "X"}
        return adiabatic.tabulated_model(grid, mass, X, entries, hbar)
    return adiabatic.NAMED_MODELS[model["name"]](grid, mass=mass, hbar=hbar, **model.get("params", {}))


# -- shared summary pieces -------------------------------------------------------

def _sampling_check(full: float, half: float) -> Check:
    change = abs(full - half)
    rel = change / max(abs(full), 1e-300)
    # bounds at rounding level carry no sampling information
    return Check(change <= SAMPLING_RTOL * abs(full) + BOUND_ATOL, rel, SAMPLING_RTOL)


def _variational_checks(reports, distances=None, sampling: Check | None = None):
    eps = np.array([r.eps for r in reports])
    bound = np.array([r.bound_accum for r in reports])
    checks = {
        "stationarity": Check(not any(r.stationarity_flag for r in reports),
                              sum(r.stationarity_flag for r in reports), 0),
        "boundedness": Check(all(r.bounded_ok for r in reports),
                             max(r.deriv_norm / max(r.residual_guided or r.h_norm, 1e-300)
                                 for r in reports), 1.0 + 1e-9),
    }
    agree = [abs(r.eps_variance - r.eps_direct) / r.eps_direct for r in reports
             if not r.stationary and r.eps_direct > 0 and r.eps == r.eps_variance]
    checks["eps_forms_agree"] = Check(not any(r.stationarity_flag for r in reports),
                                      max(agree, default=0.0), AGREEMENT_RTOL)
    if sampling is not None:
        checks["bound_sampling"] = sampling
    elif len(reports) >= 3:
        full = reports[-1].bound_accum
        checks["bound_sampling"] = _sampling_check(full, full * (1 - bound_self_check(reports)))
    summary = {"final_eps": eps[-1], "max_eps": eps.max(), "bound_final": bound[-1]}
    if distances is not None:
        d = np.asarray(distances)
        excess = float(np.max(d - bound * (1 + BOUND_RTOL)))
        checks["a_posteriori_bound"] = Check(excess <= BOUND_ATOL, excess, BOUND_ATOL)
        summary["oracle_distance_final"] = d[-1]
        summary["bound_ok"] = checks["a_posteriori_bound"].passed
    return checks, summary


def _oracle_checks(traj) -> dict[str, Check]:
    return {
        "oracle_norm": Check(traj.norm_drift <= NORM_TOL, traj.norm_drift, NORM_TOL),
        "oracle_energy": Check(traj.energy_drift <= ENERGY_RTOL, traj.energy_drift, ENERGY_RTOL),
    }


def _oracle(H, psi0, times, cfg):
    if not cfg.data["oracle"]:
        return None, None
    traj = propagate_exact(H, psi0, float(times[-1]), len(times))
    if not np.allclose(traj.times, times, rtol=0, atol=1e-12 * max(1.0, times[-1])):
        raise NumericalFailure("oracle and variational sample times differ")
    return traj, traj.states


# -- pipelines ------------------------------------------------------------------

def _run_fga(cfg, out: Path, n_samples):
    grid = build_grid(cfg)
    H = build_hamiltonian(cfg, grid)
    init, tol = cfg.data["initial_state"], cfg.data.get("tolerances", {})
    dq = init["dq"]
    if dq == "match":
        # width with m Delta^2 = 0 at t = 0 (curvature from the potential on the grid)
        V = H.potential
        j = int(np.argmin(np.abs(grid.points(0) - init["q0"])))
        h = grid.dx[0]
        v2 = (V[(j + 1) % V.size] - 2 * V[j] + V[j - 1]) / h**2
        if v2 <= 0:
            raise ValueError("dq = 'match' needs a positive potential curvature at q0")
        dq = fga.matched_width(v2, H.masses[0], H.hbar)
    s0 = fga.CoherentState.from_qp(init["q0"], init["p0"], dq, H.masses[0], hbar=H.hbar)
    sched = None
    if "guided_width" in cfg.data:
        gw = cfg.data["guided_width"]
        sched = fga.WidthSchedule(dq, gw["amplitude"], gw["frequency"])
    run = fga.propagate_fga(H, s0, cfg.data["t_final"], n_samples, schedule=sched,
                            rtol=tol.get("rtol", fga.ODE_RTOL), atol=tol.get("atol", fga.ODE_ATOL))
    traj, exact = _oracle(H, run.grid_states[0], run.times, cfg)
    dist = [distance(a, b) for a, b in zip(run.grid_states, exact)] if exact else None
    checks, summ = _variational_checks(run.reports, dist)
    if sched is None:
        cross = [r.crosscheck_ok for r in run.reports if r.crosscheck_ok is not None]
        checks["scalar_formula_crosscheck"] = Check(all(cross), len(cross) - sum(cross), 0)
    else:
        ratio = max(abs(r.energy_drift) / max(r.drift_bound, 1e-300) for r in run.reports)
        checks["energy_drift_bound"] = Check(all(r.drift_ok for r in run.reports), ratio, 1.0)
    if traj is not None:
        checks.update(_oracle_checks(traj))
    extra = {"oracle_distance": dist} if dist else None
    files = [out / "diagnostics.csv"]
    write_reports_csv(run.reports, files[0], extra)
    terms = cfg.data["hamiltonian"]["potential"].get("terms")
    if terms is not None:
        coeffs = np.zeros(13)
        for tm in terms:
            coeffs[tm["powers"][0]] += tm["coef"]
        d = fga.PotentialDerivatives.from_polynomial(coeffs, init["q0"])
        summ["lowest_order_eps_t0"] = fga.fga_error_lowest_order(d, dq, H.masses[0], s0.omega) / H.hbar
    summ["dq"] = dq
    return summ, checks, files


def _run_tdh(cfg, out: Path, n_samples):
    grid = build_grid(cfg)
    H = build_hamiltonian(cfg, grid)
    tol = cfg.data.get("tolerances", {})
    spfs = tuple(_packet(grid.factor(k), pk, H.hbar)
                 for k, pk in enumerate(cfg.data["initial_state"]["packets"]))
    s0 = tdh.TDHState(spfs)
    run = tdh.propagate_tdh(H, s0, cfg.data["t_final"], n_samples,
                            rtol=tol.get("rtol", tdh.ODE_RTOL), atol=tol.get("atol", tdh.ODE_ATOL))
    joint = run.joint_states(grid)
    traj, exact = _oracle(H, joint[0], run.times, cfg)
    dist = [distance(a, b) for a, b in zip(joint, exact)] if exact else None
    checks, summ = _variational_checks(run.reports, dist)
    decs = run.decompositions
    ident = max(abs(d.var_mf + d.var_dV + d.cross - d.var_E) / max(d.var_E, 1e-300) for d in decs)
    checks["decomposition_identity"] = Check(ident <= 1e-8, ident, 1e-8)
    low = min(d.r_mf - d.r_lower for d in decs if not math.isnan(d.r_mf))
    checks["r_index_lower_bound"] = Check(low >= -1e-9, low, -1e-9)
    checks["mean_field_crosscheck"] = Check(all(d.crosscheck_ok for d in decs),
                                            sum(not d.crosscheck_ok for d in decs), 0)
    if traj is not None:
        checks.update(_oracle_checks(traj))
    summ["renormalizations"] = run.renormalizations
    files = [out / "diagnostics.csv", out / "decomposition.csv"]
    write_reports_csv(run.reports, files[0], {"oracle_distance": dist} if dist else None)
    tdh.write_decomposition_csv(run, files[1])
    return summ, checks, files


def _run_adiabatic(cfg, out: Path, n_samples):
    grid = build_grid(cfg)
    model = build_model(cfg, grid)
    init = cfg.data["initial_state"]
    n = init["surface"]
    if n >= model.n_el:
        raise ValueError(f"surface {n} does not exist (model has {model.n_el})")
    psi0 = _packet(grid, init["packets"][0], model.hbar)
    run = adiabatic.propagate_bo(model, psi0, n, cfg.data["t_final"], n_samples)
    traj, exact = None, None
    if cfg.data["oracle"]:
        Hd = model.diabatic_hamiltonian()
        traj = propagate_exact(Hd, model.embed(psi0, n), float(run.times[-1]), len(run.times))
        exact = traj.states
    dist = ([distance(model.embed(a, n), b) for a, b in zip(run.states, exact)]
            if exact else None)
    checks, summ = _variational_checks(run.reports, dist)
    full = np.array([r.eps for r in run.reports])
    scale = np.maximum(full, 1e-300)
    rel = np.where(full > 1e-12, np.abs(run.eps_fluct - run.eps_trans) / scale, 0.0)
    checks["fluctuation_vs_transitions"] = Check(bool(rel.max() <= 1e-6), rel.max(), 1e-6)
    rel_full = np.where(full > 1e-12, np.abs(run.eps_fluct - full) / scale, 0.0)
    checks["fluctuation_vs_full_space"] = Check(bool(rel_full.max() <= 1e-6), rel_full.max(), 1e-6)
    rc = model.richardson_change()
    checks["frame_derivative_convergence"] = Check(rc <= 1e-6, rc, 1e-6)
    if traj is not None:
        checks.update(_oracle_checks(traj))
    files = [out / "diagnostics.csv", out / "bo_errors.csv"]
    write_reports_csv(run.reports, files[0], {"oracle_distance": dist} if dist else None)
    adiabatic.write_bo_csv(run, files[1])
    return summ, checks, files


def _mctdh_initial(cfg, grids, hbar):
    init = cfg.data["initial_state"]
    f = [[_packet(g, pk, hbar).amplitudes for pk in spf] for g, spf in zip(grids, init["spfs"])]
    n1, n2 = len(f[0]), len(f[1])
    if init["coefficients"] == "random":
        rng = np.random.default_rng(cfg.data["seed"])
        C = rng.normal(size=(n1, n2)) + 1j * rng.normal(size=(n1, n2))
    else:
        C = np.array(init["coefficients"], dtype=complex)
    if np.linalg.norm(C) == 0:
        raise ValueError("coefficient matrix must not vanish")
    return mctdh.from_functions(grids, f[0], f[1], C, hbar)


def _run_mctdh(cfg, out: Path, n_samples):
    grid = build_grid(cfg)
    H = build_hamiltonian(cfg, grid)
    grids = (grid.factor(0), grid.factor(1))
    s0 = _mctdh_initial(cfg, grids, H.hbar)
    sp, tol = cfg.data.get("spawn", {}), cfg.data.get("tolerances", {})

    res0 = mctdh.spawn_select(H, s0)
    run = mctdh.propagate_mctdh(H, s0, cfg.data["t_final"], n_samples, threshold=sp.get("threshold"),
                                max_spfs=sp.get("max_spfs", 4), rtol=tol.get("rtol", 1e-9),
                                atol=tol.get("atol", 1e-11),
                                damping=sp.get("damping", mctdh.PROPAGATION_DAMPING))
    psis = [s.to_grid(grid) for s in run.states]
    traj, exact = _oracle(H, psis[0], run.times, cfg)
    dist = [distance(a, b) for a, b in zip(psis, exact)] if exact else None
    half = mctdh.piecewise_bound(*run.nodes, stride=2)[-1]
    sampling = _sampling_check(run.reports[-1].bound_accum, half) if len(run.times) >= 3 else None
    checks, summ = _variational_checks(run.reports, dist, sampling)
    results = (res0,) + run.spawn_results
    defect = max(r.identity_defect for r in results)
    checks["spawn_identity"] = Check(defect <= 1e-8, defect, 1e-8)
    excess = max(r.eps_after_measured - r.eps_after_predicted for r in results)
    checks["full_enlargement_not_worse"] = Check(excess <= 1e-10, excess, 1e-10)
    if traj is not None:
        checks.update(_oracle_checks(traj))
    summ.update({
        "spawn_t0": {"gammas": list(res0.gammas), "eps_before": res0.eps_before,
                     "eps_after_predicted": res0.eps_after_predicted,
                     "eps_after_restricted": res0.eps_after_restricted,
                     "eps_after_measured": res0.eps_after_measured},
        "n_spawns": len(run.events),
        "final_n_spfs": list(run.states[-1].n),
    })
    files = [out / "diagnostics.csv", out / "spawn_log.csv"]
    extra = {"eps_integrated": run.eps_integrated, "eps_after_spawn": run.eps_after}
    if dist:
        extra["oracle_distance"] = dist
    write_reports_csv(run.reports, files[0], extra)
    mctdh.write_spawn_log(run.events, files[1])
    return summ, checks, files


def _run_exact(cfg, out: Path, n_samples):
    grid = build_grid(cfg)
    H = build_hamiltonian(cfg, grid)
    init = cfg.data["initial_state"]
    if init.get("random"):
        psi0 = random_state(grid, H.hbar, np.random.default_rng(cfg.data["seed"]))
    else:
        psi0 = product_state(grid, init["packets"], H.hbar)
    traj = propagate_exact(H, psi0, cfg.data["t_final"], n_samples)
    checks = _oracle_checks(traj)
    files = [out / "trajectory.csv"]
    write_trajectory_csv(traj, files[0])
    summ = {"final_eps": None, "max_eps": None, "bound_final": None,
            "oracle_distance_final": None, "method": traj.method}
    return summ, checks, files


PIPELINES = {
    "fga": _run_fga,
    "tdh": _run_tdh,
    "adiabatic": _run_adiabatic,
    "mctdh-spawn": _run_mctdh,
    "exact-only": _run_exact,
}


def _write_summary(path: Path, summary: dict):
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_num) + "\n")


def run_scenario(cfg: ScenarioConfig, output_dir, n_samples: int | None = None) -> Outcome:
    """Run one scenario and write its artifacts into ``output_dir``.

    Numerical failures propagate as :class:`NumericalFailure` after the
    ``FAILED`` marker has been written.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    n = int(n_samples or cfg.data["n_samples"])
    base = {"schema_version": SCHEMA_VERSION, "scenario": cfg.kind, "name": cfg.name,
            "seed": cfg.data["seed"], "n_samples": n, "t_final": cfg.data["t_final"],
            "parameters": cfg.data}
    try:
        summ, checks, files = PIPELINES[cfg.kind](cfg, out, n)
    except (NumericalFailure, np.linalg.LinAlgError) as exc:
        marker.write_text(f"numerical failure: {exc}\n")
        _write_summary(out / "summary.json", {**base, "verdict": "FAIL", "error": str(exc),
                                              "checks": {}})
        raise NumericalFailure(str(exc)) from exc
    summ.setdefault("oracle_distance_final", None)
    summ.setdefault("bound_ok", None)
    verdict = "PASS" if all(c.passed for c in checks.values()) else "FAIL"
    summary = {**base, **{k: (_num(v) if isinstance(v, (float, np.floating)) else v)
                          for k, v in summ.items()},
               "checks": {k: c.as_dict() for k, c in sorted(checks.items())}, "verdict": verdict}
    if isinstance(summary.get("bound_ok"), np.bool_):
        summary["bound_ok"] = bool(summary["bound_ok"])
    _write_summary(out / "summary.json", summary)
    if verdict != "PASS":
        failed = [k for k, c in checks.items() if not c.passed]
        marker.write_text("failed checks: " + ", ".join(sorted(failed)) + "\n")
    return Outcome(summary, files + [out / "summary.json"])
