"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import subprocess
import sys
import time

import numpy as np
import pytest

from fosls_seaice import constitutive as cm
from fosls_seaice import driver
from fosls_seaice.assembly import SparseSystem
from fosls_seaice.scenario import BenchmarkConfig
from fosls_seaice.transport import TRACER_SPACE, TracerState, advect_step, enforce_bounds
from fosls_seaice.verification import (
    dense_ls_minimizer,
    surrogate_data,
    surrogate_problem,
    verify_convergence,
    verify_derivatives,
    verify_elements,
)
from fosls_seaice.vtk import read_vtk

import scipy.sparse as sp


def report(name, passed, value, tol, seconds):
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {value} (tolerance {tol}, {seconds:.1f} s)")
    assert passed


def _checks(checks):
    bad = [c for c in checks if not c.passed]
    return not bad, "; ".join(c.line() for c in (bad or checks))


def test_ac1_derivative_oracles():
    t0 = time.perf_counter()
    ok, text = _checks(verify_derivatives(n_states=100))
    dt = time.perf_counter() - t0
    report("derivative FD oracles", ok and dt < 60, text, "order >= 1.9, rel err at 1e-5 <= 1e-5, < 60 s", dt)


def test_ac2_constitutive_identities():
    t0 = time.perf_counter()
    p = cm.PhysParams()
    P = cm.ice_strength(np.array([0.8, 1.0]), np.array([0.4, 0.3]), p)
    s0 = cm.strain(np.zeros((2, 2, 2)), p.delta_min)
    sig = cm.stress(s0, P)
    rest = -0.5 * P[:, None, None] * np.eye(2)
    rel = float(np.abs(sig - rest).max() / np.abs(rest).max())
    delta_exact = bool(np.all(s0.delta == 2e-9))
    p_err = abs(float(cm.ice_strength(1.0, 0.3, p)) - 8.25e3) / 8.25e3
    dt = time.perf_counter() - t0
    ok = rel <= 1e-12 and delta_exact and p_err <= 1e-12 and dt < 1
    report("constitutive identities", ok, f"sigma(0) rel {rel:.1e}, delta(0) exact {delta_exact}, P rel {p_err:.1e}", "1e-12, < 1 s", dt)


def test_ac3_element_suite():
    t0 = time.perf_counter()
    ok, text = _checks(verify_elements())
    dt = time.perf_counter() - t0
    report("element suite", ok and dt < 10, text, "1e-13 quadrature, 1e-12 otherwise, < 10 s", dt)


def test_ac4_linear_surrogate_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for n in (2, 4, 8):
        prob = surrogate_problem(n)
        _, data = surrogate_data(prob)
        x_star = dense_ls_minimizer(prob, data)
        x, _, _ = prob.gn_step(np.zeros(prob.n), data)
        worst = max(worst, float(np.abs(x - x_star).max() / max(1.0, np.abs(x_star).max())))
    dt = time.perf_counter() - t0
    report("one GN step equals the dense minimizer", worst <= 1e-10 and dt < 30, f"{worst:.2e}", "1e-10, < 30 s", dt)


def test_ac5_manufactured_convergence():
    t0 = time.perf_counter()
    (check,) = verify_convergence(ns=(4, 8, 16, 32))
    dt = time.perf_counter() - t0
    report("manufactured L2 rate (RT0/P1)", check.passed and dt < 300, check.detail, ">= 0.9, < 5 min", dt)


def projected_gradient(A, b, lo, hi, iters=20000):
    L = np.linalg.eigvalsh(A).max()
    x = np.clip(np.zeros(len(b)), lo, hi)
    y, t = x.copy(), 1.0
    for _ in range(iters):
        xn = np.clip(y - (A @ y - b) / L, lo, hi)
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y, x, t = xn + (t - 1) / tn * (xn - x), xn, tn
    return x


def test_ac6_transport_fixed_points_and_bounds():
    t0 = time.perf_counter()
    sim = driver.setup(BenchmarkConfig(n=16))
    ctx, vel = sim.ctx, sim.problem.vel_space
    rng = np.random.default_rng(6)
    n = ctx.dofmap(TRACER_SPACE).n_global
    tr = TracerState(rng.uniform(0, 1, n), rng.uniform(0, 1, n))
    zero = np.zeros(sim.problem.udm.n_global)
    once = advect_step(ctx, tr, vel, zero, 1800.0).tracers
    twice = advect_step(ctx, once, vel, zero, 1800.0).tracers
    idem = max(np.abs(once.H - tr.H).max(), np.abs(twice.A - once.A).max(), np.abs(twice.H - once.H).max())

    # rough velocity fields push the unconstrained update out of bounds
    bounds_ok, n_active = True, 0
    for _ in range(5):
        u = rng.normal(size=zero.shape)
        res = advect_step(ctx, tr, vel, u, 0.05)
        A, H = res.tracers.A, res.tracers.H
        bounds_ok &= bool(A.min() >= 0.0 and A.max() <= 1.0 and H.min() >= 0.0)
        n_active += sum(a.n_active for a in res.active_sets)

    gap = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        M = r.normal(size=(20, 20))
        Q = M.T @ M + np.eye(20)
        b = 5 * r.normal(size=20)
        lo = r.uniform(-1, 0, 20)
        hi = lo + r.uniform(0.1, 2, 20)
        x, _ = enforce_bounds(SparseSystem(sp.csr_matrix(Q), b), lo, hi)
        f = lambda z: 0.5 * z @ Q @ z - b @ z
        bounds_ok &= bool(np.all(x >= lo) and np.all(x <= hi))
        gap = max(gap, f(x) - f(projected_gradient(Q, b, lo, hi)))
    dt = time.perf_counter() - t0
    ok = idem <= 1e-10 and bounds_ok and n_active > 0 and gap <= 1e-8 and dt < 60
    report("transport fixed point, bounds, active-set oracle", ok,
           f"idempotence {idem:.1e}, bounds {bounds_ok} ({n_active} active), objective gap {gap:.1e}", "1e-10 / exact / 1e-8, < 60 s", dt)


def test_ac7_gauss_newton_monotone():
    t0 = time.perf_counter()
    cfg = BenchmarkConfig(n=16, dt=3600.0, t_end_days=1.0, write_vtk=False, gn_tol=1e-6, gn_max_iter=50)
    sim = driver.setup(cfg)
    prob = sim.problem
    worst_rise, max_its, all_conv = 0.0, 0, True
    for k in range(cfg.n_steps):
        adv = advect_step(sim.ctx, sim.tracers, prob.vel_space, sim.state.u, cfg.dt)
        sim.tracers = adv.tracers
        data = prob.prepare(sim.state, sim.tracers.A, sim.tracers.H, cfg.dt, cfg.theta)
        new, rep = prob.gn_solve(sim.state, data, tol=cfg.gn_tol, max_iter=cfg.gn_max_iter)
        f = np.array(rep.functional)
        worst_rise = max(worst_rise, float(np.max(np.diff(f) / f[0], initial=0.0)))
        max_its = max(max_its, rep.iterations)
        all_conv &= rep.converged
        sim.state = new
        sim.state.time = (k + 1) * cfg.dt
    dt = time.perf_counter() - t0
    ok = worst_rise <= 0.0 and all_conv and max_its <= 50 and dt < 600
    report("GN monotone and convergent (n=16, 1 day)", ok,
           f"max relative increase {worst_rise:.1e}, all converged {all_conv}, max iterations {max_its}", "F non-increasing, <= 50 its, < 10 min", dt)


@pytest.mark.slow
def test_ac8_full_scenario(tmp_path):
    t0 = time.perf_counter()
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    log = driver.run(driver.load_config(None, [f"output.directory={out1}"]))
    t_run = time.perf_counter() - t0
    rows = driver.read_run_log(out1 / "run_log.csv")
    finite = all(np.isfinite([v for k, v in r.items() if k != "phases"]).all() for r in rows)
    bounds = all(r["min_A"] >= 0.0 and r["max_A"] <= 1.0 and r["min_H"] >= 0.0 for r in rows)
    wanted = [driver.snapshot_name(d) for d in (2.0, 4.0, 6.0, 8.0)]
    snaps = all((out1 / w).exists() for w in wanted)
    vtk_finite = all(np.isfinite(v).all() for w in wanted for v in read_vtk(out1 / w)[2].values())
    complete = len(rows) == 384 and log.healthy
    proc = subprocess.run([sys.executable, "-m", "fosls_seaice", "run", "--set", f"output.directory={out2}"],
                          capture_output=True, text=True, timeout=3600)
    same = proc.returncode == 0 and (out1 / "run_log.csv").read_bytes() == (out2 / "run_log.csv").read_bytes()
    same &= all((out1 / w).read_bytes() == (out2 / w).read_bytes() for w in wanted)
    dt = time.perf_counter() - t0
    ok = complete and finite and bounds and snaps and vtk_finite and same and t_run < 1800
    report("full 8-day scenario", ok,
           f"{len(rows)} steps converged {log.healthy}, finite {finite and vtk_finite}, bounds {bounds}, "
           f"snapshots {snaps}, bit-identical rerun {same}, one run {t_run:.0f} s", "< 30 min per run", dt)
