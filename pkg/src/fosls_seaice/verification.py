"""Self-checks: finite-difference derivative tests, element exactness and a convergence study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constitutive as cm
from . import elements as el
from . import scenario as sc
from .assembly import FEContext, evaluate, lagrange_interpolate, rt_interpolate, space, tabulate
from .mesh import build_structured
from .momentum import IceForcing, LinearForcing, LinearLaw, MomentumProblem, MomentumState
from .transport import TRACER_SPACE

FD_STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


# --------------------------------------------------------------------------
# finite differences


def fd_orders(errors, noise):
    """Observed orders between consecutive steps, skipping pairs at the rounding floor."""
    orders = []
    for i in range(len(FD_STEPS) - 1):
        if errors[i + 1] > 100.0 * noise[i + 1]:
            orders.append(np.log(errors[i] / errors[i + 1]) / np.log(FD_STEPS[i] / FD_STEPS[i + 1]))
    return orders


def central_fd_study(f, exact, x, d):
    """Relative errors of central differences of ``f`` along ``d`` for every step in FD_STEPS.

    Returns ``(errors, noise)``; ``noise`` estimates the rounding floor of each quotient.
    """
    errors, noise = [], []
    scale = max(np.linalg.norm(exact), np.finfo(float).tiny)
    for h in FD_STEPS:
        fp, fm = np.asarray(f(x + h * d)), np.asarray(f(x - h * d))
        fd = (fp - fm) / (2.0 * h)
        errors.append(np.linalg.norm(fd - exact) / scale)
        noise.append(np.finfo(float).eps * (np.linalg.norm(fp) + np.linalg.norm(fm)) / (2.0 * h) / scale)
    return np.array(errors), np.array(noise)


def _summarize(name, studies, min_order=1.9, max_err=1e-5):
    orders = [o for e, n in studies for o in fd_orders(e, n)]
    err5 = max(e[FD_STEPS.index(1e-5)] for e, _ in studies)
    worst = min(orders) if orders else np.inf
    return [
        Check(f"{name}: FD order", worst >= min_order, worst, min_order, f"({len(studies)} states, {len(orders)} resolved pairs)"),
        Check(f"{name}: rel. error at h=1e-5", err5 <= max_err, err5, max_err),
    ]


def verify_derivatives(n_states: int = 100, seed: int = 0, params: cm.PhysParams = cm.PhysParams()):
    rng = np.random.default_rng(seed)
    checks = []

    # J_{Delta^-1}
    st = []
    for _ in range(n_states):
        gu, gv = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        su, sv = cm.strain(gu, params.delta_min), cm.strain(gv, 0.0)
        exact = np.atleast_1d(cm.jac_delta_inv(su, sv))
        st.append(central_fd_study(lambda g: 1.0 / cm.strain(g, params.delta_min).delta, exact, gu, gv))
    checks += _summarize("J_Delta^-1", st)

    # J_C
    st = []
    for _ in range(n_states):
        gu, gv = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        P = rng.uniform(1e3, 1e4)
        exact = cm.jac_stress(cm.strain(gu, params.delta_min), cm.strain(gv, 0.0), P).ravel()
        st.append(central_fd_study(lambda g: cm.stress(cm.strain(g, params.delta_min), P).ravel(), exact, gu, gv))
    checks += _summarize("J_C", st)

    # J_F
    st = []
    for _ in range(n_states):
        u, w = rng.normal(size=2) * 0.2, rng.normal(size=2) * 0.2
        v_a, v_o = rng.normal(size=2) * 10.0, rng.normal(size=2) * 0.2
        while np.linalg.norm(v_o - u) < 1e-3:
            v_o = rng.normal(size=2) * 0.2
        exact = cm.jac_force(u, v_o, w, params)
        st.append(central_fd_study(lambda z: cm.force(z, v_a, v_o, params), exact, u, w))
    checks += _summarize("J_F", st)

    # first variation of the discrete step functional
    checks += _summarize("first variation B", _first_variation_studies(n_states, rng, params))
    return checks


def _first_variation_studies(n_states, rng, params, n=2):
    m = build_structured(n)
    ctx = FEContext(m, 4)
    prob = MomentumProblem(
        ctx,
        "rt0p1",
        forcing=IceForcing(params, wind=lambda x, t: sc.wind(x, t, params), ocean=lambda x: sc.ocean(x, params)),
        params=params,
    )
    tdm = ctx.dofmap(TRACER_SPACE)
    ns = prob.offsets[1]
    studies = []
    for _ in range(n_states):
        A = rng.uniform(0.7, 1.0, tdm.n_global)
        H = rng.uniform(0.1, 0.5, tdm.n_global)
        old = MomentumState(rng.normal(size=ns) * 1e3, rng.normal(size=prob.n - ns) * 0.1, time=rng.uniform(0, 7) * 86400)
        data = prob.prepare(old, A, H, 1800.0, rng.uniform(0.0, 1.0))
        x = np.concatenate([rng.normal(size=ns) * 1e3, rng.normal(size=prob.n - ns) * 0.1])
        d = np.concatenate([rng.normal(size=ns) * 1e3, rng.normal(size=prob.n - ns) * 0.1])
        exact = np.atleast_1d(prob.first_variation(x, data, d))
        studies.append(central_fd_study(lambda z: prob.functional(z, data), exact, x, d))
    return studies


# --------------------------------------------------------------------------
# elements


def _monomial_integral(a: int, b: int) -> float:
    # int_T x^a y^b = a! b! / (a + b + 2)!
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)


def quadrature_error(order: int) -> float:
    rule = el.quadrature(order)
    worst = 0.0
    for a in range(order + 1):
        for b in range(order + 1 - a):
            exact = _monomial_integral(a, b)
            approx = rule.weights @ (rule.points[:, 0] ** a * rule.points[:, 1] ** b)
            worst = max(worst, abs(approx - exact) / exact)
    return worst


def rt_duality_error(degree: int) -> float:
    D = el.rt_dof_functionals(degree, lambda p: el.eval_rt(degree, p)[0])
    return float(np.abs(D - np.eye(len(D))).max())


def divergence_theorem_error(degree: int, mesh_n: int = 4, seed: int = 0) -> float:
    """max over basis functions and triangles of |int_T div v - sum of edge fluxes|."""
    rng = np.random.default_rng(seed)
    m = build_structured(mesh_n)
    # perturb interior vertices to get generic triangles
    pts = m.vertices.copy()
    interior = np.ones(len(pts), dtype=bool)
    interior[m.boundary_vertices] = False
    pts[interior] += rng.uniform(-0.2, 0.2, (interior.sum(), 2)) / mesh_n
    g = el.geometry_maps(pts, m.triangles)
    rule = el.quadrature(4)
    rv, rd = el.eval_rt(degree, rule.points)
    _, divs = el.piola_push(g, rv, rd)
    lhs = np.einsum("q,tqn->tn", rule.weights, divs) * g.det[:, None]
    s, w = el.gauss_line(4)
    rhs = np.zeros_like(lhs)
    for k, (a, b) in enumerate(el.LOCAL_EDGES):
        pa, pb = pts[m.triangles[:, a]], pts[m.triangles[:, b]]
        ref = el.REFERENCE_VERTICES[a] + s[:, None] * (el.REFERENCE_VERTICES[b] - el.REFERENCE_VERTICES[a])
        ev, ed = el.eval_rt(degree, ref)
        vals, _ = el.piola_push(g, ev, ed)  # (T, S, n, 2)
        t = pb - pa
        nrm = np.column_stack([t[:, 1], -t[:, 0]])  # outward, length = edge length
        rhs += np.einsum("s,tsni,ti->tn", w, vals, nrm)
    return float(np.abs(lhs - rhs).max())


def normal_continuity_error(name: str, mesh_n: int = 4, seed: int = 0) -> float:
    """Jump of the normal component of a random RT field across interior edges."""
    rng = np.random.default_rng(seed)
    m = build_structured(mesh_n)
    dm = FEContext(m).dofmap(space(name))
    c = rng.normal(size=dm.n_global)
    g = el.geometry_maps(m.vertices, m.triangles)
    normals = m.edge_normals()
    s, _ = el.gauss_line(4)
    worst = 0.0
    for e in np.flatnonzero(~m.boundary_edge_flags):
        p0, p1 = m.vertices[m.edges[e]]
        phys = p0 + s[:, None] * (p1 - p0)
        traces = []
        for t in m.edge_triangles[e]:
            ref = (phys - g.origin[t]) @ np.linalg.inv(g.jacobian[t]).T
            rv, rd = el.eval_rt(dm.space.degree, ref)
            single = el.GeometryMap(g.origin[t], g.jacobian[t], g.det[t], g.inv_transpose[t])
            vals, _ = el.piola_push(single, rv, rd)
            coef = c[dm.scalar_cell_dofs[t]] * dm.scalar_cell_signs[t]
            traces.append(np.einsum("qni,n,i->q", vals, coef, normals[e]))
        worst = max(worst, float(np.abs(traces[0] - traces[1]).max()))
    return worst


def p2_reproduction_error(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    m = build_structured(3)
    ctx = FEContext(m)
    dm = ctx.dofmap(space("P2"))
    coef = rng.normal(size=6)

    def q(p):
        x, y = p[..., 0], p[..., 1]
        return coef[0] + coef[1] * x + coef[2] * y + coef[3] * x * x + coef[4] * x * y + coef[5] * y * y

    c = lagrange_interpolate(m, dm, q)
    ref = rng.uniform(0, 0.5, (20, 2))
    tab = tabulate(dm, ctx.gmap, ref)
    vals, _ = evaluate(tab, c)
    phys = ctx.gmap.to_physical(ref)
    return float(np.abs(vals[..., 0] - q(phys)).max())


def verify_elements():
    checks = []
    for order in range(1, el.MAX_QUADRATURE_ORDER + 1):
        e = quadrature_error(order)
        checks.append(Check(f"quadrature order {order} exactness", e <= 1e-13, e, 1e-13))
    for deg in (0, 1):
        e = rt_duality_error(deg)
        checks.append(Check(f"RT{deg} dof duality", e <= 1e-12, e, 1e-12))
        e = divergence_theorem_error(deg)
        checks.append(Check(f"RT{deg} divergence theorem", e <= 1e-12, e, 1e-12))
        e = normal_continuity_error(f"RT{deg}")
        checks.append(Check(f"RT{deg} normal-trace continuity (n=4)", e <= 1e-12, e, 1e-12))
    e = p2_reproduction_error()
    checks.append(Check("P2 reproduces quadratics", e <= 1e-13, e, 1e-13))
    return checks


# --------------------------------------------------------------------------
# linear surrogate and manufactured solutions

SURROGATE_K = np.array([[1.0, -0.5], [0.5, 1.0]])


def manufactured_u(p):
    x, y = p[..., 0], p[..., 1]
    return np.stack([np.sin(np.pi * x) * np.sin(np.pi * y), np.sin(2 * np.pi * x) * np.sin(np.pi * y)], axis=-1)


def _manufactured_grad(p):
    x, y = p[..., 0], p[..., 1]
    pi = np.pi
    g = np.empty(p.shape[:-1] + (2, 2))
    g[..., 0, 0] = pi * np.cos(pi * x) * np.sin(pi * y)
    g[..., 0, 1] = pi * np.sin(pi * x) * np.cos(pi * y)
    g[..., 1, 0] = 2 * pi * np.cos(2 * pi * x) * np.sin(pi * y)
    g[..., 1, 1] = pi * np.sin(2 * pi * x) * np.cos(pi * y)
    return g


def manufactured_sigma(p):
    g = _manufactured_grad(p)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _manufactured_div_sigma(p):
    # div of eps(u) row-wise, by hand
    x, y = p[..., 0], p[..., 1]
    pi = np.pi
    u1_xx = -pi**2 * np.sin(pi * x) * np.sin(pi * y)
    u1_yy = -pi**2 * np.sin(pi * x) * np.sin(pi * y)
    u1_xy = pi**2 * np.cos(pi * x) * np.cos(pi * y)
    u2_xx = -4 * pi**2 * np.sin(2 * pi * x) * np.sin(pi * y)
    u2_yy = -pi**2 * np.sin(2 * pi * x) * np.sin(pi * y)
    u2_xy = 2 * pi**2 * np.cos(2 * pi * x) * np.cos(pi * y)
    # row 1: d/dx eps11 + d/dy eps12 ; row 2: d/dx eps21 + d/dy eps22
    r1 = u1_xx + 0.5 * (u1_yy + u2_xy)
    r2 = 0.5 * (u1_xy + u2_xx) + u2_yy
    return np.stack([r1, r2], axis=-1)


def manufactured_source(p):
    """g such that K u* - g - div sigma* = 0 for the stationary manufactured pair."""
    return manufactured_u(p) @ SURROGATE_K.T - _manufactured_div_sigma(p)


def surrogate_problem(n: int, elements: str = "rt0p1", quad_order: int = 4, source=manufactured_source):
    m = build_structured(n)
    ctx = FEContext(m, quad_order)
    prob = MomentumProblem(ctx, elements, law=LinearLaw(1.0), forcing=LinearForcing(SURROGATE_K, source), rho_ice=1.0)
    return prob


def surrogate_data(prob: MomentumProblem, theta: float = 1.0, dt: float = 1.0):
    ctx = prob.ctx
    u_old = lagrange_interpolate(ctx.mesh, prob.udm, manufactured_u)
    s_old = rt_interpolate(ctx.mesh, prob.sdm, manufactured_sigma)
    tdm = ctx.dofmap(TRACER_SPACE)
    old = MomentumState(s_old, u_old, 0.0)
    return old, prob.prepare(old, np.ones(tdm.n_global), np.ones(tdm.n_global), dt, theta)


def dense_ls_minimizer(prob: MomentumProblem, data):
    """Minimizer of the (linear) step functional from a dense weighted least-squares solve.

    Builds the residual map column by column from residual evaluations at unit
    vectors, so it does not use the assembled normal equations.
    """
    free = np.ones(prob.n, dtype=bool)
    free[prob.offsets[1] + prob.udm.boundary_dofs] = False
    x0 = np.zeros(prob.n)
    sw = np.sqrt(prob.ctx.weights)[..., None]
    r0 = (prob.residual(x0, data) * sw).ravel()
    cols = []
    for j in np.flatnonzero(free):
        e = np.zeros(prob.n)
        e[j] = 1.0
        cols.append((prob.residual(e, data) * sw).ravel() - r0)
    M = np.column_stack(cols)
    y, *_ = np.linalg.lstsq(M, -r0, rcond=None)
    x = np.zeros(prob.n)
    x[free] = y
    return x


def l2_velocity_error(prob: MomentumProblem, u, exact=manufactured_u) -> float:
    uv, _ = evaluate(prob.ctx.table(prob.vel_space), u)
    diff = uv - exact(prob.ctx.points)
    return float(np.sqrt(prob.ctx.integrate((diff**2).sum(axis=-1))))


def verify_convergence(ns=(4, 8, 16, 32), elements: str = "rt0p1", min_rate: float = 0.9):
    errs = []
    for n in ns:
        prob = surrogate_problem(n, elements)
        old, data = surrogate_data(prob)
        start = MomentumState(np.zeros_like(old.sigma), np.zeros_like(old.u))
        new, _ = prob.gn_solve(start, data, tol=1e-12, max_iter=3)
        errs.append(l2_velocity_error(prob, new.u))
    rates = [np.log(errs[i] / errs[i + 1]) / np.log(ns[i + 1] / ns[i]) for i in range(len(ns) - 1)]
    detail = "errors " + ", ".join(f"{e:.3e}" for e in errs) + "; rates " + ", ".join(f"{r:.2f}" for r in rates)
    worst = min(rates)
    return [Check(f"manufactured L2 velocity rate ({elements})", worst >= min_rate, worst, min_rate, detail)]


SUITES = {
    "derivatives": verify_derivatives,
    "elements": verify_elements,
    "convergence": verify_convergence,
}
