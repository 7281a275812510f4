import numpy as np
import pytest
import scipy.sparse as sp

from fosls_seaice.assembly import FEContext, SparseSystem, lagrange_interpolate, space
from fosls_seaice.mesh import build_structured
from fosls_seaice.transport import (
    AT_UPPER,
    TRACER_SPACE,
    ActiveSetError,
    TracerState,
    advect_step,
    enforce_bounds,
    quadratic_value,
)

VEL = space("P1", 2)


def projected_gradient(A, b, lower, upper, iters=20000):
    """Accelerated projected gradient for 0.5 x^T A x - b^T x on a box (oracle)."""
    L = np.linalg.eigvalsh(A).max()
    x = np.clip(np.zeros(len(b)), lower, upper)
    y, t = x.copy(), 1.0
    for _ in range(iters):
        xn = np.clip(y - (A @ y - b) / L, lower, upper)
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = xn + (t - 1) / tn * (xn - x)
        x, t = xn, tn
    return x


@pytest.fixture(scope="module")
def setting():
    m = build_structured(8)
    ctx = FEContext(m)
    return m, ctx


def _velocity(m, ctx, f):
    return lagrange_interpolate(m, ctx.dofmap(VEL), f)


def test_zero_velocity_is_identity(setting, rng):
    m, ctx = setting
    n = ctx.dofmap(TRACER_SPACE).n_global
    tr = TracerState(rng.uniform(0, 1, n), rng.uniform(0, 2, n))
    u = np.zeros(ctx.dofmap(VEL).n_global)
    out = tr
    for _ in range(5):
        out = advect_step(ctx, out, VEL, u, 600.0).tracers
    assert np.abs(out.A - tr.A).max() <= 1e-10
    assert np.abs(out.H - tr.H).max() <= 1e-10


def test_constant_state_under_uniform_flow(setting):
    m, ctx = setting
    n = ctx.dofmap(TRACER_SPACE).n_global
    u = _velocity(m, ctx, lambda p: np.column_stack([np.full(len(p), 0.3), np.full(len(p), -0.2)]))
    tr = TracerState(np.full(n, 0.7), np.full(n, 0.25))
    out = advect_step(ctx, tr, VEL, u, 0.05).tracers
    assert np.allclose(out.A, 0.7, atol=1e-12) and np.allclose(out.H, 0.25, atol=1e-12)


def test_matches_upwind_oracle():
    n, c = 32, 0.1
    m = build_structured(n)
    ctx = FEContext(m)
    profile = lambda x: np.exp(-(((x - 0.4) / 0.1) ** 2))
    u = _velocity(m, ctx, lambda p: np.column_stack([np.full(len(p), c), np.zeros(len(p))]))
    q0 = lagrange_interpolate(m, ctx.dofmap(TRACER_SPACE), lambda p: profile(p[:, 0]))
    h = 1.0 / n
    for dt in (0.01, 0.05):
        out = advect_step(ctx, TracerState(q0, q0), VEL, u, dt, bounded=False).tracers
        # first-order upwind on the grid lines, CFL <= 1/2
        x = np.linspace(0, 1, n + 1)
        q = profile(x)
        nsub = max(1, int(np.ceil(2 * c * dt / h)))
        for _ in range(nsub):
            q = q - c * (dt / nsub) / h * (q - np.concatenate([[q[0]], q[:-1]]))
        oracle = np.interp(m.vertices[:, 0], x, q)
        assert np.abs(out.H - oracle).max() <= 0.5 * (c * dt + h)


def test_functional_consistency(setting, rng):
    m, ctx = setting
    n = ctx.dofmap(TRACER_SPACE).n_global
    u = _velocity(m, ctx, lambda p: 0.05 * np.column_stack([np.sin(3 * p[:, 1]), np.cos(2 * p[:, 0])]))
    tr = TracerState(rng.uniform(0.5, 1, n), rng.uniform(0, 1, n))
    res = advect_step(ctx, tr, VEL, u, 0.5, bounded=False)
    # value of the quadratic form equals the directly integrated residual
    from fosls_seaice.transport import _tracer_integrand

    rows, r0 = _tracer_integrand(ctx, VEL, u, tr.H, 0.5)
    direct = ctx.integrate((np.einsum("tqmn,tn->tqm", rows, res.tracers.H[ctx.dofmap(TRACER_SPACE).cell_dofs]) + r0)[..., 0] ** 2)
    qv = quadratic_value(res.systems[1], res.constant[1], res.tracers.H)
    assert qv >= 0.0
    assert qv == pytest.approx(direct, rel=1e-10, abs=1e-14)


def test_bounds_hold_after_step(setting):
    m, ctx = setting
    n = ctx.dofmap(TRACER_SPACE).n_global
    u = _velocity(m, ctx, lambda p: np.column_stack([np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])] * 2))
    A0 = lagrange_interpolate(m, ctx.dofmap(TRACER_SPACE), lambda p: (p[:, 0] > 0.5).astype(float))
    H0 = lagrange_interpolate(m, ctx.dofmap(TRACER_SPACE), lambda p: 0.3 * (p[:, 1] > 0.5))
    res = advect_step(ctx, TracerState(A0, H0), VEL, u, 0.1)
    assert res.unconstrained.A.max() > 1.0 or res.unconstrained.A.min() < 0.0
    assert np.all(res.tracers.A >= 0.0) and np.all(res.tracers.A <= 1.0)
    assert np.all(res.tracers.H >= 0.0)
    for aset in res.active_sets:
        assert np.all(aset.multipliers[aset.status != 0] >= -1e-12 * max(1.0, np.abs(aset.multipliers).max()))


def test_enforce_bounds_feasible_input_untouched(rng):
    M = rng.normal(size=(6, 6))
    A = M @ M.T + np.eye(6)
    x_true = rng.uniform(0.2, 0.8, 6)
    system = SparseSystem(sp.csr_matrix(A), A @ x_true)
    x, aset = enforce_bounds(system, 0.0, 1.0)
    assert np.allclose(x, x_true) and aset.n_active == 0


def test_enforce_bounds_one_dof():
    # min (x - 2)^2  <=>  x^2 - 2*2 x  with A = 1, b = 2
    system = SparseSystem(sp.csr_matrix([[1.0]]), np.array([2.0]))
    x, aset = enforce_bounds(system, -np.inf, 1.0)
    assert x[0] == 1.0
    assert aset.status[0] == AT_UPPER
    # gradient of (x-2)^2 at 1 is -2; multiplier of the upper bound is +2 (in the halved scaling: 1)
    assert 2.0 * aset.multipliers[0] == pytest.approx(2.0)


@pytest.mark.parametrize("seed", range(20))
def test_enforce_bounds_matches_projected_gradient(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(20, 20))
    A = M.T @ M + np.eye(20)
    b = 5 * rng.normal(size=20)
    lower = rng.uniform(-1, 0, 20)
    upper = lower + rng.uniform(0.1, 2, 20)
    x, aset = enforce_bounds(SparseSystem(sp.csr_matrix(A), b), lower, upper)
    assert np.all(x >= lower) and np.all(x <= upper)
    assert aset.iterations <= 20
    f = lambda z: 0.5 * z @ A @ z - b @ z
    oracle = projected_gradient(A, b, lower, upper)
    assert f(x) - f(oracle) <= 1e-8
    # no random feasible point does better
    for _ in range(100):
        z = rng.uniform(lower, upper)
        assert f(x) <= f(z) + 1e-12


def test_enforce_bounds_iteration_cap():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(20, 20))
    A = M.T @ M + np.eye(20)
    b = 50 * rng.normal(size=20)
    with pytest.raises(ActiveSetError) as info:
        enforce_bounds(SparseSystem(sp.csr_matrix(A), b), -0.1, 0.1, max_iter=1)
    assert info.value.kkt_violation > 0
