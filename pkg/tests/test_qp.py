import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import qp_bruteforce
from pwa_shield import qp

BACKENDS = sorted(qp.KERNELS)
small = st.floats(-5, 5, allow_nan=False)


@st.composite
def problems(draw, max_m=6, max_na=3):
    na = draw(st.integers(1, max_na))
    m = draw(st.integers(0, max_m))
    G = draw(arrays(float, (m, na), elements=small))
    G[np.all(np.abs(G) < 1e-3, axis=1), 0] = 1.0
    h = draw(arrays(float, m, elements=small))
    u = draw(arrays(float, na, elements=small))
    return np.ascontiguousarray(G), h, u


@pytest.mark.parametrize("backend", BACKENDS)
def test_unconstrained_returns_reference(backend):
    sol = qp.solve(qp.QpProblem([1.5, -2.0]), backend=backend)
    assert sol.optimal and np.array_equal(sol.u_star, [1.5, -2.0]) and sol.objective == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_halfspace_projection(backend):
    sol = qp.solve(qp.QpProblem([1.0, 1.0], A=[[-1.0, 0.0]], lb=[0.0]), backend=backend)
    assert sol.optimal
    np.testing.assert_allclose(sol.u_star, [0.0, 1.0], atol=1e-15)
    assert sol.objective == pytest.approx(1.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_box_bounds(backend):
    sol = qp.solve(qp.QpProblem([3.0, -7.0, 0.5], lower=-5.0, upper=[2.0, 5.0, 5.0]), backend=backend)
    np.testing.assert_allclose(sol.u_star, [2.0, -5.0, 0.5])


@pytest.mark.parametrize("backend", BACKENDS)
def test_contradiction_is_infeasible_with_certificate(backend):
    prob = qp.QpProblem([0.0], A=[[1.0], [-1.0]], lb=[1.0, 0.0])
    sol = qp.solve(prob, backend=backend)
    assert sol.status == qp.INFEASIBLE and sol.u_star is None
    G, h = prob.stacked()
    y = sol.certificate
    # Farkas: y >= 0, G^T y = 0, h . y > 0 proves {G u >= h} empty.
    assert np.all(y >= -1e-12)
    np.testing.assert_allclose(G.T @ y, 0.0, atol=1e-10)
    assert h @ y > 1e-8
    assert not qp.feasibility_check(prob).feasible
    assert qp.feasibility_check(prob).margin == pytest.approx(-0.5)


def test_single_constraint_feasible():
    f = qp.feasibility_check(qp.QpProblem([0.0, 0.0], A=[[1.0, 2.0]], lb=[3.0]))
    assert f.feasible and f.margin == np.inf


@pytest.mark.parametrize("backend", BACKENDS)
@given(problems())
def test_matches_kkt_enumeration(backend, prob):
    G, h, u = prob
    sol = qp.solve_stacked(G, h, u, kernel=qp.KERNELS[backend])
    ref_u, ref_obj = qp_bruteforce(G, h, u)
    margin = qp.max_min_slack(G, h)
    if abs(margin) < 1e-7:
        return  # feasibility is numerically ambiguous at this margin
    assert sol.optimal == (ref_u is not None) == (margin > 0)
    if sol.optimal:
        assert sol.objective == pytest.approx(ref_obj, rel=1e-9, abs=1e-12)
        assert np.all(G @ sol.u_star - h >= -1e-8)
        assert sol.kkt_residual <= 1e-9


@given(problems())
def test_backends_agree_bitwise(prob):
    if "compiled" not in qp.KERNELS:
        pytest.skip("compiled extension not built")
    G, h, u = prob
    a = qp.solve_stacked(G, h, u, kernel=qp.KERNELS["python"])
    b = qp.solve_stacked(G, h, u, kernel=qp.KERNELS["compiled"])
    assert a.status == b.status
    if a.optimal:
        np.testing.assert_allclose(a.u_star, b.u_star, rtol=1e-12, atol=1e-12)


@given(problems())
def test_deterministic(prob):
    G, h, u = prob
    a = qp.solve_stacked(G, h, u)
    b = qp.solve_stacked(G, h, u)
    assert a.status == b.status
    if a.optimal:
        assert np.array_equal(a.u_star, b.u_star) and np.array_equal(a.active, b.active)


@given(problems(), st.integers(0, 2**32 - 1))
def test_projection_variational_inequality(prob, seed):
    G, h, u = prob
    sol = qp.solve_stacked(G, h, u)
    if not sol.optimal:
        return
    rng = np.random.default_rng(seed)
    V = sol.u_star + rng.normal(scale=2.0, size=(2000, u.size))
    V = V[np.all(V @ G.T - h >= 0, axis=1)][:200]
    vi = (V - sol.u_star) @ (u - sol.u_star)
    assert np.all(vi <= 1e-9 * (1 + np.linalg.norm(u - sol.u_star)))


@given(problems())
def test_objective_equals_squared_distance(prob):
    G, h, u = prob
    sol = qp.solve_stacked(G, h, u)
    if sol.optimal:
        d = sol.u_star - u
        assert sol.objective == pytest.approx(float(d @ d), rel=1e-12, abs=1e-300)


def test_max_iterations_status():
    # Three orthogonal violated constraints need three additions.
    sol = qp.solve_stacked(np.eye(3), np.ones(3), np.zeros(3), qp.Tolerances(max_iter=1))
    assert sol.status == qp.MAX_ITERATIONS and not sol.optimal


def test_nearly_parallel_constraints():
    eps = 1e-13
    G = np.ascontiguousarray([[1.0, 0.0], [1.0, eps]])
    sol = qp.solve_stacked(G, np.array([1.0, 1.0]), np.zeros(2))
    assert sol.optimal
    assert np.all(G @ sol.u_star - 1.0 >= -1e-8)


def test_problem_validation():
    with pytest.raises(qp.QpError):
        qp.QpProblem([0.0, 0.0], A=[[1.0, 0.0]], lb=[1.0, 2.0])
    with pytest.raises(qp.QpError):
        qp.QpProblem([0.0], lower=[1.0], upper=[0.0])


def test_stacking_order():
    prob = qp.QpProblem([0.0, 0.0], A=[[1.0, 1.0]], lb=[0.5], lower=[-1.0, -np.inf], upper=[np.inf, 2.0])
    G, h = prob.stacked()
    np.testing.assert_array_equal(G, [[1.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_array_equal(h, [0.5, -1.0, -2.0])


def test_backend_env_forces_fallback():
    import subprocess
    import sys
    code = "from pwa_shield import qp; print(qp.BACKEND)"
    env = {**__import__("os").environ, "PWA_SHIELD_BACKEND": "python"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
