import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from instances import random_instance
from oracles import binom_cdf_exact, binom_inv_cdf_mp, normal_ppf_bisect, order_bruteforce
from pwa_shield import noise as nz, qp
from pwa_shield.barrier import Polyhedron, from_obstacles
from pwa_shield.dynamics import LinearDynamics, UnicycleDynamics
from pwa_shield.filter import (ConfigError, FilterConfig, SafetyFilter, allocate_risk,
                               assignment_count, candidate_order, check_assignment,
                               compute_tau, filter_step_exact, filter_step_heuristic,
                               tightened_bounds)
from pwa_shield.scenarios import corridor_barrier, corridor_scenario

# -- configuration ------------------------------------------------------------


def test_default_delta_is_the_horizon_bound():
    cfg = FilterConfig(epsilon=0.1, horizon=20)
    assert cfg.delta == cfg.delta_bound == pytest.approx(1 - 0.9 ** (1 / 20), rel=1e-14)


def test_delta_clamped_within_slack():
    bound = FilterConfig(epsilon=0.1, horizon=20).delta_bound
    cfg = FilterConfig(epsilon=0.1, horizon=20, per_step_delta=bound + 5e-16)
    assert cfg.delta == bound


def test_delta_above_bound_rejected():
    bound = FilterConfig(epsilon=0.1, horizon=20).delta_bound
    with pytest.raises(ConfigError):
        FilterConfig(epsilon=0.1, horizon=20, per_step_delta=bound * 1.01)


@pytest.mark.parametrize("kwargs", [
    {"epsilon": 0.0}, {"epsilon": 1.0}, {"horizon": 0}, {"alpha": 1.5},
    {"confidence": 1.0}, {"confidence_mode": "x"}, {"order_anchor": "x"},
    {"max_inner_iters": 0},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        FilterConfig(**kwargs)


def test_gamma_modes():
    assert FilterConfig(horizon=20, confidence=0.2).gamma == 0.2
    assert FilterConfig(horizon=20, confidence=0.2, confidence_mode="general").gamma == pytest.approx(0.01)


def test_config_roundtrip():
    cfg = FilterConfig(epsilon=0.3, horizon=7, alpha=0.2, confidence=0.1, order_anchor="predicted")
    assert FilterConfig.from_dict(cfg.to_dict()) == cfg


# -- risk split and ranks -------------------------------------------------------


def test_allocate_risk_examples():
    np.testing.assert_allclose(allocate_risk(0.0052542, 2), [0.0026271, 0.0026271], rtol=1e-15)
    assert allocate_risk(0.3, 1).tolist() == [0.3]
    np.testing.assert_allclose(allocate_risk(0.1, 4), [0.025] * 4, rtol=1e-15)
    with pytest.raises(ConfigError):
        allocate_risk(0.1, 0)


@given(st.floats(1e-9, 0.99), st.integers(1, 50))
def test_allocate_risk_sums_to_delta(delta, n):
    assert abs(math.fsum(allocate_risk(delta, n)) - delta) <= 1e-15


def test_tau_two_term_cdf():
    # CDF(0) = 0.5 < 0.6 <= CDF(1) = 1.
    assert compute_tau(0.6, 1, 1, 0.5) == 1


@pytest.mark.parametrize("level,delta", [(0.05, 0.1), (0.005, 0.01707), (0.2, 0.3)])
def test_tau_is_one_just_above_min_samples(level, delta):
    n = nz.required_samples(level, delta)
    assert compute_tau(level, 1, n, delta) == 1
    assert binom_cdf_exact(0, n, delta) < level
    with pytest.raises(ConfigError, match=str(n)):
        compute_tau(level, 1, n - 1, delta)


def test_tau_corridor_dataset_size():
    tau = compute_tau(0.01, 2, 2580, 0.01707)
    assert tau == 28 == binom_inv_cdf_mp(0.005, 2580, 0.01707)


# -- tightening ----------------------------------------------------------------


def corridor_filter(sigma=0.03, **cfg):
    s = corridor_scenario(sigma=sigma)
    return s, s.make_filter(**cfg)


def test_alpha_zero_keeps_offsets():
    s, f = corridor_filter()
    for x in ([0.0, 0.0, 0.0], [1.0, 0.3, -0.2]):
        np.testing.assert_array_equal(f.tightened(x).b_tilde, s.barrier.b_all)


def test_alpha_shifts_by_barrier_value():
    s = corridor_scenario()
    cfg = FilterConfig(epsilon=0.1, horizon=20, alpha=0.4)
    x = np.array([0.0, 0.2, 0.0])
    tc = tightened_bounds(s.barrier, x, s.sim_noise, cfg, dynamics=s.dynamics)
    np.testing.assert_allclose(tc.b_tilde, s.barrier.b_all + 0.4 * 0.3, rtol=1e-15)


def test_corridor_tightened_bound():
    _, f = corridor_filter()
    delta_i = nz.delta_from_epsilon(0.1, 20) / 2
    expected = -0.5 - 0.03 * normal_ppf_bisect(delta_i)
    q = f.tightened(np.zeros(3)).facet(0, 0)
    assert q == pytest.approx(expected, rel=1e-13)
    assert q == pytest.approx(-0.41627, abs=1e-5)


def test_constant_dataset_gives_shift_by_constant():
    h = corridor_barrier()
    z = 0.07
    data = nz.Empirical(np.tile([0.0, z, 0.0], (500, 1)))
    cfg = FilterConfig(epsilon=0.5, horizon=20, confidence=0.2)
    f = SafetyFilter(h, UnicycleDynamics(), None, cfg, dataset=data)
    tc = f.tightened(np.zeros(3))
    # Facets (0, -1, 0) and (0, 1, 0) project the constant noise to -z and +z.
    np.testing.assert_allclose(tc.q, h.b_all - np.array([-z, z]), rtol=0, atol=1e-15)


def test_data_driven_needs_enough_samples():
    data = nz.Empirical(np.zeros((10, 3)))
    cfg = FilterConfig(epsilon=0.5, horizon=20, confidence=0.2)
    with pytest.raises(ConfigError, match="needs n >="):
        SafetyFilter(corridor_barrier(), UnicycleDynamics(), None, cfg, dataset=data)


def test_data_driven_needs_confidence():
    with pytest.raises(ConfigError):
        SafetyFilter(corridor_barrier(), UnicycleDynamics(), None, FilterConfig(),
                     dataset=nz.Empirical(np.zeros((5000, 3))))


def test_zero_noise_leaves_offsets_untouched():
    s = corridor_scenario(sigma=0.0)
    np.testing.assert_array_equal(s.make_filter().tightened(np.zeros(3)).q, s.barrier.b_all)


# -- candidate ordering ------------------------------------------------------------


def barrier_with_values(values_per_poly):
    """Barrier whose facet (i, j) evaluates to ``values_per_poly[i][j]`` at the origin."""
    polys = []
    for v in values_per_poly:
        C = np.ones((len(v), 1))
        polys.append(Polyhedron(C, -np.asarray(v, dtype=float)))
    return from_obstacles(polys)


def test_order_synthetic_example():
    h = barrier_with_values([(0.1, 0.9), (0.5, 0.2)])
    got = [tuple(j + 1 for j in a) for a in candidate_order(h, [0.0])]
    assert got == [(2, 1), (2, 2), (1, 1), (1, 2)]


def test_order_two_polyhedra_figure_configuration():
    # P1 is the most violated, so its facets vary fastest.  Facet ranks in P1
    # are (4, 1, 3, 2); in P2 they are (2, 3, 1, 4).
    h = barrier_with_values([(-0.2, -0.4, -0.3, -0.1), (0.1, 0.3, 0.2, 0.0)])
    got = [tuple(j + 1 for j in a) for a in candidate_order(h, [0.0])]
    assert got[:5] == [(4, 2), (1, 2), (3, 2), (2, 2), (4, 3)]
    assert got[5] == (1, 3) and got[-1] == (2, 4)


def test_order_single_facet():
    h = barrier_with_values([(0.3,)])
    assert list(candidate_order(h, [0.0])) == [(0,)]


def test_order_ties_keep_index_order():
    h = barrier_with_values([(0.0, 0.0), (0.0, 0.0)])
    assert list(candidate_order(h, [0.0])) == [(0, 0), (0, 1), (1, 0), (1, 1)]


value_lists = st.lists(
    st.lists(st.integers(-3, 3).map(float), min_size=1, max_size=4), min_size=1, max_size=4
)


@given(value_lists)
def test_order_matches_bruteforce(values):
    h = barrier_with_values(values)
    got = list(candidate_order(h, [0.0]))
    assert got == order_bruteforce(values)
    assert len(got) == len(set(got)) == assignment_count(h) == math.prod(len(v) for v in values)


@given(value_lists)
def test_first_assignment_is_argmax_per_polyhedron(values):
    h = barrier_with_values(values)
    first = next(candidate_order(h, [0.0]))
    assert first == tuple(int(np.argmax(v)) for v in values)


def test_check_assignment():
    h = barrier_with_values([(0.1, 0.2), (0.3,)])
    assert check_assignment(h, [1, 0]) == (1, 0)
    with pytest.raises(ValueError):
        check_assignment(h, [2, 0])
    with pytest.raises(ValueError):
        check_assignment(h, [0])


# -- heuristic step --------------------------------------------------------------


def test_feasible_base_input_is_returned():
    s, f = corridor_filter()
    u = np.array([0.2, 1.0, 0.0])
    res = f.step_heuristic(np.zeros(3), u)
    assert res.feasible and res.qp_count == 1
    np.testing.assert_array_equal(res.u, u)
    assert res.objective == 0.0


def test_corridor_projection_clips_lateral_velocity():
    s, f = corridor_filter()
    x = np.array([0.0, 0.45, 0.0])
    u = np.array([0.2, 1.0, 0.0])
    res = f.step_heuristic(x, u)
    q_upper = f.tightened(x).facet(0, 0)
    # Single active constraint -(p_y + dt u_y) >= q: u_y = (-q - p_y) / dt.
    expected = np.array([0.2, (-q_upper - 0.45) / 0.1, 0.0])
    assert res.feasible and res.assignment == (0, 0)
    np.testing.assert_allclose(res.u, expected, rtol=1e-12, atol=1e-12)
    assert x[1] + 0.1 * res.u[1] == pytest.approx(-q_upper)
    assert res.objective == pytest.approx((1.0 - expected[1]) ** 2)


def funnel_filter():
    # Obstacle (-1, 1) on the line; from x = 0.2 the higher-valued facet needs
    # u >= 0.8, beyond the upper bound, so only the other facet is reachable.
    h = from_obstacles([Polyhedron([[1.0], [-1.0]], [1.0, 1.0])])
    dyn = LinearDynamics([[1.0]], [[1.0]], u_lower=-2.0, u_upper=0.5)
    cfg = FilterConfig(epsilon=0.1, horizon=5)
    return SafetyFilter(h, dyn, nz.Gaussian([0.0], [[1e-6]]), cfg)


def test_second_ranked_facet_found_on_second_trial():
    f = funnel_filter()
    res = f.step_heuristic([0.2], [0.0])
    assert res.feasible and res.qp_count == 2 and res.assignment == (1,)
    ex = f.step_exact([0.2], [0.0])
    assert ex.assignment == (1,)
    assert res.u[0] == pytest.approx(ex.u[0], abs=1e-12)
    q = f.tightened([0.2]).facet(0, 1)
    assert res.u[0] == pytest.approx(-q - 0.2)


def test_iteration_cap_reports_infeasible():
    f = funnel_filter()
    res = f.step_heuristic([0.2], [0.0], max_iters=1)
    assert not res.feasible and res.qp_count == 1 and res.u is None


def test_all_assignments_infeasible():
    s, f = corridor_filter(sigma=0.09, epsilon=1e-9)
    res = f.step_heuristic(np.zeros(3), np.array([0.2, 1.0, 0.0]))
    assert not res.feasible and res.qp_count == 1
    assert not f.step_exact(np.zeros(3), np.zeros(3)).feasible


def test_predicted_anchor_orders_by_successor():
    h = from_obstacles([Polyhedron([[1.0], [-1.0]], [1.0, 1.0])])
    dyn = LinearDynamics([[1.0]], [[1.0]], u_lower=-3.0, u_upper=3.0)
    noise = nz.Gaussian([0.0], [[1e-6]])
    cur = SafetyFilter(h, dyn, noise, FilterConfig(horizon=5))
    pred = SafetyFilter(h, dyn, noise, FilterConfig(horizon=5, order_anchor="predicted"))
    # At x = 0.2 the right facet ranks first; the base input -1 predicts x+ = -0.8.
    assert cur.step_heuristic([0.2], [-1.0]).assignment == (0,)
    assert pred.step_heuristic([0.2], [-1.0]).assignment == (1,)


def test_returned_input_satisfies_chosen_facets():
    s, f = corridor_filter()
    rng = np.random.default_rng(5)
    for _ in range(50):
        x = np.array([0.0, rng.uniform(-0.4, 0.4), rng.uniform(-1, 1)])
        u = rng.uniform(-5, 5, size=3)
        res = f.step_heuristic(x, u)
        assert res.feasible
        m = f.margins(x, res.u)
        rows = f.tightened(x).rows(res.assignment)
        assert np.all(m[rows] >= -1e-8)


# -- exact step ---------------------------------------------------------------------


def test_exact_single_polyhedron_one_bad_facet():
    f = funnel_filter()
    ex = f.step_exact([0.2], [0.0], method="enumerate")
    single = f.qp_problem([0.2], [0.0], (1,))
    sol = qp.solve(single)
    assert ex.objective == pytest.approx(sol.objective) and ex.qp_count == 2


def test_enumeration_cap():
    f = funnel_filter()
    with pytest.raises(ConfigError, match="heuristic"):
        f.step_exact([0.2], [0.0], method="enumerate", cap=1)
    assert f.step_exact([0.2], [0.0], method="auto", cap=1).method == "bnb"
    with pytest.raises(ValueError):
        f.step_exact([0.2], [0.0], method="nope")


@given(st.integers(0, 2**32 - 1))
def test_exact_methods_agree_and_dominate(seed):
    inst = random_instance(np.random.default_rng(seed), max_poly=4, max_facets=4)
    f, x, u = inst.filt, inst.x, inst.u_base
    en = f.step_exact(x, u, method="enumerate")
    bb = f.step_exact(x, u, method="bnb")
    he = f.step_heuristic(x, u, max_iters=None)
    assert en.feasible == bb.feasible == he.feasible
    if en.feasible:
        assert bb.objective == pytest.approx(en.objective, rel=1e-9, abs=1e-12)
        assert he.objective >= en.objective - 1e-12 * (1 + en.objective)
        assert en.qp_count == assignment_count(f.barrier)


def test_functional_wrappers():
    s = corridor_scenario()
    x, u = np.zeros(3), np.array([0.2, 1.0, 0.0])
    a = filter_step_heuristic(s.barrier, x, u, s.dynamics, s.sim_noise, s.config)
    b = filter_step_exact(s.barrier, x, u, s.dynamics, s.sim_noise, s.config)
    np.testing.assert_array_equal(a.u, b.u)


def test_result_serialises():
    _, f = corridor_filter()
    d = f.step_heuristic(np.zeros(3), np.zeros(3)).to_dict()
    assert set(d) >= {"feasible", "u", "assignment", "objective", "qp_count", "margins"}


def test_dimension_mismatch():
    with pytest.raises(ConfigError):
        SafetyFilter(corridor_barrier(), LinearDynamics([[1.0]], [[1.0]]),
                     nz.Gaussian([0.0], [[1.0]]), FilterConfig())


def test_assignment_product_equals_enumeration_set():
    h = barrier_with_values([(0.1, 0.2, 0.3), (0.0, 1.0)])
    assert set(candidate_order(h, [0.0])) == set(itertools.product(range(3), range(2)))
