import numpy as np
import pytest

from edproxy.core import (
    EDInstance, check_feasibility, objective_value, penalized_objective,
    reserve_shortage, solve_reference, thermal_violations,
)
from edproxy.grid import compute_ptdf, normalize_case, parse_case

from oracles import grid_search_dispatch


def simple_instance(c=(1.0, 2.0), p_max=(1.0, 1.0), r_max=None, d=(0.5, 0.5), r_req=0.0):
    p_max = np.asarray(p_max, dtype=float)
    return EDInstance(case_ref="test", d=np.asarray(d, dtype=float), reserve_req=r_req,
                      p_max=p_max, r_max=p_max.copy() if r_max is None else np.asarray(r_max, float),
                      c=np.asarray(c, dtype=float))


def two_bus_instance(two_bus_text, d=None, r_req=0.0, m_th=1500.0):
    case = parse_case(two_bus_text)
    case.ptdf = compute_ptdf(case)
    return EDInstance.from_case(case, d=d, reserve_req=r_req, m_th=m_th)


def test_instance_validation():
    with pytest.raises(ValueError, match="r_max"):
        simple_instance(r_max=(1.5, 1.5))
    with pytest.raises(ValueError, match="finite"):
        simple_instance(d=(np.inf, 0.0))
    with pytest.raises(ValueError, match="nonnegative"):
        simple_instance(r_req=-0.1)
    with pytest.raises(ValueError, match="positive"):
        EDInstance(case_ref="t", d=np.zeros(2), reserve_req=0.0,
                   p_max=np.ones(2), r_max=np.ones(2), c=np.ones(2), m_th=0.0)


def test_objective_dot_product():
    inst = simple_instance()
    assert objective_value(inst, np.array([0.5, 0.5])) == pytest.approx(1.5)


def test_objective_zero_case():
    inst = simple_instance(d=(0.0, 0.0))
    assert objective_value(inst, np.zeros(2)) == 0.0


def test_objective_prices_thermal_violation(two_bus_text):
    # line limit 0.4 p.u.; dispatch pushing 0.5 p.u. over the line pays 1500 * 0.1
    inst = two_bus_instance(two_bus_text, d=np.array([0.0, 0.5]))
    p = np.array([0.5])
    xi = thermal_violations(inst, p)
    assert xi[0] == pytest.approx(0.1)
    assert objective_value(inst, p) == pytest.approx(10.0 * 0.5 + 1500.0 * 0.1)


def test_objective_dimension_mismatch():
    with pytest.raises(ValueError):
        objective_value(simple_instance(), np.zeros(3))


def test_thermal_violations_inside_limits(two_bus_text):
    inst = two_bus_instance(two_bus_text, d=np.array([0.0, 0.3]))
    assert thermal_violations(inst, np.array([0.3])).max() == 0.0


def test_thermal_violations_lower_side(two_bus_text):
    # negative demand at bus 2 injects there, driving the flow to -0.5 on the
    # 0.4-p.u. line: 0.1 of lower-limit violation
    inst = two_bus_instance(two_bus_text, d=np.array([0.0, -0.5]))
    xi = thermal_violations(inst, np.array([0.5]))
    assert xi[0] == pytest.approx(0.1)


def test_reserve_shortage_examples():
    inst = simple_instance(p_max=(1, 1), r_max=(1, 1), r_req=0.5)
    assert reserve_shortage(inst, np.array([0.95, 0.95])) == pytest.approx(0.4)
    inst0 = simple_instance(r_req=0.0)
    assert reserve_shortage(inst0, np.array([0.5, 0.5])) == 0.0
    tight = simple_instance(p_max=(1, 1), r_max=(0.5, 0.5), r_req=0.8)
    assert reserve_shortage(tight, np.array([0.15, 0.95])) == pytest.approx(0.25)


def test_penalized_objective():
    inst = simple_instance(d=(0.5, 0.5))
    p = np.array([0.6, 0.4])  # balanced, within bounds
    assert penalized_objective(inst, p) == pytest.approx(objective_value(inst, p))
    short = np.array([0.5, 0.49])
    assert penalized_objective(inst, short) == pytest.approx(
        objective_value(inst, short) + 3500.0 * 0.01)
    tight = simple_instance(p_max=(1, 1), r_max=(0.5, 0.5), d=(0.55, 0.55), r_req=0.8)
    p = np.array([0.15, 0.95])
    assert penalized_objective(tight, p) == pytest.approx(
        objective_value(tight, p) + 1100.0 * 0.25)


def test_check_feasibility_families():
    inst = simple_instance(d=(0.5, 0.5))
    rep = check_feasibility(inst, np.array([0.6, 0.4]))
    assert rep.feasible
    rep = check_feasibility(inst, np.array([0.3, 0.2]))
    assert not rep.feasible
    assert rep.violations["power_balance"] == pytest.approx(0.5)
    # reserve exceeding the headroom by 2e-4 flags the eco-max family
    rep = check_feasibility(inst, np.array([0.6, 0.4]),
                            r=np.array([0.4 + 2e-4, 0.0]))
    assert not rep.feasible
    assert rep.violations["eco_max"] == pytest.approx(2e-4)


# ---------------------------------------------------------------------------
# reference solver
# ---------------------------------------------------------------------------


def test_solver_merit_order():
    inst = simple_instance(c=(10.0, 20.0), d=(0.75, 0.75))
    sol = solve_reference(inst)
    assert sol.status == "optimal"
    assert np.allclose(sol.p, [1.0, 0.5], atol=1e-9)
    assert sol.objective == pytest.approx(20.0)


def test_solver_capacity_shortfall():
    inst = simple_instance(d=(1.3, 1.2))
    assert solve_reference(inst).status == "infeasible"


def test_solver_reserve_infeasibility():
    inst = simple_instance(d=(0.95, 0.95), r_req=0.5)
    assert solve_reference(inst).status == "infeasible"


def test_solver_zero_demand_edge():
    inst = simple_instance(d=(0.0, 0.0), r_max=(0.4, 0.4))
    sol = solve_reference(inst)
    assert sol.status == "optimal"
    assert np.array_equal(sol.p, np.zeros(2))
    assert np.allclose(sol.r, [0.4, 0.4])


def test_solver_respects_reserves():
    inst = simple_instance(c=(10.0, 20.0), p_max=(1, 1), r_max=(0.5, 0.5),
                           d=(0.55, 0.55), r_req=0.8)
    sol = solve_reference(inst)
    assert sol.status == "optimal"
    rep = check_feasibility(inst, sol.p, sol.r)
    assert rep.feasible, rep.violations
    # cheap unit alone would leave too little reserve headroom
    assert sol.objective >= 10.0 * 1.1


def test_solver_binding_thermal_matches_grid_search(ring_text):
    """A tight ring line forces out-of-merit dispatch; the lazy-row LP must
    match an exhaustive grid search of the penalized objective."""
    case = parse_case(ring_text)
    case.ptdf = compute_ptdf(case)
    case, _ = normalize_case(case)
    inst = EDInstance.from_case(case, d=np.array([0.0, 1.0, 0.8]))
    sol = solve_reference(inst)
    assert sol.status == "optimal"
    best = grid_search_dispatch(inst, h=1e-3)
    assert abs(sol.objective - best) <= 1e-2
    assert best >= sol.objective - 1e-9  # the grid cannot beat the exact LP


def test_solver_solution_invariants():
    rng = np.random.default_rng(33)
    for _ in range(25):
        n = int(rng.integers(2, 6))
        p_max = rng.uniform(0.4, 1.2, n)
        r_max = rng.uniform(0.2, 1.0, n) * p_max
        d_tot = float(rng.uniform(0.2, 0.8) * p_max.sum())
        r_req = float(rng.uniform(0.0, 0.6) * min(r_max.sum(), p_max.sum() - d_tot))
        inst = EDInstance(case_ref="rand", d=np.array([d_tot]), reserve_req=r_req,
                          p_max=p_max, r_max=r_max, c=rng.uniform(1, 6, n))
        sol = solve_reference(inst)
        assert sol.status == "optimal"
        assert check_feasibility(inst, sol.p, sol.r, tol=1e-8).feasible
        assert penalized_objective(inst, sol.p) == pytest.approx(sol.objective, abs=1e-8)
