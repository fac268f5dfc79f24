import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_prob_measure, rational_pair
from polymetric.bruteforce import (
    generalized_wasserstein_units,
    min_cost_units,
    wasserstein_units,
)
from polymetric.errors import NumericContractError
from polymetric.measures import PointMeasure
from polymetric.transport import (
    TransportPlan,
    capped_cost,
    dual_lower_bound,
    generalized_wasserstein,
    wasserstein,
)


# ---------------------------------------------------------------- examples

def test_cost_is_capped_at_one():
    v, _ = wasserstein(PointMeasure([0.0], [1.0]), PointMeasure([5.0], [1.0]))
    assert v == pytest.approx(1.0, abs=1e-12)


def test_half_shift_pair():
    a = PointMeasure([0.0, 1.0], [0.5, 0.5])
    g = PointMeasure([0.5, 1.5], [0.5, 0.5])
    v, plan = wasserstein(a, g)
    assert v == pytest.approx(0.5, abs=1e-12)
    plan.validate()


def test_identical_measures_cost_zero():
    a = PointMeasure([0.3, -2.0], [0.25, 0.5])
    v, _ = wasserstein(a, a)
    assert v == pytest.approx(0.0, abs=1e-13)


def test_unequal_mass_rejected():
    a = PointMeasure([0.0], [0.5])
    g = PointMeasure([0.0], [0.6])
    with pytest.raises(NumericContractError, match="equal masses"):
        wasserstein(a, g)


def test_zero_measure_rejected():
    with pytest.raises(NumericContractError, match="nonzero"):
        wasserstein(PointMeasure.empty(1), PointMeasure.empty(1))


def test_generalized_pure_disposal():
    # same point, masses 1 and 0.4: ship 0.4 free, discard 0.6
    v, kept, _ = generalized_wasserstein(
        PointMeasure([0.0], [1.0]), PointMeasure([0.0], [0.4]))
    assert v == pytest.approx(0.6, abs=1e-12)
    assert kept == pytest.approx(0.4, abs=1e-12)


def test_generalized_far_apart_unit_masses():
    # transporting at distance >= 1 costs the same as discarding both sides
    v, _, _ = generalized_wasserstein(
        PointMeasure([0.0], [1.0]), PointMeasure([5.0], [1.0]))
    assert v == pytest.approx(1.0, abs=1e-12)


def test_generalized_against_empty():
    a = PointMeasure([0.0, 3.0], [0.3, 0.2])
    v, kept, _ = generalized_wasserstein(a, PointMeasure.empty(1))
    assert v == pytest.approx(0.5, abs=1e-15) and kept == 0.0
    v2, _, _ = generalized_wasserstein(PointMeasure.empty(1), a)
    assert v2 == pytest.approx(0.5, abs=1e-15)


# ---------------------------------------------------------------- plan contract

def test_plan_detects_broken_row_sums():
    a = PointMeasure([0.0, 1.0], [0.5, 0.5])
    g = PointMeasure([0.25, 2.0], [0.5, 0.5])
    _, plan = wasserstein(a, g)
    bad = plan.masses.copy()
    bad[0] += 1e-6
    with pytest.raises(NumericContractError, match="row sums"):
        TransportPlan(plan.src_positions, plan.dst_positions,
                      plan.src_weights, plan.dst_weights,
                      plan.rows, plan.cols, bad, plan.cost)


def test_plan_detects_wrong_cost():
    a = PointMeasure([0.0], [0.5])
    g = PointMeasure([0.5], [0.5])
    _, plan = wasserstein(a, g)
    with pytest.raises(NumericContractError, match="stated cost"):
        TransportPlan(plan.src_positions, plan.dst_positions,
                      plan.src_weights, plan.dst_weights,
                      plan.rows, plan.cols, plan.masses, plan.cost + 1e-3)


# ---------------------------------------------------------------- vs oracle

def test_matches_enumeration_oracle_balanced():
    rng = np.random.default_rng(42)
    for _ in range(40):
        dim = int(rng.integers(1, 3))
        a, g, x, y, su, du, unit = rational_pair(rng, max_atoms=4, dim=dim)
        v, plan = wasserstein(a, g)
        ref = wasserstein_units(x, y, su, du, unit)
        assert abs(v - ref) <= 1e-11, f"solver {v} vs enumeration {ref}"
        plan.validate()


def test_matches_enumeration_oracle_generalized():
    rng = np.random.default_rng(43)
    for _ in range(40):
        dim = int(rng.integers(1, 3))
        a, g, x, y, su, du, unit = rational_pair(rng, max_atoms=3, dim=dim,
                                                 balanced=False)
        v, kept, plan = generalized_wasserstein(a, g)
        ref = generalized_wasserstein_units(x, y, su, du, unit)
        assert abs(v - ref) <= 1e-11, f"solver {v} vs enumeration {ref}"
        assert kept <= min(a.total_mass(), g.total_mass()) + 1e-12
        plan.validate()


def test_oracle_agrees_with_reference_lp():
    # third route: scipy's LP on the same instances
    from scipy.optimize import linprog

    rng = np.random.default_rng(44)
    for _ in range(10):
        a, g, x, y, su, du, unit = rational_pair(rng, max_atoms=3)
        cost = capped_cost(a.positions, g.positions)
        m, n = cost.shape
        A_eq = np.zeros((m + n, m * n))
        for i in range(m):
            A_eq[i, i * n:(i + 1) * n] = 1.0
        for j in range(n):
            A_eq[m + j, j::n] = 1.0
        b_eq = np.concatenate([a.weights, g.weights])
        res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, method="highs")
        ref = wasserstein_units(x, y, su, du, unit)
        assert abs(res.fun - ref) <= 1e-9


# ---------------------------------------------------------------- metric laws

def test_symmetry_and_triangle():
    rng = np.random.default_rng(45)
    for _ in range(25):
        w = rng.uniform(0.1, 0.3, 3)
        mk = lambda: PointMeasure(rng.normal(0, 2, (3, 1)), w)
        A, B, C = mk(), mk(), mk()
        ab, _ = wasserstein(A, B)
        ba, _ = wasserstein(B, A)
        ac, _ = wasserstein(A, C)
        cb, _ = wasserstein(C, B)
        assert abs(ab - ba) <= 1e-12
        assert ab <= ac + cb + 1e-11


def test_generalized_triangle_and_symmetry():
    rng = np.random.default_rng(46)
    for _ in range(25):
        A = random_prob_measure(rng, 3).scaled(rng.uniform(0.2, 1.0))
        B = random_prob_measure(rng, 3).scaled(rng.uniform(0.2, 1.0))
        C = random_prob_measure(rng, 3).scaled(rng.uniform(0.2, 1.0))
        ab = generalized_wasserstein(A, B)[0]
        ba = generalized_wasserstein(B, A)[0]
        ac = generalized_wasserstein(A, C)[0]
        cb = generalized_wasserstein(C, B)[0]
        assert abs(ab - ba) <= 1e-12
        assert ab <= ac + cb + 1e-11


def test_generalized_never_exceeds_equal_mass_cost():
    rng = np.random.default_rng(47)
    for _ in range(20):
        a, g, *_ = rational_pair(rng, max_atoms=4)
        w, _ = wasserstein(a, g)
        gw, _, _ = generalized_wasserstein(a, g)
        assert gw <= w + 1e-12


def test_splitting_inequality():
    # transporting the sum is never worse than transporting the parts
    rng = np.random.default_rng(48)
    for _ in range(20):
        a1, g1, *_ = rational_pair(rng, max_atoms=3)
        a2, g2, *_ = rational_pair(rng, max_atoms=3)
        a = PointMeasure(np.vstack([a1.positions, a2.positions]),
                         np.concatenate([a1.weights, a2.weights]) / 2)
        g = PointMeasure(np.vstack([g1.positions, g2.positions]),
                         np.concatenate([g1.weights, g2.weights]) / 2)
        whole, _ = wasserstein(a, g)
        p1, _ = wasserstein(a1, g1)
        p2, _ = wasserstein(a2, g2)
        assert whole <= (p1 + p2) / 2 + 1e-11


@pytest.mark.parametrize("k", [2, 3])
def test_product_power_bound(k):
    # k-fold product measures: cost grows at most linearly in k
    rng = np.random.default_rng(49)
    for _ in range(8):
        a = random_prob_measure(rng, 3)
        g = random_prob_measure(rng, 3)
        base, _ = wasserstein(a, g)

        def power(m):
            pos, w = m.positions, m.weights
            P, W = pos, w
            for _ in range(k - 1):
                P = np.concatenate(
                    [np.repeat(P, len(pos), axis=0),
                     np.tile(pos, (len(P), 1))], axis=1)
                W = np.outer(W, w).ravel()
            return PointMeasure(P, W)

        vk, _ = wasserstein(power(a), power(g))
        assert vk <= k * base + 1e-10, f"k={k}: {vk} > {k}*{base}"


# ---------------------------------------------------------------- duality

def test_dual_bound_is_below_primal():
    rng = np.random.default_rng(50)
    for _ in range(20):
        a, g, *_ = rational_pair(rng, max_atoms=4)
        primal, _ = wasserstein(a, g)
        anchors = g.positions

        def witness(p, anchors=anchors):
            # capped distance to the target support: admissible by construction
            return float(np.minimum(
                np.linalg.norm(anchors - p, axis=1), 1.0).min())

        bound = dual_lower_bound(a, g, witness)
        assert bound <= primal + 1e-9


def test_dual_bound_rejects_steep_witness():
    a = PointMeasure([0.0], [0.5])
    g = PointMeasure([1.0], [0.5])
    with pytest.raises(NumericContractError, match="not admissible"):
        dual_lower_bound(a, g, lambda p: 2.0 * float(p[0]))


def test_dual_bound_rejects_wide_oscillation():
    # 0.6-Lipschitz but oscillation 3 over distance 5: violates the cap
    a = PointMeasure([0.0], [0.5])
    g = PointMeasure([5.0], [0.5])
    with pytest.raises(NumericContractError, match="not admissible"):
        dual_lower_bound(a, g, lambda p: 0.6 * float(p[0]))


def test_dual_certificate_matches_primal_on_matched_pair():
    # two unit atoms at distance 0.7: primal = 0.7, witness f(x) = -x is tight
    a = PointMeasure([0.0], [1.0])
    g = PointMeasure([0.7], [1.0])
    primal, _ = wasserstein(a, g)
    bound = dual_lower_bound(a, g, lambda p: -float(p[0]))
    assert bound == pytest.approx(primal, abs=1e-12) == pytest.approx(0.7)


# ---------------------------------------------------------------- enumeration unit

def test_min_cost_units_tiny_closed_form():
    # 2x1: everything must ship to the single sink
    cost = np.array([[0.25], [1.0]])
    assert min_cost_units((1, 2), (3,), cost) == pytest.approx(0.25 + 2.0)
