import math

import numpy as np
import pytest
from scipy.optimize import brentq, linprog

from otdro.core import (
    DiscreteMeasure,
    GroundCost,
    InfeasibleError,
    InputError,
    PiecewiseAffineLoss,
    UnboundedError,
    ValueDomain,
)
from otdro.divergences import get_entropy
from otdro.lifting import lift_wasserstein
from otdro.oracle import (
    MAX_LP_VARIABLES,
    build_grid,
    direct_phi_primal,
    grid_argmax,
    kl_dro_bisection,
    lp_primal,
    lp_primal_trace,
    mirror_ascent_kl_ball,
    mirror_ascent_kl_cells,
    revised_simplex,
    simplex_tableau,
)

IDENT = PiecewiseAffineLoss.from_pieces([(1.0, 0.0)])


def random_lp(rng):
    n = int(rng.integers(2, 9))
    m_ub, m_eq = int(rng.integers(0, 5)), int(rng.integers(0, 3))
    c = rng.normal(size=n)
    A_ub = rng.uniform(0, 1, (m_ub, n)) if m_ub else None
    b_ub = rng.uniform(0.5, 3, m_ub) if m_ub else None
    A_eq = rng.uniform(0, 1, (m_eq, n)) if m_eq else None
    b_eq = rng.uniform(0.5, 2, m_eq) if m_eq else None
    # a box row keeps the problem bounded
    box = np.ones((1, n))
    A_ub = box if A_ub is None else np.vstack([A_ub, box])
    b_ub = np.array([10.0]) if b_ub is None else np.append(b_ub, 10.0)
    return c, A_ub, b_ub, A_eq, b_eq


def scipy_max(c, A_ub, b_ub, A_eq, b_eq):
    res = linprog(-c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status, -res.fun if res.status == 0 else None


def test_simplex_matches_highs_and_each_other():
    rng = np.random.default_rng(0)
    checked = infeasible = 0
    for _ in range(120):
        lp = random_lp(rng)
        status, ref = scipy_max(*lp)
        if status == 2:
            with pytest.raises(InfeasibleError):
                simplex_tableau(*lp)
            with pytest.raises(InfeasibleError):
                revised_simplex(*lp)
            infeasible += 1
            continue
        a, b = simplex_tableau(*lp), revised_simplex(*lp)
        assert a.value == pytest.approx(ref, abs=1e-8)
        assert b.value == pytest.approx(a.value, abs=1e-8)
        checked += 1
        # returned points are feasible
        c, A_ub, b_ub, A_eq, b_eq = lp
        assert np.all(a.x >= -1e-12)
        assert np.all(A_ub @ a.x <= b_ub + 1e-9)
        if A_eq is not None:
            assert np.allclose(A_eq @ a.x, b_eq, atol=1e-9)
    assert checked >= 50 and infeasible >= 1


def test_simplex_degenerate_and_redundant_rows():
    # classic cycling example for the largest-coefficient rule (Beale)
    c = np.array([0.75, -150.0, 0.02, -6.0])
    A = np.array([[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]])
    b = np.array([0.0, 0.0, 1.0])
    assert simplex_tableau(c, A, b).value == pytest.approx(0.05, abs=1e-12)
    # a duplicated equality row
    A_eq = np.array([[1.0, 1.0], [2.0, 2.0]])
    for solver in (simplex_tableau, revised_simplex):
        assert solver(np.array([1.0, 2.0]), A_eq=A_eq, b_eq=[1.0, 2.0]).value == pytest.approx(2.0)


def test_simplex_unbounded():
    for solver in (simplex_tableau, revised_simplex):
        with pytest.raises(UnboundedError):
            solver(np.array([1.0, 0.0]), A_ub=np.array([[-1.0, 1.0]]), b_ub=[1.0])


def test_lp_size_cap():
    with pytest.raises(InputError):
        simplex_tableau(np.zeros(MAX_LP_VARIABLES + 1), A_ub=np.ones((1, MAX_LP_VARIABLES + 1)), b_ub=[1.0])


def test_lp_primal_zero_radius():
    mu = DiscreteMeasure([[0.0], [1.0], [2.0]], [0.2, 0.3, 0.5])
    inst = lift_wasserstein(IDENT, GroundCost("p-norm", 1), mu, 0.0, value_domain=ValueDomain((-2.0,), (4.0,)))
    res = lp_primal(inst, build_grid(inst, 0.5))
    assert res.value == pytest.approx(1.3, abs=1e-12)


def test_lp_primal_wasserstein_example():
    mu = DiscreteMeasure.uniform([[0.0], [1.0]])
    inst = lift_wasserstein(IDENT, GroundCost("p-norm", 1), mu, 0.5, value_domain=ValueDomain((-2.0,), (4.0,)))
    res = lp_primal(inst, build_grid(inst, 0.25))
    assert res.value == pytest.approx(0.5 + 0.5, abs=1e-12)
    # marginals of the plan are the nominal weights
    assert np.allclose(res.coupling.sum(axis=(1, 2)), mu.weights)


def test_lp_primal_refinement_is_monotone():
    mu = DiscreteMeasure.uniform([[0.1], [0.7]])
    loss = PiecewiseAffineLoss.from_pieces([(1.0, 0.0), (-2.0, 0.3)])
    inst = lift_wasserstein(loss, GroundCost("squared-euclidean"), mu, 0.3,
                            value_domain=ValueDomain((-2.0,), (2.0,)))
    trace = lp_primal_trace(inst, 0.5, levels=3)
    assert len(trace.values) == 3 and trace.steps == [0.5, 0.25, 0.125]
    assert trace.is_monotone()


def test_lp_primal_infeasible_grid():
    mu = DiscreteMeasure.uniform([[0.0]])
    inst = lift_wasserstein(IDENT, GroundCost("p-norm", 1), mu, 0.1, value_domain=ValueDomain((-1.0,), (1.0,)))
    grid = build_grid(inst, 0.5)
    grid = type(grid)(grid.v_points, np.array([0.0, 2.0]))  # nominal weight 1 missing
    with pytest.raises(InfeasibleError):
        lp_primal(inst, grid)


def test_build_grid_contents():
    mu = DiscreteMeasure.uniform([[0.3], [1.0], [2.0]])
    inst = lift_wasserstein(IDENT, GroundCost(), mu, 0.1, value_domain=ValueDomain((-1.0,), (1.0,)))
    grid = build_grid(inst, 0.5, extra_w=[1.7])
    assert 0.0 in grid.w_points and 1.0 in grid.w_points and 1.7 in grid.w_points
    assert grid.w_points.max() >= mu.size
    assert any(np.allclose(v, 0.3) for v in grid.v_points)


def kl_scan(losses, weights, r, m=200_001):
    """Two-atom primal: scan p = (1 - q, q), then root-find the active boundary."""
    def kl(q):
        p = np.array([1 - q, q])
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(np.nansum(np.where(p > 0, p * np.log(p / weights), 0.0)))

    q = np.linspace(0, 1, m)
    ok = np.array([kl(x) <= r for x in q])
    k = int(np.nonzero(ok)[0].max())
    if k + 1 < m:
        q_star = brentq(lambda x: kl(x) - r, q[k], q[k + 1], xtol=1e-15)
    else:
        q_star = 1.0
    return float((1 - q_star) * losses[0] + q_star * losses[1])


def test_kl_dro_bisection_examples():
    assert kl_dro_bisection([2.0, 2.0, 2.0], [0.2, 0.3, 0.5], 0.4) == pytest.approx(2.0)
    assert kl_dro_bisection([0.0, 1.0], [0.5, 0.5], 100.0) == 1.0
    res = kl_dro_bisection([0.0, 1.0], [0.5, 0.5], 100.0, full=True)
    assert res.saturated
    val = kl_dro_bisection([0.0, 1.0], [0.5, 0.5], 0.1)
    assert val == pytest.approx(kl_scan(np.array([0.0, 1.0]), np.array([0.5, 0.5]), 0.1), abs=1e-6)


def test_kl_dro_bisection_optimality():
    rng = np.random.default_rng(2)
    for _ in range(20):
        k = int(rng.integers(2, 6))
        losses, w = rng.uniform(0, 5, k), rng.dirichlet(np.ones(k))
        r = rng.uniform(0.01, 0.5)
        res = kl_dro_bisection(losses, w, r, full=True)
        p = res.probabilities
        if not res.saturated:
            kl = float(np.sum(p * np.log(p / w)))
            assert kl == pytest.approx(r, abs=1e-9)
            assert p @ losses == pytest.approx(res.value, abs=1e-9)


def test_mirror_ascent_examples():
    kappa = np.array([0.5, 0.5])
    losses = np.array([0.0, 1.0])
    assert mirror_ascent_kl_ball(kappa, losses, 0.0) == 0.5
    assert mirror_ascent_kl_ball(kappa, losses, math.log(2.0)) == 1.0
    assert mirror_ascent_kl_ball(DiscreteMeasure.uniform([[0.0], [1.0]]), losses, 0.1) == pytest.approx(
        kl_dro_bisection(losses, kappa, 0.1), abs=1e-6)


def test_mirror_ascent_matches_bisection_random():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 6))
        w = rng.dirichlet(np.ones(k))
        losses = rng.uniform(-1, 3, k)
        budget = rng.uniform(0.0, 1.0)
        worst = max(worst, abs(mirror_ascent_kl_ball(w, losses, budget) - kl_dro_bisection(losses, w, budget)))
    assert worst <= 1e-6


def test_mirror_ascent_cells_shared_budget():
    kappa = np.array([[0.5, 0.5, 0.0], [0.0, 0.3, 0.7]])
    m = np.array([0.4, 0.6])
    losses = np.array([0.0, 1.0, 2.0])
    val, q = mirror_ascent_kl_cells(kappa, m, losses, 0.05)
    assert np.allclose(q.sum(axis=1), 1.0)
    assert np.all(q[kappa == 0] == 0)
    used = sum(m[i] * np.sum(q[i, kappa[i] > 0] * np.log(q[i, kappa[i] > 0] / kappa[i, kappa[i] > 0]))
               for i in range(2))
    assert used == pytest.approx(0.05, abs=1e-9)
    assert val > m @ (kappa @ losses)


def test_direct_phi_primal():
    kl = get_entropy("kullback-leibler")
    tv = get_entropy("total-variation")
    losses = [0.0, 1.0, 3.0]
    w = [0.5, 0.5, 0.0]
    assert direct_phi_primal(kl, losses, w, 0.1) == pytest.approx(kl_dro_bisection([0.0, 1.0], [0.5, 0.5], 0.1))
    # TV radius 0.4 moves 0.2 of mass from loss 0 to loss 3
    val, mu = direct_phi_primal(tv, losses, w, 0.4, full=True)
    assert val == pytest.approx(0.5 + 0.2 * 3.0, abs=1e-12)
    assert mu == pytest.approx([0.3, 0.5, 0.2], abs=1e-12)


def test_grid_argmax_examples():
    f = lambda v: max(v[0], -v[0]) - (v[0] - 0.5) ** 2
    p, val = grid_argmax(f, ([-5.0], [5.0]), 0.001)
    assert abs(p[0] - 1.0) <= 0.001 and abs(val - 0.75) <= 1e-6
    p, _ = grid_argmax(lambda v: 1.0, ([-1.0, 0.0], [1.0, 1.0]), 0.5)
    assert np.array_equal(p, [-1.0, 0.0])
    q = lambda v: -((v[0] - 0.3141) ** 2) - (v[1] + 0.2718) ** 2
    p, _ = grid_argmax(q, ([-1.0, -1.0], [1.0, 1.0]), 0.1)
    assert np.max(np.abs(p - [0.3141, -0.2718])) <= 0.001
