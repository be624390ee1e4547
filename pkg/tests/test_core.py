import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otdro.core import (
    ClassicInstance,
    DiscreteMeasure,
    DualCertificate,
    EvaluationError,
    GroundCost,
    InputError,
    NumericalError,
    PiecewiseAffineLoss,
    SigmaFieldSpec,
    TransportRecord,
    ValueDomain,
    WorstCaseCoupling,
    evaluate_loss,
    expected_value,
    ext_mul,
    lattice_points,
)

finite = st.floats(-10, 10, allow_nan=False)


def test_measure_validation():
    with pytest.raises(InputError):
        DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(InputError):
        DiscreteMeasure([[0.0], [1.0]], [1.5, -0.5])
    with pytest.raises(InputError):
        DiscreteMeasure([[0.0]], [0.5, 0.5])
    with pytest.raises(InputError):
        DiscreteMeasure(np.zeros((0, 1)), [])
    m = DiscreteMeasure([0.0, 1.0, 2.0], [0.2, 0.3, 0.5])
    assert m.atoms.shape == (3, 1) and m.size == 3 and m.dim == 1
    with pytest.raises(ValueError):
        m.weights[0] = 1.0  # frozen


def test_measure_constructors():
    u = DiscreteMeasure.uniform([[0, 0], [1, 1], [2, 2], [3, 3]])
    assert np.allclose(u.weights, 0.25)
    p = DiscreteMeasure.point_mass([1.0, 2.0])
    assert p.size == 1 and p.weights[0] == 1.0


def test_evaluate_loss_examples():
    absval = PiecewiseAffineLoss.from_pieces([(1, 0), (-1, 0)])
    assert evaluate_loss(absval, 0.5) == 0.5
    assert evaluate_loss(PiecewiseAffineLoss.from_pieces([(2, 1), (-1, 3)]), 1.0) == 3.0
    beta, b, y = np.array([1.0, -2.0]), 0.5, 1.0
    hinge = PiecewiseAffineLoss.from_pieces([(-y * beta, 1 - y * b), (np.zeros(2), 0.0)])
    x = np.array([3.0, 0.0])  # margin y*(beta.x + b) = 3.5 >= 1
    assert evaluate_loss(hinge, x) == 0.0


def test_evaluate_loss_dimension_mismatch():
    loss = PiecewiseAffineLoss.from_pieces([([1.0, 2.0], 0.0)])
    with pytest.raises(InputError):
        evaluate_loss(loss, [1.0, 2.0, 3.0])


def test_expected_value_examples():
    assert expected_value(DiscreteMeasure.uniform([[0.0], [1.0]]), lambda z: z[0]) == 0.5
    assert expected_value(DiscreteMeasure.point_mass([2.0]), lambda z: z[0] ** 2) == 4.0
    m = DiscreteMeasure([[1.0], [2.0]], [0.3, 0.7])
    assert expected_value(m, lambda z: z[0]) == pytest.approx(1.7, abs=1e-15)
    with pytest.raises(EvaluationError):
        expected_value(m, lambda z: math.inf)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=5),
       st.tuples(finite, finite), st.tuples(finite, finite), st.floats(0, 1))
def test_loss_is_convex_along_segments(pieces, v1, v2, t):
    loss = PiecewiseAffineLoss.from_pieces([((a1, a2), b) for a1, a2, b in pieces])
    v1, v2 = np.array(v1), np.array(v2)
    lhs = loss(t * v1 + (1 - t) * v2)
    rhs = t * loss(v1) + (1 - t) * loss(v2)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))


def test_ground_costs():
    assert GroundCost("p-norm", 1)([0, 0], [3, 4]) == 7
    assert GroundCost("p-norm", 2)([0, 0], [3, 4]) == 5
    assert GroundCost("p-norm", math.inf)([0, 0], [3, 4]) == 4
    assert GroundCost("squared-euclidean")([0, 0], [3, 4]) == 25
    guard = GroundCost("squared-euclidean-label-guard", label_indices=(2,))
    assert guard([0, 0, 1], [3, 4, 1]) == 25
    assert guard([0, 0, 1], [0, 0, -1]) == math.inf
    with pytest.raises(InputError):
        GroundCost("p-norm", 0.5)
    with pytest.raises(InputError):
        GroundCost("squared-euclidean-label-guard")
    assert GroundCost("p-norm", 1).dual_exponent == math.inf
    assert GroundCost("p-norm", math.inf).dual_exponent == 1.0
    assert GroundCost("p-norm", 3).dual_exponent == pytest.approx(1.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
       st.sampled_from([1.0, 2.0, 3.0, math.inf]))
def test_ground_cost_nonnegative_and_zero_on_diagonal(v, w, p):
    for gc in (GroundCost("p-norm", p), GroundCost("squared-euclidean"),
               GroundCost("squared-euclidean-label-guard", label_indices=(2,))):
        assert gc(v, v) == 0.0
        assert gc(v, w) >= 0.0


def test_sigma_field_cells():
    v = np.array([[0.0, 1.0], [1.0, 1.0], [0.0, 2.0], [5.0, 1.0]])
    assert list(SigmaFieldSpec().cells(v)) == [0, 0, 0, 0]
    assert list(SigmaFieldSpec("condition-on-nominal-atom").cells(v)) == [0, 1, 2, 3]
    assert list(SigmaFieldSpec("condition-on-nominal-atom", (1,)).cells(v)) == [0, 0, 1, 0]
    with pytest.raises(InputError):
        SigmaFieldSpec("nonsense")


def test_value_domain_and_lattice():
    vd = ValueDomain.cube(2, 1.0)
    assert vd.dim == 2 and np.all(vd.lower() == -1)
    pts = lattice_points([-1, 0], [1, 1], 0.5)
    assert pts.shape == (5 * 3, 2)
    assert np.array_equal(pts[0], [-1, 0]) and np.array_equal(pts[1], [-1, 0.5])
    with pytest.raises(InputError):
        ValueDomain((1.0,), (0.0,))
    with pytest.raises(InputError):
        lattice_points([0], [1], 0.0)


def test_ext_mul_conventions():
    assert ext_mul(math.inf, 0.0) == 0.0
    assert ext_mul(0.0, math.inf) == 0.0
    assert ext_mul(math.inf, 2.0) == math.inf
    assert ext_mul(3.0, 2.0) == 6.0


def test_classic_instance_validation():
    loss = PiecewiseAffineLoss.from_pieces([(1, 0)])
    mu = DiscreteMeasure.uniform([[0.0], [1.0]])
    with pytest.raises(InputError):
        ClassicInstance(loss, GroundCost(), mu, -1.0, ValueDomain.cube(1, 1))


def test_certificate_and_coupling_invariants():
    with pytest.raises(InputError):
        DualCertificate(-1.0, 0.0, 1.0, 0, 0.0)
    with pytest.raises(NumericalError):
        DualCertificate(1.0, 0.0, math.nan, 0, 0.0)
    with pytest.raises(InputError):
        TransportRecord(np.zeros(1), 1.0, np.zeros(1), -0.5, 1.0)
    cert = DualCertificate(1.0, 0.0, 2.0, 3, 1e-10)
    recs = (TransportRecord([0.0], 0.5, [1.0], 1.5, 0.5), TransportRecord([1.0], 0.5, [1.0], 0.5, 0.5))
    wc = WorstCaseCoupling(recs, cert, primal_value=1.9, budget_used=0.1)
    assert wc.mean_weight() == 1.0
    assert wc.weak_duality_gap() == pytest.approx(0.1)
    assert wc.weak_duality_ok()
    assert not WorstCaseCoupling(recs, cert, primal_value=2.1).weak_duality_ok()
