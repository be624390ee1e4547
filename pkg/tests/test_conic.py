import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from otdro.conic import (
    ConicProgram,
    build_conic,
    certificate_point,
    constraint_violation,
    in_exp_cone,
    parse_conic,
    serialize_conic,
    verify_certificate,
)
from otdro.core import DiscreteMeasure, DualCertificate, GroundCost, InputError, PiecewiseAffineLoss, UnsupportedError, ValueDomain
from otdro.divergences import get_entropy
from otdro.lifting import build_interpolated, lift_wasserstein
from otdro.solvers import d_transform, solve_kl_interpolated

KL = get_entropy("kullback-leibler")


def interp(pieces, atoms, gc=None, radius=0.3, t1=2.0, t2=1.0, box=None, weights=None):
    loss = PiecewiseAffineLoss.from_pieces(pieces)
    mu = DiscreteMeasure(atoms, weights) if weights is not None else DiscreteMeasure.uniform(atoms)
    vd = ValueDomain(box[0], box[1], v_constrained=True) if box else None
    return build_interpolated(loss, gc or GroundCost("p-norm", 2), KL, mu, radius, t1, t2, value_domain=vd)


def hinge_instance():
    pieces = [((-1.0, -0.5), 1.0), ((0.0, 0.0), 0.0)]
    return interp(pieces, [[1.0, 0.5], [-0.3, 1.0]], t1=3.0)


def test_counts_single_atom():
    prog = build_conic(interp([(1.0, 0.0)], [[0.5]]))
    assert prog.count("exp-cone") == 1
    assert prog.count("majorization") == 1
    assert prog.count("norm-bound") == 1
    assert prog.count("aggregate") == 1
    assert prog.block_size("xi") == 0 and prog.block_size("omega") == 0


def test_counts_hinge():
    prog = build_conic(hinge_instance())
    assert prog.count("exp-cone") == 2
    assert prog.count("majorization") == 4
    assert prog.count("norm-bound") == 4
    assert prog.n_variables == 2 + 2 + 2


def test_majorization_row_full_space():
    # a.v_hat + b <= p  is stored as  a.v_hat + b - p <= 0
    inst = interp([((2.0, -1.0), 0.25)], [[0.5, 1.5]])
    prog = build_conic(inst)
    row = [c for c in prog.constraints if c["family"] == "majorization"][0]
    p_index = prog.offset("p")
    assert row["expr"]["coeffs"] == [[p_index, -1.0]]
    assert row["expr"]["const"] == pytest.approx(2.0 * 0.5 - 1.5 + 0.25)
    # the constant is the conjugate of the negated piece at -a, checked on a 1-D grid:
    # (-l_k)*(y) = sup_v (y + a) v + b is b at y = -a and grows with the grid elsewhere
    a, b = 2.0, 0.25
    conj = lambda y, R: max((y + a) * v + b for v in np.linspace(-R, R, 2001))
    assert conj(-a, 10.0) == b and conj(-a, 1000.0) == b
    assert conj(-a + 0.01, 1000.0) > conj(-a + 0.01, 10.0) > b


def test_quadratic_row():
    inst = interp([(2.0, 0.5)], [[0.25]], gc=GroundCost("squared-euclidean"), t1=4.0)
    prog = build_conic(inst)
    assert prog.count("quadratic-offset") == 1 and prog.count("norm-bound") == 0
    # at any lam > 0 the tightest p is a.v_hat + b + a^2/(4 lam theta1)
    lam = 0.7
    p_tight = 2.0 * 0.25 + 0.5 + 4.0 / (4 * lam * 4.0)
    x = prog.pack({"lambda": [lam], "t": [0.0], "eta": [1.0], "p": [p_tight]})
    row = [c for c in prog.constraints if c["family"] == "quadratic-offset"][0]
    assert constraint_violation(row, x) == pytest.approx(0.0, abs=1e-12)
    x_low = prog.pack({"lambda": [lam], "t": [0.0], "eta": [1.0], "p": [p_tight - 1e-3]})
    assert constraint_violation(row, x_low) > 0


def test_box_program_has_slope_blocks():
    inst = interp([((1.0, -2.0), 0.0), ((0.0, 0.5), 1.0)], [[0.1, 0.2]], gc=GroundCost("p-norm", 1),
                  box=([-1.0, -1.0], [1.0, 2.0]))
    prog = build_conic(inst)
    assert prog.block_size("xi") == 1 * 2 * 2 and prog.block_size("omega") == 4
    assert prog.to_dict()["metadata"]["domain"] == "box"


def test_unsupported_inputs():
    with pytest.raises(UnsupportedError):
        build_conic(interp([(1.0, 0.0)], [[0.5]], gc=GroundCost("squared-euclidean"), box=([-1.0], [1.0])))
    mu = DiscreteMeasure.uniform([[0.0]])
    with pytest.raises(InputError):
        build_conic(lift_wasserstein(PiecewiseAffineLoss.from_pieces([(1.0, 0.0)]), GroundCost(), mu, 0.1))
    with pytest.raises(InputError):
        build_conic(build_interpolated(PiecewiseAffineLoss.from_pieces([(1.0, 0.0)]), GroundCost(),
                                       get_entropy("hellinger"), mu, 0.1, 1.0, 1.0))


def test_round_trip_and_determinism():
    inst = hinge_instance()
    a, b = serialize_conic(build_conic(inst)), serialize_conic(build_conic(hinge_instance()))
    assert a == b
    prog = parse_conic(a)
    assert prog == build_conic(inst)
    assert serialize_conic(prog) == a
    assert parse_conic(json.loads(a)) == prog


def test_parse_rejects_bad_documents():
    doc = json.loads(serialize_conic(build_conic(hinge_instance())))
    for mutate in (lambda d: d.update(format="other"), lambda d: d.update(version=2),
                   lambda d: d.update(extra=1), lambda d: d.update(sense="maximize")):
        bad = json.loads(json.dumps(doc))
        mutate(bad)
        with pytest.raises(InputError):
            parse_conic(bad)


def random_interp(rng, box=False):
    n = int(rng.integers(1, 4))
    d = int(rng.integers(1, 3))
    k = int(rng.integers(1, 3))
    atoms = rng.uniform(-1, 1, (n, d))
    pieces = [(rng.normal(size=d), rng.normal()) for _ in range(k)]
    p = [1.0, math.inf][int(rng.integers(2))] if box else [1.0, 2.0, 3.0, math.inf][int(rng.integers(4))]
    gc = GroundCost("p-norm", p)
    t1 = max(np.linalg.norm(a, ord=gc.dual_exponent) for a, _ in pieces) + rng.uniform(0.1, 1.0)
    bounds = (list(-2 * np.ones(d)), list(2 * np.ones(d))) if box else None
    return interp(pieces, atoms, gc, rng.uniform(0.05, 1.0), t1 * (0.3 if box else 1.0),
                  rng.uniform(0.3, 2.0), bounds, rng.dirichlet(np.ones(n)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_certificate_feasible(seed, box):
    inst = random_interp(np.random.default_rng(seed), box)
    prog = build_conic(inst)
    sol = solve_kl_interpolated(inst)
    rep = verify_certificate(prog, sol.certificate, inst)
    if rep.skipped:
        assert sol.certificate.at_lambda_zero or sol.certificate.lambda_star == 0
        return
    assert rep.violations == [] and rep.objective_gap <= 1e-7
    assert parse_conic(serialize_conic(prog)) == prog


def test_perturbed_certificate_is_reported():
    inst = hinge_instance()
    prog = build_conic(inst)
    cert = solve_kl_interpolated(inst).certificate
    assert verify_certificate(prog, cert, inst).ok
    bumped = DualCertificate(cert.lambda_star * 1.1, cert.alpha_star, cert.objective, cert.iterations,
                             cert.tolerance_achieved)
    rep = verify_certificate(prog, bumped, inst)
    assert rep.violations
    assert {fam for _, fam, _ in rep.violations} & {"aggregate", "exp-cone"}


def test_zero_radius_skipped():
    inst = interp([(1.0, 0.0)], [[0.5], [1.0]], radius=0.0)
    rep = verify_certificate(build_conic(inst), solve_kl_interpolated(inst).certificate, inst)
    assert rep.skipped and not rep.ok and rep.note


def test_certificate_point_uses_the_transform():
    inst = hinge_instance()
    prog = build_conic(inst)
    cert = solve_kl_interpolated(inst).certificate
    x = certificate_point(prog, cert, inst)
    p = x[prog.offset("p"):prog.offset("p") + 2]
    for i, v in enumerate(inst.v_hat):
        assert p[i] == pytest.approx(d_transform(inst.loss, GroundCost("p-norm", 2), cert.lambda_star * 3.0, v).value)


def test_exp_cone_membership_branches():
    assert in_exp_cone(math.e, 1.0, 1.0)
    assert not in_exp_cone(math.e - 1e-9, 1.0, 1.0)
    # closure branch x2 = 0
    assert in_exp_cone(0.0, 0.0, 0.0)
    assert in_exp_cone(5.0, 0.0, -3.0)
    assert not in_exp_cone(5.0, 0.0, 0.1)
    assert not in_exp_cone(-1.0, 0.0, -1.0)
    assert not in_exp_cone(1.0, -0.5, -1.0)
    assert in_exp_cone(math.e - 1e-9, 1.0, 1.0, tol=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 10), st.floats(-5, 5))
def test_exp_cone_boundary_points(x2, x3):
    assume(x3 / x2 < 600)
    x1 = x2 * math.exp(x3 / x2)
    assert in_exp_cone(x1 * (1 + 1e-12), x2, x3)
    assert not in_exp_cone(x1 * (1 - 1e-9) - 1e-300, x2, x3)


# --------------------------------------------------------------------------- external solver check


def solve_with_cvxpy(doc):
    """Independent consumer of the serialized format."""
    cp = pytest.importorskip("cvxpy")
    n = sum(b["size"] for b in doc["variables"])
    x = cp.Variable(n)

    def aff(e):
        out = e["const"]
        for i, c in e["coeffs"]:
            out = out + c * x[i]
        return out

    cons = []
    for c in doc["constraints"]:
        if c["type"] == "nonnegative":
            cons += [x[i] >= 0 for i in c["vars"]]
        elif c["type"] == "linear":
            cons.append(aff(c["expr"]) <= 0 if c["sense"] == "<=" else aff(c["expr"]) == 0)
        elif c["type"] == "norm-bound":
            q = np.inf if c["q"] == "inf" else c["q"]
            cons.append(cp.norm(cp.hstack([aff(e) for e in c["vector"]]), q) <= aff(c["bound"]))
        elif c["type"] == "rotated-cone":
            x1, x2 = aff(c["x1"]), aff(c["x2"])
            vec = cp.hstack([aff(e) for e in c["x3"]])
            cons += [cp.quad_over_lin(vec, x1) <= 2 * x2, x1 >= 0]
        elif c["type"] == "exp-cone":
            a1, a2, a3 = (aff(e) for e in c["args"])
            cons.append(cp.constraints.ExpCone(a3, a2, a1))
    prob = cp.Problem(cp.Minimize(aff(doc["objective"])), cons)
    prob.solve(solver="CLARABEL")
    return prob.value


@pytest.mark.parametrize("seed", range(4))
def test_emitted_program_solves_to_the_dual_value(seed):
    rng = np.random.default_rng(100 + seed)
    inst = random_interp(rng, box=bool(seed % 2))
    if seed == 2:
        inst = interp([(1.5, 0.0), (-1.0, 0.2)], [[0.0], [0.4]], gc=GroundCost("squared-euclidean"), t1=1.0)
    doc = json.loads(serialize_conic(build_conic(inst)))
    value = solve_with_cvxpy(doc)
    assert value == pytest.approx(solve_kl_interpolated(inst).certificate.objective, abs=1e-5)


def test_program_class_round_trip_through_dict():
    prog = build_conic(hinge_instance())
    assert ConicProgram.__name__ == "ConicProgram"
    assert parse_conic(prog.to_dict()) == prog
