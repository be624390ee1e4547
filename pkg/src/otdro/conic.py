"""Finite exponential-cone program for the interpolated KL/transport dual.

For a piecewise affine loss ``l = max_k a_k.v + b_k`` the worst-case risk
equals the optimal value of

    minimize    r*lam + t
    subject to  p_i >= l_{lam*theta1}(v_hat_i)            (majorization + norm/quadratic rows)
                sum_i mu_i eta_i <= theta2*lam             (aggregate row)
                (eta_i, theta2*lam, p_i - t) in K_exp      (one cone per atom)
                lam >= 0, eta >= 0

where ``K_exp`` is the closure of ``{x1 >= x2*exp(x3/x2), x2 > 0}``.  The
d-transform bound is linear in ``(lam, p)`` for norm costs on the whole space,
uses rotated second-order cones for squared costs, and for a box
``[l, u]`` gains slope variables ``xi``, ``omega`` and support-function
epigraph variables ``s``.

Programs are plain data: variable blocks, an objective, and a list of
constraint dicts.  :func:`serialize_conic` writes them as canonical JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DualCertificate, InputError, LiftedInstance, UnsupportedError
from .divergences import KullbackLeibler
from .solvers import transform_values

FORMAT_NAME = "otdro-conic"
FORMAT_VERSION = 1
FEAS_TOL = 1e-7

FAMILY_ORDER = (
    "nonnegative",
    "slope-split",
    "support-epigraph",
    "majorization",
    "norm-bound",
    "quadratic-offset",
    "aggregate",
    "exp-cone",
)


def _aff(coeffs=(), const=0.0) -> dict:
    """Affine expression ``sum coef*x[idx] + const`` as plain data."""
    return {"coeffs": [[int(i), float(c)] for i, c in coeffs if c != 0.0], "const": float(const)}


def eval_affine(expr: dict, x: np.ndarray) -> float:
    return math.fsum([c * x[i] for i, c in expr["coeffs"]] + [expr["const"]])


def in_exp_cone(x1: float, x2: float, x3: float, tol: float = 0.0) -> bool:
    """Membership in the closed exponential cone.

    ``x2 > 0``: ``x1 >= x2*exp(x3/x2)``.  ``x2 = 0``: ``x1 >= 0`` and ``x3 <= 0``.
    With ``tol > 0`` each inequality is relaxed by ``tol``.
    """
    if x2 > 0:
        return x1 - x2 * math.exp(min(x3 / x2, 700.0)) >= -tol
    if x2 == 0:
        return x1 >= -tol and x3 <= tol
    return x2 >= -tol and x1 >= -tol and x3 <= tol


def exp_cone_violation(x1: float, x2: float, x3: float) -> float:
    """How far the triple is from satisfying the cone inequalities (0 if inside)."""
    if x2 > 0:
        bound = x2 * math.exp(min(x3 / x2, 700.0))
        return max(0.0, bound - x1)
    return max(0.0, -x1, x3 if x2 == 0 else x3, -x2)


@dataclass
class ConicProgram:
    """Minimize ``objective . x`` over the constraint list.

    ``blocks`` is an ordered list of ``(name, size)``; variable ``x`` is their
    concatenation.
    """

    blocks: list
    objective: dict
    constraints: list
    metadata: dict = field(default_factory=dict)

    @property
    def n_variables(self) -> int:
        return sum(size for _, size in self.blocks)

    def offset(self, name: str) -> int:
        off = 0
        for bname, size in self.blocks:
            if bname == name:
                return off
            off += size
        raise KeyError(name)

    def block_size(self, name: str) -> int:
        return dict(self.blocks)[name]

    def count(self, family: str) -> int:
        return sum(1 for c in self.constraints if c["family"] == family)

    def pack(self, values: dict) -> np.ndarray:
        x = np.zeros(self.n_variables)
        for name, size in self.blocks:
            if size:
                off = self.offset(name)
                x[off : off + size] = np.atleast_1d(np.asarray(values.get(name, np.zeros(size)), dtype=float))
        return x

    def objective_value(self, x) -> float:
        return eval_affine(self.objective, x)

    def violations(self, x, tol: float = FEAS_TOL) -> list:
        """``(index, family, amount)`` for every constraint violated by more than ``tol``."""
        x = np.asarray(x, dtype=float)
        out = []
        for idx, con in enumerate(self.constraints):
            amount = constraint_violation(con, x)
            if amount > tol:
                out.append((idx, con["family"], amount))
        return out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "sense": "minimize",
            "variables": [{"name": n, "size": int(s)} for n, s in self.blocks],
            "objective": self.objective,
            "constraints": self.constraints,
            "metadata": self.metadata,
        }

    def __eq__(self, other):
        return isinstance(other, ConicProgram) and serialize_conic(self) == serialize_conic(other)


def constraint_violation(con: dict, x: np.ndarray) -> float:
    kind = con["type"]
    if kind == "nonnegative":
        return max(0.0, -min(x[i] for i in con["vars"]))
    if kind == "linear":
        lhs = eval_affine(con["expr"], x)
        return max(0.0, lhs) if con["sense"] == "<=" else abs(lhs)
    if kind == "norm-bound":
        vec = np.array([eval_affine(e, x) for e in con["vector"]])
        q = con["q"]
        norm = float(np.linalg.norm(vec, ord=math.inf if q == "inf" else float(q))) if vec.size else 0.0
        return max(0.0, norm - eval_affine(con["bound"], x))
    if kind == "rotated-cone":
        x1, x2 = eval_affine(con["x1"], x), eval_affine(con["x2"], x)
        sq = math.fsum(eval_affine(e, x) ** 2 for e in con["x3"])
        # 2*x1*x2 >= ||x3||^2 read as a bound on x2: x2 >= ||x3||^2/(2*x1)
        if x1 > 0:
            return max(0.0, sq / (2.0 * x1) - x2, -x2)
        return max(0.0, -x1, -x2, math.sqrt(sq))
    if kind == "exp-cone":
        return exp_cone_violation(*(eval_affine(e, x) for e in con["args"]))
    raise InputError(f"unknown constraint type {kind!r}")


# --------------------------------------------------------------------------- build


def _q_label(q: float):
    return "inf" if math.isinf(q) else float(q)


def build_conic(instance: LiftedInstance) -> ConicProgram:
    """Exponential-cone program of an interpolated KL instance.

    Needs a norm cost (whole space or box) or a squared cost on the whole space.
    """
    cost = instance.lifted_cost
    if getattr(cost, "kind", None) != "interpolated" or not isinstance(cost.phi, KullbackLeibler):
        raise InputError("build_conic needs an interpolated instance with phi = kullback-leibler")
    gc = cost.ground_cost
    t1, t2 = cost.theta1, cost.theta2
    box = instance.value_domain.v_constrained
    quadratic = gc.kind != "p-norm"
    if quadratic and box:
        raise UnsupportedError("squared costs are supported on the whole space only")
    A, B = instance.loss.slopes, instance.loss.intercepts
    V = instance.v_hat
    mu = instance.weights
    n, K, d = V.shape[0], A.shape[0], A.shape[1]
    nkd = n * K * d if box else 0
    blocks = [("lambda", 1), ("t", 1), ("eta", n), ("p", n), ("xi", nkd), ("omega", nkd), ("s", nkd)]
    off = {}
    pos = 0
    for name, size in blocks:
        off[name] = pos
        pos += size
    LAM, T = off["lambda"], off["t"]
    eta = lambda i: off["eta"] + i
    p = lambda i: off["p"] + i
    blk = lambda name, i, k, j: off[name] + (i * K + k) * d + j

    cons = []
    cons.append({"family": "nonnegative", "type": "nonnegative", "vars": [LAM]})
    cons.append({"family": "nonnegative", "type": "nonnegative", "vars": [eta(i) for i in range(n)]})
    if box:
        lo, hi = instance.value_domain.lower(), instance.value_domain.upper()
        for i in range(n):
            for k in range(K):
                for j in range(d):
                    # xi - omega = -a
                    cons.append({"family": "slope-split", "type": "linear", "sense": "==", "atom": i, "piece": k,
                                 "expr": _aff([(blk("xi", i, k, j), 1.0), (blk("omega", i, k, j), -1.0)], A[k, j])})
        for i in range(n):
            for k in range(K):
                for j in range(d):
                    for bound in (lo[j], hi[j]):
                        # omega*bound <= s
                        cons.append({"family": "support-epigraph", "type": "linear", "sense": "<=", "atom": i,
                                     "piece": k, "expr": _aff([(blk("omega", i, k, j), bound), (blk("s", i, k, j), -1.0)])})
    for i in range(n):
        for k in range(K):
            if box:
                coeffs = [(blk("s", i, k, j), 1.0) for j in range(d)]
                coeffs += [(blk("xi", i, k, j), -V[i, j]) for j in range(d)]
                coeffs.append((p(i), -1.0))
                expr = _aff(coeffs, B[k])
            else:
                expr = _aff([(p(i), -1.0)], float(A[k] @ V[i] + B[k]))
            cons.append({"family": "majorization", "type": "linear", "sense": "<=", "atom": i, "piece": k, "expr": expr})
    q = _q_label(gc.dual_exponent) if not quadratic else None
    free = gc.free_mask(d)
    for i in range(n):
        for k in range(K):
            if quadratic:
                # ||a_free||^2 <= 4*theta1*lam*(p_i - a.v_hat - b): x1 = 2*theta1*lam, x2 = p_i - c
                c_ik = float(A[k] @ V[i] + B[k])
                cons.append({"family": "quadratic-offset", "type": "rotated-cone", "atom": i, "piece": k,
                             "x1": _aff([(LAM, 2.0 * t1)]), "x2": _aff([(p(i), 1.0)], -c_ik),
                             "x3": [_aff([], float(a)) for a in A[k][free]]})
            elif box:
                cons.append({"family": "norm-bound", "type": "norm-bound", "atom": i, "piece": k, "q": q,
                             "vector": [_aff([(blk("xi", i, k, j), 1.0)]) for j in range(d)],
                             "bound": _aff([(LAM, t1)])})
            else:
                cons.append({"family": "norm-bound", "type": "norm-bound", "atom": i, "piece": k, "q": q,
                             "vector": [_aff([], float(-a)) for a in A[k]], "bound": _aff([(LAM, t1)])})
    cons.append({"family": "aggregate", "type": "linear", "sense": "<=",
                 "expr": _aff([(eta(i), float(mu[i])) for i in range(n)] + [(LAM, -t2)])})
    for i in range(n):
        cons.append({"family": "exp-cone", "type": "exp-cone", "atom": i,
                     "args": [_aff([(eta(i), 1.0)]), _aff([(LAM, t2)]), _aff([(p(i), 1.0), (T, -1.0)])]})
    order = {f: r for r, f in enumerate(FAMILY_ORDER)}
    cons.sort(key=lambda c: order[c["family"]])  # stable: atom/piece order kept within a family
    meta = {
        "n": n,
        "pieces": K,
        "dim": d,
        "domain": "box" if box else "full-space",
        "ground_cost": {"kind": gc.kind, "p": _q_label(gc.p), "label_indices": list(gc.label_indices)},
        "theta1": t1,
        "theta2": t2,
        "radius": instance.radius,
        "weights": [float(w) for w in mu],
    }
    if not box:
        meta["omega"] = "fixed at zero: the support function of the whole space is finite only there"
        meta["xi"] = "fixed at -a_k by the conjugate of the affine piece"
    return ConicProgram(blocks, _aff([(LAM, instance.radius), (T, 1.0)]), cons, meta)


# --------------------------------------------------------------------------- serialization


def serialize_conic(program: ConicProgram) -> str:
    """Canonical JSON text (sorted keys, fixed separators, shortest float repr)."""
    return json.dumps(program.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def parse_conic(document) -> ConicProgram:
    data = json.loads(document) if isinstance(document, (str, bytes)) else document
    if data.get("format") != FORMAT_NAME or data.get("version") != FORMAT_VERSION:
        raise InputError("not an otdro-conic version 1 document")
    allowed = {"format", "version", "sense", "variables", "objective", "constraints", "metadata"}
    extra = set(data) - allowed
    if extra:
        raise InputError(f"unknown fields in conic document: {sorted(extra)}")
    if data.get("sense") != "minimize":
        raise InputError("conic documents are minimization problems")
    blocks = [(v["name"], int(v["size"])) for v in data["variables"]]
    return ConicProgram(blocks, data["objective"], list(data["constraints"]), dict(data.get("metadata", {})))


# --------------------------------------------------------------------------- verification


@dataclass
class VerificationReport:
    violations: list
    objective_gap: float
    skipped: bool = False
    note: str = ""
    point: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return not self.skipped and not self.violations and self.objective_gap <= FEAS_TOL

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "skipped": self.skipped,
            "note": self.note,
            "objective_gap": self.objective_gap,
            "violations": [{"index": i, "family": f, "amount": a} for i, f, a in self.violations],
        }


def _box_slopes(a, v_hat, lam_t1, lo, hi, p):
    """Slope split ``xi`` minimizing ``sigma_box(a + xi) - xi.v_hat`` over ``||xi||_q <= lam_t1``."""
    if p == 1.0:
        return np.clip(-a, -lam_t1, lam_t1)
    if math.isinf(p):
        # q = 1: spend the budget on coordinates with the largest unit benefit
        benefit = np.where(a > 0, hi - v_hat, np.where(a < 0, v_hat - lo, 0.0))
        xi = np.zeros_like(a)
        left = lam_t1
        for j in sorted(range(a.size), key=lambda j: (-benefit[j], j)):
            if left <= 0 or a[j] == 0:
                continue
            step = min(abs(a[j]), left)
            xi[j] = -np.sign(a[j]) * step
            left -= step
        return xi
    raise UnsupportedError("certificate points on a box need p in {1, inf}")


def certificate_point(program: ConicProgram, certificate: DualCertificate, instance: LiftedInstance) -> np.ndarray:
    """Primal point of the cone program built from a dual certificate."""
    cost = instance.lifted_cost
    gc, t1, t2 = cost.ground_cost, cost.theta1, cost.theta2
    lam = certificate.lambda_star
    box = (instance.value_domain.lower(), instance.value_domain.upper()) if instance.value_domain.v_constrained else None
    pv = transform_values(instance.loss, gc, lam * t1, instance.v_hat, box)
    t = certificate.objective - lam * instance.radius
    eta = lam * t2 * np.exp((pv - t) / (lam * t2))
    values = {"lambda": [lam], "t": [t], "eta": eta, "p": pv}
    if box is not None:
        A, B = instance.loss.slopes, instance.loss.intercepts
        n, K, d = instance.v_hat.shape[0], A.shape[0], A.shape[1]
        xi = np.zeros((n, K, d))
        for i in range(n):
            for k in range(K):
                xi[i, k] = _box_slopes(A[k], instance.v_hat[i], lam * t1, box[0], box[1], gc.p)
        omega = xi + A[None, :, :]
        s = np.maximum(omega * box[0], omega * box[1])
        values.update(xi=xi.ravel(), omega=omega.ravel(), s=s.ravel())
    return program.pack(values)


def verify_certificate(program: ConicProgram, certificate: DualCertificate, instance: LiftedInstance,
                       tol: float = FEAS_TOL) -> VerificationReport:
    """Check the cone program at the point implied by a KL-interpolated certificate.

    Builds ``lam``, ``t = objective - lam*r``, ``p_i = l_{lam*theta1}(v_hat_i)``
    and ``eta_i = lam*theta2*exp((p_i - t)/(lam*theta2))`` (plus box slope
    variables) and reports every row violated by more than ``tol``.
    """
    lam = certificate.lambda_star
    if instance.radius == 0 or not math.isfinite(lam) or lam == 0.0 or certificate.at_lambda_zero:
        return VerificationReport([], 0.0, True, "boundary case (zero radius or multiplier at 0 or +inf) skipped")
    try:
        x = certificate_point(program, certificate, instance)
    except UnsupportedError as exc:
        return VerificationReport([], 0.0, True, str(exc))
    if not np.all(np.isfinite(x)):
        return VerificationReport([(-1, "point", math.inf)], math.inf, False, "certificate point is not finite", x)
    gap = abs(program.objective_value(x) - certificate.objective)
    return VerificationReport(program.violations(x, tol), gap, False, "", x)
