"""Dual solvers for worst-case expectations over lifted ambiguity sets.

All duals reduce to a search over the transport multiplier ``lam`` on a log
scale, with the inner pieces in closed form:

* interpolated cost with KL:  ``lam*r + lam*t2*log E exp(l_{lam*t1}(V)/(lam*t2))``
* interpolated cost, general phi:  ``lam*r + min_a a + lam*t2*E phi*((l_{lam*t1}(V) - a)/(lam*t2))``
* Wasserstein:  ``lam*r + E l_lam(V)``
* Sinkhorn:  ``lam*r_bar + lam*eps*sum_i mu_i log sum_j kappa_ij exp(l(z_j)/(lam*eps))``

where ``l_lam(v_hat) = sup_v l(v) - lam*d(v, v_hat)`` is the d-transform.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .core import (
    DualCertificate,
    GroundCost,
    InfeasibleError,
    InputError,
    LiftedInstance,
    NumericalError,
    PiecewiseAffineLoss,
    TransportRecord,
    UnboundedError,
    UnsupportedError,
    WorstCaseCoupling,
    lattice_points,
)
from .divergences import EntropyFunction, KullbackLeibler

log = logging.getLogger(__name__)

INF = math.inf
LAMBDA_MIN = 1e-10
LAMBDA_MAX = 1e10
GOLDEN_TOL = 1e-10
GOLDEN_MAX_ITER = 200
TIE_TOL = 1e-12


# --------------------------------------------------------------------------- d-transform


@dataclass(frozen=True, eq=False)
class DTransformResult:
    """Value of ``sup_v l(v) - lam*d(v, v_hat)`` with its maximizers.

    ``candidates`` lists tied maximizers (lexicographically sorted) and
    ``maximizer`` is the first of them.  ``ray``, when present, is a unit
    direction ``u`` such that every ``v_hat + t*u`` with ``t >= 0`` is also a
    maximizer (``d(v_hat + t*u, v_hat) = t``); this happens for norm costs at
    the critical multiplier.
    """

    value: float
    maximizer: np.ndarray | None
    method: str
    candidates: tuple[np.ndarray, ...] = ()
    ray: np.ndarray | None = None


def _dual_norm(a: np.ndarray, q: float) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(a), ord=q, axis=-1)


def _dual_direction(a: np.ndarray, p: float) -> np.ndarray:
    """Unit p-norm vector ``u`` with ``a.u = ||a||_q``."""
    if p == 1.0:
        j = int(np.argmax(np.abs(a)))
        u = np.zeros_like(a)
        u[j] = np.sign(a[j])
        return u
    if math.isinf(p):
        return np.sign(a)
    q = p / (p - 1.0)
    nq = np.linalg.norm(a, ord=q)
    return np.sign(a) * np.abs(a) ** (q - 1.0) / nq ** (q - 1.0)


def _box(box):
    if box is None:
        return None
    lo, hi = box
    return np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float))


def _unbounded_directions(loss, cost: GroundCost):
    """Whether some piece has a nonzero slope in a movable coordinate."""
    free = cost.free_mask(loss.dim)
    return np.any(loss.slopes[:, free] != 0.0)


def _piece_candidates_box_sq(a, v_hat, lam, free, lo, hi):
    v = v_hat.copy()
    if lam > 0:
        v[free] = np.clip(v_hat[free] + a[free] / (2.0 * lam), lo[free], hi[free])
    else:
        v[free] = np.where(a[free] > 0, hi[free], np.where(a[free] < 0, lo[free], v_hat[free]))
    return [v]


def _piece_candidates_box_p1(a, v_hat, lam, lo, hi):
    """Maximizers of ``a.v - lam*||v - v_hat||_1`` on a box (both ends of any flat segment)."""
    target = np.where(a > 0, hi, np.where(a < 0, lo, v_hat))
    gain = np.abs(a) - lam
    base = np.where(gain > TIE_TOL * (1 + lam), target, v_hat)
    tied = np.nonzero((np.abs(gain) <= TIE_TOL * (1 + lam)) & (a != 0) & (target != v_hat))[0]
    out = [base]
    if tied.size:
        far = base.copy()
        far[tied] = target[tied]
        out.append(far)
    return out


def _piece_candidates_box_pinf(a, v_hat, lam, lo, hi):
    """Maximizers of ``a.v - lam*||v - v_hat||_inf`` on a box.

    The best move has the form ``v_j = v_hat_j + sign(a_j)*min(rho, D_j)``,
    concave piecewise linear in ``rho`` with breakpoints at the distances ``D_j``.
    """
    sgn = np.sign(a)
    dist = np.where(a > 0, hi - v_hat, np.where(a < 0, v_hat - lo, 0.0))
    rhos = np.unique(np.concatenate([[0.0], dist[a != 0]]))
    vals = np.array([np.sum(np.abs(a) * np.minimum(r, dist)) - lam * r for r in rhos])
    best = vals.max()
    tied = rhos[vals >= best - TIE_TOL * (1 + abs(best))]
    return [v_hat + sgn * np.minimum(r, dist) for r in tied]


def d_transform(
    loss: PiecewiseAffineLoss,
    ground_cost: GroundCost,
    lam: float,
    v_hat,
    box=None,
    method: str = "auto",
    grid_step: float | None = None,
) -> DTransformResult:
    """``sup_v l(v) - lam*d(v, v_hat)`` over the whole space or a box ``(lower, upper)``.

    Closed forms: squared costs on the whole space (per piece ``a.v_hat + b +
    ||a_free||^2/(4 lam)``) or on a box (coordinate clipping); norm costs on the
    whole space (finite iff every ``||a_k||_q <= lam``) or on a box for
    ``p in {1, inf}``.  Other boxes, or ``method="grid"``, scan a lattice.
    """
    if not lam >= 0:
        raise InputError("lam must be nonnegative")
    v_hat = np.atleast_1d(np.asarray(v_hat, dtype=float))
    if v_hat.shape != (loss.dim,):
        raise InputError("v_hat has the wrong dimension")
    box = _box(box)
    if method == "grid" or (
        box is not None and ground_cost.kind == "p-norm" and ground_cost.p not in (1.0, math.inf)
    ):
        return _d_transform_grid(loss, ground_cost, lam, v_hat, box, grid_step)

    A, B = loss.slopes, loss.intercepts
    cands: list[tuple[float, np.ndarray]] = []
    ray = None
    if ground_cost.kind == "p-norm":
        meth = "closed-form-norm"
        if box is None:
            q = ground_cost.dual_exponent
            norms = _dual_norm(A, q)
            if lam == 0.0 and np.any(norms > 0) or np.any(norms > lam * (1.0 + TIE_TOL)):
                return DTransformResult(INF, None, meth)
            vals = A @ v_hat + B
            top = vals.max()
            cands = [(top, v_hat.copy())]
            steep = np.nonzero(
                (norms >= lam * (1.0 - TIE_TOL)) & (norms > 0) & (vals >= top - TIE_TOL * (1 + abs(top)))
            )[0]
            if steep.size:
                ray = _dual_direction(A[steep[0]], ground_cost.p)
        else:
            lo, hi = box
            for a, b in zip(A, B):
                pts = (
                    _piece_candidates_box_p1(a, v_hat, lam, lo, hi)
                    if ground_cost.p == 1.0
                    else _piece_candidates_box_pinf(a, v_hat, lam, lo, hi)
                )
                cands += [(a @ v + b - lam * ground_cost(v, v_hat), v) for v in pts]
    else:
        meth = "closed-form-quadratic"
        free = ground_cost.free_mask(loss.dim)
        if box is None:
            af = A[:, free]
            if lam == 0.0:
                if np.any(af != 0):
                    return DTransformResult(INF, None, meth)
                cands = [(a @ v_hat + b, v_hat.copy()) for a, b in zip(A, B)]
            else:
                for a, b in zip(A, B):
                    v = v_hat.copy()
                    v[free] += a[free] / (2.0 * lam)
                    cands.append((a @ v_hat + b + a[free] @ a[free] / (4.0 * lam), v))
        else:
            lo, hi = box
            for a, b in zip(A, B):
                for v in _piece_candidates_box_sq(a, v_hat, lam, free, lo, hi):
                    cands.append((a @ v + b - lam * ground_cost(v, v_hat), v))
    best = max(c[0] for c in cands)
    tied = [v for val, v in cands if val >= best - TIE_TOL * (1 + abs(best))]
    tied = sorted({tuple(v.tolist()) for v in tied})
    pts = tuple(np.array(t) for t in tied)
    return DTransformResult(float(best), pts[0], meth, pts, ray)


def _d_transform_grid(loss, ground_cost, lam, v_hat, box, grid_step) -> DTransformResult:
    if box is None:
        raise InputError("grid d-transform needs a box")
    lo, hi = box
    step = grid_step or float(np.max(hi - lo)) / 200.0
    free = ground_cost.free_mask(loss.dim) if ground_cost.kind != "p-norm" else np.ones(loss.dim, bool)
    lo_f = np.where(free, lo, v_hat)
    hi_f = np.where(free, hi, v_hat)
    pts = lattice_points(lo_f, hi_f, step)
    pts = np.vstack([pts, v_hat[None, :]])
    d = np.array([ground_cost(v, v_hat) for v in pts])
    vals = np.max(pts @ loss.slopes.T + loss.intercepts, axis=1) - np.where(d == 0, 0.0, lam * d)
    best = vals.max()
    idx = np.nonzero(vals >= best - TIE_TOL * (1 + abs(best)))[0]
    tied = sorted({tuple(pts[i].tolist()) for i in idx})
    cands = tuple(np.array(t) for t in tied)
    return DTransformResult(float(best), cands[0], "grid", cands)


def transform_values(loss, ground_cost: GroundCost, lam: float, v_hats: np.ndarray, box=None) -> np.ndarray:
    """``l_lam(v_hat_i)`` for every row of ``v_hats`` (vectorized where closed form allows)."""
    v_hats = np.atleast_2d(v_hats)
    A, B = loss.slopes, loss.intercepts
    if box is None and ground_cost.kind == "p-norm":
        norms = _dual_norm(A, ground_cost.dual_exponent)
        if (lam == 0.0 and np.any(norms > 0)) or np.any(norms > lam * (1.0 + TIE_TOL)):
            return np.full(v_hats.shape[0], INF)
        return np.max(v_hats @ A.T + B, axis=1)
    if box is None:
        free = ground_cost.free_mask(loss.dim)
        sq = np.sum(A[:, free] ** 2, axis=1)
        if lam == 0.0:
            if np.any(sq > 0):
                return np.full(v_hats.shape[0], INF)
            return np.max(v_hats @ A.T + B, axis=1)
        return np.max(v_hats @ A.T + B + sq / (4.0 * lam), axis=1)
    if ground_cost.kind != "p-norm":
        lo, hi = _box(box)
        free = ground_cost.free_mask(loss.dim)
        out = np.full(v_hats.shape[0], -INF)
        for a, b in zip(A, B):
            if lam > 0:
                v = np.where(free, np.clip(v_hats + a / (2.0 * lam), lo, hi), v_hats)
            else:
                v = np.where(free, np.where(a > 0, hi, np.where(a < 0, lo, v_hats)), v_hats)
            diff = np.where(free, v - v_hats, 0.0)
            out = np.maximum(out, v @ a + b - lam * np.sum(diff**2, axis=1))
        return out
    return np.array([d_transform(loss, ground_cost, lam, vh, box).value for vh in v_hats])


# --------------------------------------------------------------------------- golden section


@dataclass
class LineSearchResult:
    lam: float
    value: float
    iterations: int
    at_lower_edge: bool
    notes: list[str] = field(default_factory=list)


def golden_section_log(fn, lam_lo: float = LAMBDA_MIN, lam_hi: float = LAMBDA_MAX, tol: float = GOLDEN_TOL,
                       max_iter: int = GOLDEN_MAX_ITER, coarse: int = 41) -> LineSearchResult:
    """Minimize ``fn(lam)`` over ``[lam_lo, lam_hi]`` by golden section in ``log lam``.

    A coarse log grid picks the bracket around the best sample; golden
    section then shrinks it to width ``tol`` (in ``log lam``).  ``fn`` may
    return ``inf`` on part of the range.  A separate 16-point grid guards
    against non-unimodal objectives.
    """
    a, b = math.log(lam_lo), math.log(lam_hi)
    f = lambda x: fn(math.exp(x))
    xs = np.linspace(a, b, coarse)
    fs = np.array([f(x) for x in xs])
    if not np.any(np.isfinite(fs)):
        raise UnboundedError("dual objective is +inf on the whole multiplier range")
    k = int(np.argmin(fs))
    lo, hi = xs[max(k - 1, 0)], xs[min(k + 1, coarse - 1)]
    if not math.isfinite(f(lo)):
        # move the left end inside the finite region
        left, right = lo, xs[k]
        for _ in range(200):
            mid = 0.5 * (left + right)
            if math.isfinite(f(mid)):
                right = mid
            else:
                left = mid
        lo = right
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = hi - g * (hi - lo), lo + g * (hi - lo)
    fc, fd = f(c), f(d)
    it = 0
    while hi - lo > tol and it < max_iter:
        it += 1
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - g * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + g * (hi - lo)
            fd = f(d)
    best = min([(fc, c), (fd, d), (f(lo), lo), (f(hi), hi)])
    res = LineSearchResult(math.exp(best[1]), float(best[0]), it, best[1] <= a + tol)
    if hi - lo > tol:
        res.notes.append(f"golden section stopped after {it} iterations with bracket {hi - lo:.3g}")
    check = min(f(x) for x in np.linspace(a, b, 16))
    if res.value > check + 1e-8:
        msg = f"golden-section value {res.value:.12g} exceeds 16-point grid minimum {check:.12g}"
        log.warning(msg)
        res.notes.append(msg)
    return res


# --------------------------------------------------------------------------- helpers


def _box_of(instance: LiftedInstance):
    dom = instance.value_domain
    if dom.v_constrained:
        return dom.lower(), dom.upper()
    return None


def _lambda_floor(loss, cost: GroundCost, scale: float, box) -> float:
    """Smallest ``lam`` with ``l_{lam*scale}`` finite (norm costs on the whole space)."""
    if box is None and cost.kind == "p-norm":
        return float(np.max(_dual_norm(loss.slopes, cost.dual_exponent))) / scale
    return 0.0


def _sup_limit(loss, cost, v_hats, box) -> np.ndarray:
    """``l_0(v_hat_i)``: the supremum of the loss over points reachable from each atom."""
    return transform_values(loss, cost, 0.0, v_hats, box)


def _search(objective, floor: float, limit_value: float):
    """Minimize over ``lam >= floor``; returns ``(lam, value, iterations, notes, at_zero)``."""
    lo = max(floor, LAMBDA_MIN)
    res = golden_section_log(objective, lo, LAMBDA_MAX)
    if floor > LAMBDA_MIN:
        f0 = objective(floor)
        if f0 <= res.value:
            return floor, f0, res.iterations, res.notes, False
    if res.at_lower_edge and floor == 0.0 and math.isfinite(limit_value) and limit_value <= res.value:
        return 0.0, float(limit_value), res.iterations, res.notes, True
    return res.lam, res.value, res.iterations, res.notes, False


def _interp_parts(instance: LiftedInstance):
    cost = instance.lifted_cost
    if getattr(cost, "kind", None) != "interpolated":
        raise InputError("this solver needs an instance from build_interpolated")
    if np.any(instance.w_hat != 1.0):
        raise InputError("interpolated instances carry nominal weight coordinate 1")
    return cost.ground_cost, cost.phi, cost.theta1, cost.theta2


@dataclass
class _AtomPlan:
    """Candidate targets for one nominal atom under the optimal multiplier."""

    index: int
    w: float
    points: list  # list of (v, d)
    ray: np.ndarray | None
    far: tuple | None = None  # (direction, gap) for a near-maximizing ray


FAR_MASS_GAP = 1e-10


KINK_STEP = 1e-8
KINK_TOL = 1e-9


def _plans(instance, cost: GroundCost, lam_t1: float, ws: np.ndarray, box) -> list[_AtomPlan]:
    """Tied maximizers per atom at ``lam_t1``.

    The multiplier is only known to the line-search tolerance, so maximizers
    just left and right of it are pooled too; near a kink these are the two
    faces whose mixture meets the budget.  A pooled point is kept when its
    objective at ``lam_t1`` is within ``KINK_TOL`` (relative) of the best.
    """
    loss = instance.loss
    plans = []
    for i, vh in enumerate(instance.v_hat):
        res = d_transform(loss, cost, lam_t1, vh, box)
        pool = list(res.candidates)
        if lam_t1 > 0:
            for lam in (lam_t1 * (1.0 - KINK_STEP), lam_t1 * (1.0 + KINK_STEP)):
                side = d_transform(loss, cost, lam, vh, box)
                if math.isfinite(side.value):
                    pool += list(side.candidates)
        scored = [(loss(v) - lam_t1 * cost(v, vh), v) for v in pool]
        best = max(sc for sc, _ in scored)
        keep = {tuple(v.tolist()): v for sc, v in scored if sc >= best - KINK_TOL * (1 + abs(best))}
        pts = [(v, cost(v, vh)) for v in keep.values()]
        pts.sort(key=lambda p: (p[1], tuple(p[0].tolist())))
        far = None
        if res.ray is None and box is None and cost.kind == "p-norm":
            norms = _dual_norm(loss.slopes, cost.dual_exponent)
            steep = np.nonzero((norms >= lam_t1 * (1.0 - TIE_TOL)) & (norms > 0))[0]
            if steep.size:
                gaps = loss(vh) - (loss.slopes[steep] @ vh + loss.intercepts[steep])
                k = int(np.argmin(gaps))
                far = (_dual_direction(loss.slopes[steep[k]], cost.p), float(gaps[k]))
        plans.append(_AtomPlan(i, float(ws[i]), pts, res.ray, far))
    return plans


def _records_from_plans(instance, plans, theta1: float, fixed_cost: float, budget: float, growth):
    """Turn per-atom candidates into transport records that exhaust the budget.

    Each atom starts at its cheapest maximizer.  If budget remains, atoms are
    visited in index order and part of their mass is moved to the most
    distant tied maximizer (or along a maximizing ray) until the expected
    cost equals ``budget``.  Returns ``(records, budget_used)``.
    """
    weights = instance.weights
    base = fixed_cost + sum(weights[p.index] * theta1 * p.w * p.points[0][1] for p in plans)
    need = budget - base
    recs = []
    for p in plans:
        i = p.index
        mi = weights[i]
        vh = instance.v_hat[i]
        v0, d0 = p.points[0]
        unit = mi * theta1 * p.w
        if need > 0 and unit > 0 and p.ray is not None:
            t = need / unit
            recs.append((i, vh + (d0 + t) * p.ray if d0 == 0 else v0, p.w, mi))
            need = 0.0
            continue
        if need > 0 and unit > 0 and len(p.points) > 1 and p.points[-1][1] > d0:
            v1, d1 = p.points[-1]
            frac = min(1.0, need / (unit * (d1 - d0)))
            need -= frac * unit * (d1 - d0)
            if frac < 1.0:
                recs.append((i, v0, p.w, mi * (1.0 - frac)))
            recs.append((i, v1, p.w, mi * frac))
            continue
        recs.append((i, v0, p.w, mi))
    if need > 0:
        # the supremum is not attained: send a sliver of mass far along the
        # steepest direction, losing at most FAR_MASS_GAP against the dual
        for p in plans:
            if p.far is None or p.w <= 0:
                continue
            u, gap = p.far
            i = p.index
            m = weights[i] * min(1.0, FAR_MASS_GAP / (p.w * gap)) if gap > 0 else weights[i]
            pos = next(k for k, rec in enumerate(recs) if rec[0] == i)
            _, v0, w0, m0 = recs[pos]
            t = need / (m * theta1 * p.w)
            recs[pos : pos + 1] = ([(i, v0, w0, m0 - m)] if m0 > m else []) + [(i, instance.v_hat[i] + t * u, w0, m)]
            need = 0.0
            break
    records = tuple(
        TransportRecord(instance.v_hat[i], weights[i], v, w, mass) for i, v, w, mass in recs
    )
    used = math.fsum(
        r.mass * (theta1 * r.weight * _safe_cost(instance, r) ) for r in records
    ) + growth
    return records, used


def _safe_cost(instance, rec):
    cost = instance.lifted_cost.ground_cost
    return cost(rec.perturbed, rec.nominal)


def _finish(instance, records, cert_kwargs, budget_used) -> WorstCaseCoupling:
    primal = math.fsum(r.mass * instance.loss(r.perturbed) * r.weight for r in records)
    cert = DualCertificate(**cert_kwargs)
    return WorstCaseCoupling(records, cert, primal, budget_used)


def _zero_radius(instance, method: str) -> WorstCaseCoupling:
    risk = instance.nominal_risk()
    records = tuple(
        TransportRecord(v, m, v, w, m) for v, w, m in zip(instance.v_hat, instance.w_hat, instance.weights)
    )
    cert = DualCertificate(INF, 0.0, risk, 0, 0.0, method, True, False, ("zero radius: the ball is the nominal point",))
    return WorstCaseCoupling(records, cert, risk, 0.0)


# --------------------------------------------------------------------------- KL-interpolated


def kl_interpolated_objective(instance: LiftedInstance, lam: float) -> float:
    """``lam*r + lam*t2*log E exp(l_{lam*t1}(V_hat)/(lam*t2))`` (``+inf`` where undefined)."""
    cost, _, t1, t2 = _interp_parts(instance)
    return _kl_obj(instance, cost, t1, t2, _box_of(instance), lam)


def _kl_obj(instance, cost, t1, t2, box, lam):
    if lam <= 0:
        return INF
    y = transform_values(instance.loss, cost, lam * t1, instance.v_hat, box)
    if not np.all(np.isfinite(y)):
        return INF
    top = y.max()
    x = (y - top) / (lam * t2)
    lse = math.log1p(float(instance.weights @ np.expm1(x)))
    return lam * instance.radius + lam * t2 * lse + top


def solve_kl_interpolated(instance: LiftedInstance) -> WorstCaseCoupling:
    """Worst case over the interpolated KL/transport ball via the one-dimensional dual."""
    cost, phi, t1, t2 = _interp_parts(instance)
    if not isinstance(phi, KullbackLeibler):
        raise InputError("solve_kl_interpolated needs phi = kullback-leibler")
    if instance.radius == 0:
        return _zero_radius(instance, "kl-interpolated")
    box = _box_of(instance)
    limit = float(np.max(_sup_limit(instance.loss, cost, instance.v_hat, box)))
    floor = _lambda_floor(instance.loss, cost, t1, box)
    lam, val, it, notes, at_zero = _search(lambda l: _kl_obj(instance, cost, t1, t2, box, l), floor, limit)
    cert = dict(lambda_star=lam, alpha_star=0.0, objective=val, iterations=it,
                tolerance_achieved=GOLDEN_TOL, method="kl-interpolated", at_lambda_zero=at_zero,
                notes=tuple(notes))
    return extract_worst_case(DualCertificate(**cert), instance)


def _feasible_extraction(build, lam: float, budget: float):
    """Run ``build(lam) -> (records, used, extra)``; if the plan overspends the
    budget (``lam`` sits a hair left of the optimum), raise ``lam`` by bisection
    until it does not.  Dual value only grows by O(line-search tolerance)."""
    out = build(lam)
    if out[1] <= budget * (1.0 + 1e-13) + 1e-15:
        return lam, out
    hi = lam * (1.0 + 1e-7)
    for _ in range(60):
        if build(hi)[1] <= budget:
            break
        hi = lam + 4.0 * (hi - lam)
    else:
        return lam, out
    lo = lam
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if build(mid)[1] <= budget:
            hi = mid
        else:
            lo = mid
    return hi, build(hi)


def _extract_interpolated(cert: DualCertificate, instance: LiftedInstance, phi: EntropyFunction) -> WorstCaseCoupling:
    cost, _, t1, t2 = _interp_parts(instance)
    box = _box_of(instance)
    lam = cert.lambda_star
    r = instance.radius
    mu = instance.weights
    notes = list(cert.notes)
    if cert.at_lambda_zero or lam == 0.0:
        y = _sup_limit(instance.loss, cost, instance.v_hat, box)
        top = y.max()
        at_top = y >= top - TIE_TOL * (1 + abs(top))
        ws = np.where(at_top, 1.0 / mu[at_top].sum(), 0.0)
        alpha = float(top)
        plans = _plans(instance, cost, 0.0, ws, box)
        growth = t2 * math.fsum(mu * np.array([phi(w) for w in ws]))
        records, used = _records_from_plans(instance, plans, t1, growth, -INF, growth)
    else:

        def build(lam_x):
            y = transform_values(instance.loss, cost, lam_x * t1, instance.v_hat, box)
            if isinstance(phi, KullbackLeibler):
                top = y.max()
                alpha = lam_x * t2 * math.log1p(float(mu @ np.expm1((y - top) / (lam_x * t2)))) + top
                ws = np.exp((y - alpha) / (lam_x * t2))
            else:
                alpha = _inner_alpha(phi, y, mu, lam_x * t2)
                ws = np.asarray(phi.conjugate_derivative((y - alpha) / (lam_x * t2)), dtype=float)
            growth = t2 * math.fsum(mu * np.array([phi(w) for w in ws]))
            plans = _plans(instance, cost, lam_x * t1, ws, box)
            records, used = _records_from_plans(instance, plans, t1, growth, r, growth)
            return records, used, alpha

        lam_x, (records, used, alpha) = _feasible_extraction(build, lam, r)
        if lam_x != lam:
            notes.append(f"records extracted at multiplier {lam_x!r} to stay within the budget")
    c = dict(cert.__dict__)
    c["alpha_star"] = float(alpha)
    c["notes"] = tuple(notes)
    return _finish(instance, records, c, used)


# --------------------------------------------------------------------------- general phi


def _inner_alpha(phi: EntropyFunction, y: np.ndarray, mu: np.ndarray, scale: float) -> float:
    """Root of ``E (phi*)'((y - a)/scale) = 1`` in ``a``.

    The left side decreases in ``a``, is at most one at ``a = max y`` and at
    least one at ``a = min y`` (or is infinite where ``(y - a)/scale`` reaches
    the recession slope).
    """
    top, bottom = float(y.max()), float(y.min())
    lo = bottom
    if math.isfinite(phi.recession):
        lo = max(lo, top - scale * phi.recession)

    def g(a):
        s = (y - a) / scale
        with np.errstate(over="ignore"):
                val = float(mu @ np.asarray(phi.conjugate_derivative(s), dtype=float)) - 1.0
        if not math.isfinite(val):
            return 1e300
        return val

    if g(top) >= 0 or top - lo <= 1e-15 * (1.0 + abs(top)):
        # the second branch: scale is negligible next to the loss values
        return top
    glo = g(lo)
    if glo <= 0:
        if glo == 0:
            return lo
        raise NumericalError("inner multiplier bracket does not change sign", {"lo": lo, "hi": top, "g_lo": glo})
    try:
        return optimize.brentq(g, lo, top, xtol=1e-14 * (1 + abs(top)), rtol=4 * np.finfo(float).eps, maxiter=500)
    except (RuntimeError, ValueError) as exc:
        raise NumericalError(f"inner multiplier search failed: {exc}", {"lo": lo, "hi": top}) from exc


def general_phi_objective(instance: LiftedInstance, lam: float) -> float:
    """``lam*r + min_a {a + lam*t2*E phi*((l_{lam*t1} - a)/(lam*t2))}``."""
    cost, phi, t1, t2 = _interp_parts(instance)
    return _phi_obj(instance, cost, phi, t1, t2, _box_of(instance), lam)


def _phi_obj(instance, cost, phi, t1, t2, box, lam):
    if lam <= 0:
        return INF
    y = transform_values(instance.loss, cost, lam * t1, instance.v_hat, box)
    if not np.all(np.isfinite(y)):
        return INF
    scale = lam * t2
    a = _inner_alpha(phi, y, instance.weights, scale)
    with np.errstate(over="ignore"):
        conj = np.asarray(phi.conjugate((y - a) / scale), dtype=float)
    if not np.all(np.isfinite(conj)):
        return INF
    return lam * instance.radius + a + scale * float(instance.weights @ conj)


def solve_general_phi(instance: LiftedInstance, phi: EntropyFunction | None = None) -> WorstCaseCoupling:
    """Worst case over an interpolated ball with any catalog entry whose conjugate is differentiable.

    Nested search: golden section over ``log lam`` outside, a root search for
    the first-order condition in ``a`` inside.
    """
    cost, inst_phi, t1, t2 = _interp_parts(instance)
    phi = phi or inst_phi
    if not phi.smooth_conjugate:
        raise UnsupportedError(f"{phi.name}: conjugate has no derivative; the two-dimensional dual does not apply")
    if instance.radius == 0:
        return _zero_radius(instance, "general-phi")
    box = _box_of(instance)
    limit = float(np.max(_sup_limit(instance.loss, cost, instance.v_hat, box)))
    floor = _lambda_floor(instance.loss, cost, t1, box)
    lam, val, it, notes, at_zero = _search(lambda l: _phi_obj(instance, cost, phi, t1, t2, box, l), floor, limit)
    cert = DualCertificate(lam, 0.0, val, it, GOLDEN_TOL, f"general-phi:{phi.name}", True, at_zero, tuple(notes))
    return _extract_interpolated(cert, instance, phi)


def _phi_lift_parts(instance: LiftedInstance):
    cost = instance.lifted_cost
    if getattr(cost, "kind", None) != "phi-identity-guard":
        raise InputError("this solver needs an instance from lift_phi_divergence")
    data = instance.w_hat > 0
    y = np.array([instance.loss(v) for v in instance.v_hat])
    mu = instance.weights[data] * instance.w_hat[data]  # the original nominal weights
    extra_top = float(y[~data].max()) if np.any(~data) else -INF
    return cost.phi, data, y, mu / mu.sum(), extra_top


def _phi_lift_alpha(phi, y_data, mu, extra_top, scale):
    """Inner multiplier with the extra atom's constraint ``a >= l_extra - scale*phi'_inf``."""
    a = _inner_alpha(phi, y_data, mu, scale)
    if math.isfinite(phi.recession):
        a = max(a, extra_top - scale * phi.recession)
    return a


def _phi_lift_obj(instance, parts, lam):
    if lam <= 0:
        return INF
    phi, data, y, mu, extra_top = parts
    a = _phi_lift_alpha(phi, y[data], mu, extra_top, lam)
    with np.errstate(over="ignore"):
        conj = np.asarray(phi.conjugate((y[data] - a) / lam), dtype=float)
    if not np.all(np.isfinite(conj)):
        return INF
    return lam * instance.radius + a + lam * float(mu @ conj)


def phi_lift_objective(instance: LiftedInstance, lam: float) -> float:
    """``lam*r + min_a {a + lam*E phi*((l - a)/lam)}`` subject to ``a >= max l - lam*phi'_inf``."""
    return _phi_lift_obj(instance, _phi_lift_parts(instance), lam)


def solve_phi_lift(instance: LiftedInstance) -> WorstCaseCoupling:
    """Worst case over a generalized phi-divergence ball lifted with the identity guard.

    Atoms cannot move, so the dual is the classic phi-divergence dual on the
    nominal atoms; when ``phi'_inf`` is finite the extra worst-scenario atom
    adds the constraint on ``a`` and absorbs the leftover likelihood mass.
    """
    parts = _phi_lift_parts(instance)
    phi, data, y, mu, extra_top = parts
    if not phi.smooth_conjugate:
        raise UnsupportedError(f"{phi.name}: conjugate has no derivative; use the LP oracle for this lift")
    if instance.radius == 0:
        return _zero_radius(instance, "phi-lift")
    reach = max(float(y[data].max()), extra_top if math.isfinite(phi.recession) else -INF)
    lam, val, it, notes, at_zero = _search(lambda l: _phi_lift_obj(instance, parts, l), 0.0, reach)
    r = instance.radius
    nu, w_hat = instance.weights, instance.w_hat
    idx_data, idx_extra = np.nonzero(data)[0], np.nonzero(~data)[0]

    def build(lam_x):
        if lam_x == 0.0:
            a = reach
            top = y[data] >= reach - TIE_TOL * (1 + abs(reach))
            u = np.where(top, 1.0 / mu[top].sum(), 0.0) if top.any() else np.zeros(mu.size)
        else:
            a = _phi_lift_alpha(phi, y[data], mu, extra_top, lam_x)
            u = np.asarray(phi.conjugate_derivative((y[data] - a) / lam_x), dtype=float)
        leftover = max(0.0, 1.0 - float(mu @ u))
        used = math.fsum(mu * np.array([phi(t) for t in u]))
        recs = [TransportRecord(instance.v_hat[i], nu[i], instance.v_hat[i], w_hat[i] * u[k], nu[i])
                for k, i in enumerate(idx_data)]
        if idx_extra.size:
            # with phi'_inf infinite the extra atom is unreachable and leftover is rounding noise
            finite = math.isfinite(phi.recession)
            w_extra = leftover / nu[idx_extra].sum() if finite else 0.0
            used += phi.recession * leftover if finite else 0.0
            recs += [TransportRecord(instance.v_hat[i], nu[i], instance.v_hat[i], w_extra, nu[i]) for i in idx_extra]
        return tuple(recs), used, a

    if at_zero:
        lam_x, (records, used, alpha) = 0.0, build(0.0)
    else:
        lam_x, (records, used, alpha) = _feasible_extraction(build, lam, r)
        if lam_x != lam:
            notes = list(notes) + [f"records extracted at multiplier {lam_x!r} to stay within the budget"]
    cert = dict(lambda_star=lam, alpha_star=float(alpha), objective=val, iterations=it, tolerance_achieved=GOLDEN_TOL,
                method=f"phi-lift:{phi.name}", at_lambda_zero=at_zero, notes=tuple(notes))
    return _finish(instance, records, cert, used)


# --------------------------------------------------------------------------- Wasserstein


def _wass_parts(instance):
    cost = instance.lifted_cost
    if getattr(cost, "kind", None) != "wasserstein-weight-guard":
        raise InputError("solve_wasserstein needs an instance from lift_wasserstein")
    return cost.ground_cost


def wasserstein_dual(loss, ground_cost: GroundCost, v_hats, weights, radius: float, box=None):
    """``min_{lam >= 0} lam*r + E l_lam(V_hat)`` by golden section; returns ``(lam, value, iters, notes, at_zero)``."""
    v_hats = np.atleast_2d(v_hats)
    weights = np.asarray(weights, dtype=float)

    def obj(lam):
        y = transform_values(loss, ground_cost, lam, v_hats, box)
        if not np.all(np.isfinite(y)):
            return INF
        return lam * radius + math.fsum(weights * y)

    limit_vals = _sup_limit(loss, ground_cost, v_hats, box)
    limit = math.fsum(weights * limit_vals) if np.all(np.isfinite(limit_vals)) else INF
    return _search(obj, _lambda_floor(loss, ground_cost, 1.0, box), limit)


def solve_wasserstein(instance: LiftedInstance) -> WorstCaseCoupling:
    cost = _wass_parts(instance)
    if instance.radius == 0:
        return _zero_radius(instance, "wasserstein")
    box = _box_of(instance)
    lam, val, it, notes, at_zero = wasserstein_dual(
        instance.loss, cost, instance.v_hat, instance.weights, instance.radius, box
    )
    cert = DualCertificate(lam, 0.0, val, it, GOLDEN_TOL, "wasserstein", True, at_zero, tuple(notes))
    return extract_worst_case(cert, instance)


def _extract_wasserstein(cert, instance):
    cost = _wass_parts(instance)
    box = _box_of(instance)
    ws = np.ones(instance.nominal.size)
    notes = list(cert.notes)
    if cert.at_lambda_zero:
        plans = _plans(instance, cost, 0.0, ws, box)
        records, used = _records_from_plans(instance, plans, 1.0, 0.0, -INF, 0.0)
    else:

        def build(lam_x):
            plans = _plans(instance, cost, lam_x, ws, box)
            return (*_records_from_plans(instance, plans, 1.0, 0.0, instance.radius, 0.0), None)

        lam_x, (records, used, _) = _feasible_extraction(build, cert.lambda_star, instance.radius)
        if lam_x != cert.lambda_star:
            notes.append(f"records extracted at multiplier {lam_x!r} to stay within the budget")
    c = dict(cert.__dict__)
    c["notes"] = tuple(notes)
    return _finish(instance, records, c, used)


# --------------------------------------------------------------------------- Sinkhorn


def sinkhorn_objective(kappa: np.ndarray, mu: np.ndarray, losses: np.ndarray, r_bar: float, eps: float, lam: float) -> float:
    if lam <= 0:
        return INF
    with np.errstate(divide="ignore"):
        lk = np.log(kappa)
    top = losses.max()
    rows = logsumexp(lk + (losses - top)[None, :] / (lam * eps), axis=1)
    return lam * r_bar + lam * eps * float(mu @ rows) + top


def solve_sinkhorn(lift_data, loss: PiecewiseAffineLoss) -> WorstCaseCoupling:
    """Worst case over a Sinkhorn ball through the conditional-moment dual.

    ``lift_data`` comes from :func:`otdro.lifting.lift_sinkhorn`.
    """
    r_bar = lift_data.adjusted_radius
    if r_bar < 0:
        raise InfeasibleError(f"adjusted radius {r_bar:.6g} is negative")
    eps = lift_data.reg_epsilon
    kappa = lift_data.kernel_matrix
    mu = lift_data.nominal.weights
    zs = lift_data.reference.atoms
    losses = np.array([loss(z) for z in zs])
    support = kappa > 0
    limit = float(mu @ np.array([losses[s].max() for s in support]))
    if r_bar == 0:
        lam, val, it, notes, at_zero = INF, float(mu @ (kappa @ losses)), 0, ["zero adjusted radius"], False
    else:
        lam, val, it, notes, at_zero = _search(
            lambda l: sinkhorn_objective(kappa, mu, losses, r_bar, eps, l), 0.0, limit
        )
    # per-row tilted kernels
    if math.isinf(lam):
        q = kappa.copy()
        alphas = np.zeros(len(mu))
    elif at_zero or lam == 0.0:
        q = np.zeros_like(kappa)
        for i, s in enumerate(support):
            best = s & (losses >= losses[s].max())
            q[i, best] = kappa[i, best] / kappa[i, best].sum()
        alphas = np.array([losses[s].max() for s in support])
    else:
        with np.errstate(divide="ignore"):
            z = np.log(kappa) + losses[None, :] / (lam * eps)
        lse = logsumexp(z, axis=1)
        q = np.exp(z - lse[:, None])
        alphas = lam * eps * lse
    records = []
    kl_rows = []
    for i in range(kappa.shape[0]):
        kl = 0.0
        for j in np.nonzero(support[i])[0]:
            w = q[i, j] / kappa[i, j]
            nominal = np.concatenate([zs[j], lift_data.nominal.atoms[i]])
            records.append(TransportRecord(nominal, mu[i] * kappa[i, j], nominal, w, mu[i] * kappa[i, j]))
            if q[i, j] > 0:
                kl += q[i, j] * math.log(w)
        kl_rows.append(kl)
    used = eps * math.fsum(mu * np.array(kl_rows))
    primal = math.fsum(rec.mass * rec.weight * losses[j] for rec, j in zip(records, _record_cols(support)))
    cert = DualCertificate(
        lam, _cell_alphas(lift_data.nominal.atoms, alphas), float(val), it, GOLDEN_TOL, "sinkhorn",
        True, at_zero, tuple(notes),
    )
    return WorstCaseCoupling(tuple(records), cert, primal, used)


def _record_cols(support):
    return [j for i in range(support.shape[0]) for j in np.nonzero(support[i])[0]]


def _cell_alphas(atoms, alphas):
    seen = {}
    for z, a in zip(atoms, alphas):
        seen.setdefault(tuple(z.tolist()), float(a))
    return tuple(seen.values())


def _sinkhorn_from_instance(instance: LiftedInstance):
    """Rebuild kernel rows from a lifted Sinkhorn instance (atoms ``(z_j, z_hat, 1)``)."""
    from .core import DiscreteMeasure
    from .lifting import SinkhornLiftData

    d = instance.loss.dim // 2
    cells = instance.sigma_field.cells(instance.v_hat)
    ref_index: dict[tuple, int] = {}
    for v in instance.v_hat:
        ref_index.setdefault(tuple(v[:d].tolist()), len(ref_index))
    ref_atoms = np.array(list(ref_index.keys()))
    n_cells = cells.max() + 1
    kappa = np.zeros((n_cells, len(ref_atoms)))
    zhat = np.zeros((n_cells, d))
    for v, m, c in zip(instance.v_hat, instance.weights, cells):
        kappa[c, ref_index[tuple(v[:d].tolist())]] += m
        zhat[c] = v[d:]
    mu = kappa.sum(axis=1)
    kappa /= mu[:, None]
    rows = tuple(DiscreteMeasure(ref_atoms, k, tol=1e-9) for k in kappa)
    eps = instance.lifted_cost.reg_epsilon
    ref = DiscreteMeasure(ref_atoms, np.full(len(ref_atoms), 1.0 / len(ref_atoms)))
    data = SinkhornLiftData(ref, eps, rows, instance.radius, DiscreteMeasure(zhat, mu / mu.sum()),
                            instance.metadata.get("original_radius", math.nan), np.zeros(n_cells))
    return data, PiecewiseAffineLoss(instance.loss.slopes[:, :d], instance.loss.intercepts)


def solve_sinkhorn_instance(instance: LiftedInstance) -> WorstCaseCoupling:
    """:func:`solve_sinkhorn` on a lifted instance (for JSON round trips and the CLI)."""
    data, loss = _sinkhorn_from_instance(instance)
    return solve_sinkhorn(data, loss)


# --------------------------------------------------------------------------- dispatch


def extract_worst_case(certificate: DualCertificate, instance: LiftedInstance) -> WorstCaseCoupling:
    """Worst-case transport records implied by a dual certificate on ``instance``.

    Each nominal atom moves to a maximizer of its d-transform (ties broken by
    lexicographic order after cost); when tied maximizers differ in transport
    cost, mass is split between them so the budget is used exactly.
    """
    if math.isinf(certificate.lambda_star) and instance.radius == 0:
        return _zero_radius(instance, certificate.method)
    kind = getattr(instance.lifted_cost, "kind", None)
    if kind == "interpolated":
        return _extract_interpolated(certificate, instance, instance.lifted_cost.phi)
    if kind == "wasserstein-weight-guard":
        return _extract_wasserstein(certificate, instance)
    if kind == "sinkhorn-kl-increment":
        return solve_sinkhorn_instance(instance)
    if kind == "phi-identity-guard":
        return solve_phi_lift(instance)
    raise UnsupportedError(f"no extraction for lifted cost {kind!r}")


def solve(instance: LiftedInstance, method: str | None = None) -> WorstCaseCoupling:
    """Dispatch on the lifted cost: ``kl``, ``general-phi``, ``wasserstein`` or ``sinkhorn``."""
    kind = getattr(instance.lifted_cost, "kind", None)
    if method is None:
        method = {
            "interpolated": "kl" if isinstance(getattr(instance.lifted_cost, "phi", None), KullbackLeibler) else "general-phi",
            "wasserstein-weight-guard": "wasserstein",
            "sinkhorn-kl-increment": "sinkhorn",
            "phi-identity-guard": "general-phi",
        }.get(kind)
    if kind == "phi-identity-guard" and method in ("kl", "general-phi"):
        return solve_phi_lift(instance)
    if method == "kl":
        return solve_kl_interpolated(instance)
    if method == "general-phi":
        return solve_general_phi(instance)
    if method == "wasserstein":
        return solve_wasserstein(instance)
    if method == "sinkhorn":
        return solve_sinkhorn_instance(instance)
    raise UnsupportedError(f"no solver {method!r} for lifted cost {kind!r}")
