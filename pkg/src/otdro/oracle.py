"""Brute-force primal solvers used to certify the dual solvers at desk scale.

Nothing here calls into :mod:`otdro.solvers`; the point is independence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    DiscreteMeasure,
    GroundCost,
    InfeasibleError,
    InputError,
    LiftedInstance,
    NumericalError,
    PiecewiseAffineLoss,
    UnboundedError,
    UnsupportedError,
    lattice_points,
)
from .divergences import EntropyFunction, KullbackLeibler, TotalVariation

log = logging.getLogger(__name__)

MAX_LP_VARIABLES = 5000


@dataclass
class LPResult:
    value: float
    x: np.ndarray
    iterations: int


def _lp_arrays(c, A_ub, b_ub, A_eq, b_eq):
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    if A_ub.shape != (b_ub.size, n) or A_eq.shape != (b_eq.size, n):
        raise InputError("LP data have inconsistent shapes")
    if n > MAX_LP_VARIABLES:
        raise InputError(f"LP has {n} variables; the dense oracle is capped at {MAX_LP_VARIABLES}")
    return c, A_ub, b_ub, A_eq, b_eq


# --------------------------------------------------------------------------- tableau simplex (Bland)


def simplex_tableau(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol=1e-9, max_iter=200000) -> LPResult:
    """Maximize ``c.x`` subject to ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``.

    Dense two-phase tableau simplex with Bland's smallest-index rule for both
    the entering and the leaving variable, which rules out cycling.
    """
    c, A_ub, b_ub, A_eq, b_eq = _lp_arrays(c, A_ub, b_ub, A_eq, b_eq)
    n = c.size
    m_ub, m_eq = b_ub.size, b_eq.size
    m = m_ub + m_eq
    # columns: x (n) | slacks (m_ub) | artificials (m)
    N = n + m_ub + m
    T = np.zeros((m, N + 1))
    T[:m_ub, :n] = A_ub
    T[:m_ub, n : n + m_ub] = np.eye(m_ub)
    T[:m_ub, -1] = b_ub
    T[m_ub:, :n] = A_eq
    T[m_ub:, -1] = b_eq
    neg = T[:, -1] < 0
    T[neg] *= -1.0
    basis = np.empty(m, dtype=int)
    art_used = []
    for i in range(m):
        if i < m_ub and not neg[i]:
            basis[i] = n + i
        else:
            j = n + m_ub + i
            T[i, j] = 1.0
            basis[i] = j
            art_used.append(j)
    art = set(range(n + m_ub, N))
    iters = 0

    def pivot(r, j):
        T[r] /= T[r, j]
        for i in range(T.shape[0]):
            if i != r and T[i, j] != 0.0:
                T[i] -= T[i, j] * T[r]
        basis[r] = j

    def run(cost, allowed):
        nonlocal iters
        allowed = np.asarray(sorted(allowed))
        while True:
            iters += 1
            if iters > max_iter:
                raise NumericalError("simplex iteration limit reached", {"iterations": iters})
            reduced = cost[allowed] - cost[basis] @ T[:, allowed]
            scale = 1.0 + np.max(np.abs(cost))
            enter = np.nonzero(reduced > tol * scale)[0]
            if enter.size == 0:
                return
            j = int(allowed[enter[0]])
            col = T[:, j]
            rows = np.nonzero(col > tol)[0]
            if rows.size == 0:
                raise UnboundedError("LP objective is unbounded")
            ratios = T[rows, -1] / col[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12 * (1.0 + abs(best))]
            r = int(ties[np.argmin(basis[ties])])
            pivot(r, j)

    if art_used:
        cost1 = np.zeros(N)
        cost1[list(art)] = -1.0
        run(cost1, range(N))
        infeas = float(np.sum(T[np.isin(basis, list(art)), -1]))
        if infeas > 1e-7 * (1.0 + np.max(np.abs(T[:, -1]), initial=0.0)):
            raise InfeasibleError(f"LP is infeasible (phase-one residual {infeas:.3g})")
        keep = []
        for i in range(T.shape[0]):
            if basis[i] in art:
                cand = [j for j in range(n + m_ub) if abs(T[i, j]) > 1e-9]
                if cand:
                    pivot(i, cand[0])
                    keep.append(i)
            else:
                keep.append(i)
        T = T[keep]
        basis = basis[keep]
    cost2 = np.zeros(N)
    cost2[:n] = c
    run(cost2, range(n + m_ub))
    x = np.zeros(N)
    x[basis] = T[:, -1]
    x = np.maximum(x[:n], 0.0)
    return LPResult(float(math.fsum(c * x)), x, iters)


# --------------------------------------------------------------------------- revised simplex (Dantzig)


def revised_simplex(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol=1e-9, max_iter=100000) -> LPResult:
    """Same problem as :func:`simplex_tableau`, solved by a revised simplex.

    Every row receives an artificial column; the basis matrix is refactored
    at each step and the entering variable follows Dantzig's most-positive
    reduced cost rule.
    """
    c, A_ub, b_ub, A_eq, b_eq = _lp_arrays(c, A_ub, b_ub, A_eq, b_eq)
    n = c.size
    m_ub, m_eq = b_ub.size, b_eq.size
    m = m_ub + m_eq
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    sign = np.where(b < 0, -1.0, 1.0)
    A = A * sign[:, None]
    b = b * sign
    A = np.hstack([A, np.eye(m)])
    n_real = n + m_ub
    basis = list(range(n_real, n_real + m))
    iters = 0

    def optimize(cost, allowed):
        nonlocal iters
        allowed = np.array(sorted(allowed))
        while True:
            iters += 1
            if iters > max_iter:
                raise NumericalError("revised simplex iteration limit reached", {"iterations": iters})
            B = A[:, basis]
            xb = np.linalg.solve(B, b)
            y = np.linalg.solve(B.T, cost[basis])
            reduced = cost[allowed] - y @ A[:, allowed]
            reduced[np.isin(allowed, basis)] = 0.0
            k = int(np.argmax(reduced))
            if reduced[k] <= tol * (1.0 + np.max(np.abs(cost))):
                return xb
            j = int(allowed[k])
            d = np.linalg.solve(B, A[:, j])
            pos = d > tol
            if not np.any(pos):
                raise UnboundedError("LP objective is unbounded")
            ratios = np.full(m, np.inf)
            ratios[pos] = np.maximum(xb[pos], 0.0) / d[pos]
            r = int(np.argmin(ratios))
            basis[r] = j

    if m:
        cost1 = np.zeros(n_real + m)
        cost1[n_real:] = -1.0
        xb = optimize(cost1, range(n_real + m))
        art_val = sum(xb[i] for i, j in enumerate(basis) if j >= n_real)
        if art_val > 1e-7 * (1.0 + np.max(np.abs(b))):
            raise InfeasibleError(f"LP is infeasible (phase-one residual {art_val:.3g})")
        # swap zero-level artificials out where possible; any that remain sit on
        # redundant rows, never move again and are barred from re-entering
        for i in range(m):
            if basis[i] >= n_real:
                row = np.linalg.solve(A[:, basis].T, np.eye(m)[i]) @ A[:, :n_real]
                cand = [j for j in range(n_real) if abs(row[j]) > 1e-9 and j not in basis]
                if cand:
                    basis[i] = cand[0]
    cost2 = np.zeros(n_real + m)
    cost2[:n] = c
    if m == 0:
        if np.any(c > tol):
            raise UnboundedError("LP objective is unbounded")
        return LPResult(0.0, np.zeros(n), iters)
    xb = optimize(cost2, range(n_real))
    x = np.zeros(n_real + m)
    x[basis] = xb
    x = np.maximum(x[:n], 0.0)
    return LPResult(float(math.fsum(c * x)), x, iters)


# --------------------------------------------------------------------------- coupling LP


@dataclass
class CouplingGrid:
    """Finite candidate targets ``(v_j, w_l)`` for every nominal atom."""

    v_points: np.ndarray
    w_points: np.ndarray

    def __post_init__(self):
        self.v_points = np.atleast_2d(np.asarray(self.v_points, dtype=float))
        w = np.unique(np.asarray(self.w_points, dtype=float))
        if np.any(w < 0):
            raise InputError("w grid must be nonnegative")
        self.w_points = w


def _unique_rows(points: np.ndarray) -> np.ndarray:
    seen = {}
    for p in points:
        seen.setdefault(tuple(p.tolist()), p)
    return np.array(list(seen.values()))


def build_grid(
    instance: LiftedInstance,
    v_step: float,
    w_max: float | None = None,
    w_step: float = 0.25,
    extra_v: Sequence | None = None,
    extra_w: Sequence[float] | None = None,
) -> CouplingGrid:
    """Lattice over the value domain plus nominal points, with the default w grid.

    The w grid is ``{0, w_step, ..., w_max} U {1}`` together with the nominal
    W-coordinates and any ``extra_w`` (for example a solver's ``w*`` values).
    """
    dom = instance.value_domain
    n = instance.nominal.size
    w_max = float(w_max if w_max is not None else max(dom.w_max, n))
    v = lattice_points(dom.lower(), dom.upper(), v_step)
    parts = [v, instance.v_hat]
    if extra_v is not None and len(extra_v):
        parts.append(np.atleast_2d(np.asarray(extra_v, dtype=float)))
    v = _unique_rows(np.vstack(parts))
    count = int(math.floor(w_max / w_step + 1e-9)) + 1
    w = np.concatenate([w_step * np.arange(count), [0.0, 1.0], instance.w_hat, np.asarray(extra_w or [], dtype=float)])
    return CouplingGrid(v, w)


@dataclass
class LPPrimalResult:
    value: float
    coupling: np.ndarray  # shape (n_nominal, n_v, n_w)
    grid: CouplingGrid
    n_variables: int


def _candidate_pairs(instance: LiftedInstance, grid: CouplingGrid):
    """Yield ``(i, j, l, cost)`` for every finite-cost grid pair."""
    cost = instance.lifted_cost
    kind = getattr(cost, "kind", None)
    for i, (vh, wh) in enumerate(zip(instance.v_hat, instance.w_hat)):
        if kind in ("phi-identity-guard", "sinkhorn-kl-increment"):
            js = [j for j, v in enumerate(grid.v_points) if np.array_equal(v, vh)]
        else:
            js = range(len(grid.v_points))
        for j in js:
            v = grid.v_points[j]
            if kind == "wasserstein-weight-guard":
                ls = np.nonzero(grid.w_points == wh)[0]
            else:
                ls = range(len(grid.w_points))
            for l in ls:
                c = instance.cost(v, grid.w_points[l], vh, wh)
                if math.isfinite(c):
                    yield i, j, l, c


def lp_primal(instance: LiftedInstance, grid: CouplingGrid, solver: Callable = simplex_tableau) -> LPPrimalResult:
    """Best coupling value over the grid, by a dense LP.

    Rows: nominal mass per atom, the moment constraint(s) and the transport
    budget.  Grid pairs with infinite cost are not variables.
    """
    pairs = list(_candidate_pairs(instance, grid))
    if not pairs:
        raise InfeasibleError("no grid pair has finite transport cost")
    if len(pairs) > MAX_LP_VARIABLES:
        raise InputError(f"grid yields {len(pairs)} LP variables; the cap is {MAX_LP_VARIABLES}")
    n = instance.nominal.size
    idx = np.array([(i, j, l) for i, j, l, _ in pairs])
    costs = np.array([c for *_, c in pairs])
    loss_v = np.array([instance.loss(v) for v in grid.v_points])
    w_vals = grid.w_points[idx[:, 2]]
    obj = loss_v[idx[:, 1]] * w_vals
    nv = len(pairs)

    A_eq = [np.zeros((n, nv))]
    A_eq[0][idx[:, 0], np.arange(nv)] = 1.0
    b_eq = [instance.weights.copy()]
    sf = instance.sigma_field
    if sf.kind == "trivial":
        A_eq.append(w_vals[None, :])
        b_eq.append(np.ones(1))
    else:
        cells = sf.cells(instance.v_hat)
        for cell in range(cells.max() + 1):
            row = np.where(cells[idx[:, 0]] == cell, w_vals - 1.0, 0.0)
            A_eq.append(row[None, :])
            b_eq.append(np.zeros(1))
    res = solver(obj, costs[None, :], [instance.radius], np.vstack(A_eq), np.concatenate(b_eq))
    coupling = np.zeros((n, len(grid.v_points), len(grid.w_points)))
    coupling[idx[:, 0], idx[:, 1], idx[:, 2]] = res.x
    return LPPrimalResult(res.value, coupling, grid, nv)


@dataclass
class RefinementTrace:
    steps: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        return self.values[-1]

    def is_monotone(self, tol: float = 1e-9) -> bool:
        return all(b >= a - tol for a, b in zip(self.values, self.values[1:]))


def lp_primal_trace(instance: LiftedInstance, v_step: float, levels: int = 3, **grid_kw) -> RefinementTrace:
    """Grid primal values for ``v_step``, ``v_step/2``, ... (nested grids)."""
    trace = RefinementTrace()
    step = v_step
    for _ in range(levels):
        grid = build_grid(instance, step, **grid_kw)
        trace.steps.append(step)
        trace.values.append(lp_primal(instance, grid).value)
        step /= 2.0
    return trace


def direct_wasserstein_lp(
    loss: PiecewiseAffineLoss,
    ground_cost: GroundCost,
    mu_hat: DiscreteMeasure,
    radius: float,
    v_points,
) -> float:
    """Wasserstein worst case over couplings from ``mu_hat`` onto ``v_points``."""
    v_points = np.atleast_2d(np.asarray(v_points, dtype=float))
    n, m = mu_hat.size, v_points.shape[0]
    d = np.array([[ground_cost(v, zh) for v in v_points] for zh in mu_hat.atoms])
    finite = np.isfinite(d)
    ii, jj = np.nonzero(finite)
    obj = np.array([loss(v_points[j]) for j in jj])
    A_eq = np.zeros((n, ii.size))
    A_eq[ii, np.arange(ii.size)] = 1.0
    res = simplex_tableau(obj, d[ii, jj][None, :], [radius], A_eq, mu_hat.weights)
    return res.value


# --------------------------------------------------------------------------- KL balls


@dataclass
class KLDROResult:
    value: float
    lambda_star: float
    probabilities: np.ndarray
    saturated: bool
    iterations: int


def _softmax(losses, logw, lam):
    z = logw + losses / lam
    return np.exp(z - logsumexp(z))


def kl_dro_bisection(losses, weights, radius: float, full: bool = False, tol: float = 1e-13):
    """``sup { E_p[l] : KL(p || w) <= r }`` through its one-dimensional dual.

    The dual ``G(lam) = lam*r + lam*log E_w exp(l/lam)`` has derivative
    ``r - KL(p_lam || w)`` with ``p_lam`` proportional to ``w * exp(l/lam)``;
    the root is found by bisection on ``log lam``.  When ``r`` is at least
    ``-log w(argmax l)`` every point mass on the maximizers is feasible and
    the value saturates at ``max l``.
    """
    losses = np.asarray(losses, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if losses.shape != weights.shape:
        raise InputError("losses and weights must have equal length")
    if radius < 0:
        raise InputError("radius must be nonnegative")
    keep = weights > 0
    losses, weights = losses[keep], weights[keep] / weights[keep].sum()
    top = losses.max()
    at_top = losses >= top
    p_top = float(weights[at_top].sum())
    if radius >= -math.log(p_top) or radius == 0.0 and np.all(at_top):
        p = np.where(at_top, weights / p_top, 0.0)
        res = KLDROResult(float(top), 0.0, p, True, 0)
        return res if full else res.value
    if radius == 0.0:
        res = KLDROResult(float(weights @ losses), math.inf, weights.copy(), False, 0)
        return res if full else res.value
    logw = np.log(weights)
    spread = top - losses.min()

    def kl_at(lam):
        p = _softmax(losses, logw, lam)
        nz = p > 0
        return float(np.sum(p[nz] * (np.log(p[nz]) - logw[nz])))

    lo = hi = math.log(max(spread, 1e-300))
    while kl_at(math.exp(lo)) <= radius:
        lo -= 1.0
    while kl_at(math.exp(hi)) >= radius:
        hi += 1.0
    it = 0
    while hi - lo > tol and it < 500:
        mid = 0.5 * (lo + hi)
        if kl_at(math.exp(mid)) > radius:
            lo = mid
        else:
            hi = mid
        it += 1
    lam = math.exp(0.5 * (lo + hi))
    value = lam * radius + lam * (logsumexp(logw + (losses - top) / lam)) + top
    p = _softmax(losses, logw, lam)
    res = KLDROResult(float(value), lam, p, False, it)
    return res if full else res.value


def _kl_rows(q, kappa):
    out = np.zeros(q.shape[0])
    for i in range(q.shape[0]):
        nz = q[i] > 0
        out[i] = np.sum(q[i, nz] * (np.log(q[i, nz]) - np.log(kappa[i, nz])))
    return out


def _tilt_by_ascent(kappa, losses, tau, max_iter=400):
    """Maximize ``E_q[l] - tau * KL(q || kappa)`` row by row with exponentiated gradient steps."""
    with np.errstate(divide="ignore"):
        log_kappa = np.log(kappa)
    log_q = log_kappa - logsumexp(log_kappa, axis=1, keepdims=True)
    step = 0.5 / tau
    with np.errstate(invalid="ignore"):  # -inf - -inf on atoms outside the support
        for _ in range(max_iter):
            grad = losses[None, :] - tau * (np.where(np.isfinite(log_q), log_q - log_kappa, 0.0) + 1.0)
            new = np.where(np.isfinite(log_kappa), log_q + step * grad, -np.inf)
            new -= logsumexp(new, axis=1, keepdims=True)
            done = np.max(np.abs(np.where(np.isfinite(new), new - log_q, 0.0))) < 1e-14
            log_q = new
            if done:
                break
    return np.exp(log_q)


def mirror_ascent_kl_cells(kernels, cell_weights, losses, budget: float, tol: float = 1e-12) -> tuple[float, np.ndarray]:
    """``sup sum_i m_i E_{q_i}[l]`` subject to ``sum_i m_i KL(q_i || kappa_i) <= budget``.

    The Lagrangian is maximized by exponentiated gradient ascent for a
    shared multiplier ``tau``; ``tau`` is then bisected (log scale) until the
    budget is met.  Returns the value and the row distributions ``q``.
    """
    kappa = np.atleast_2d(np.asarray(kernels, dtype=float))
    m = np.asarray(cell_weights, dtype=float).ravel()
    losses = np.asarray(losses, dtype=float).ravel()
    if budget < 0:
        raise InputError("budget must be nonnegative")
    if budget == 0:
        return float(m @ (kappa @ losses)), kappa.copy()
    # saturation: point masses on each row's best supported atoms
    sat_q = np.zeros_like(kappa)
    sat_cost = 0.0
    for i in range(kappa.shape[0]):
        supp = kappa[i] > 0
        top = losses[supp].max()
        best = supp & (losses >= top)
        sat_q[i, best] = kappa[i, best] / kappa[i, best].sum()
        sat_cost += m[i] * -math.log(kappa[i, best].sum())
    if budget >= sat_cost:
        return float(m @ (sat_q @ losses)), sat_q

    def used(tau):
        q = _tilt_by_ascent(kappa, losses, tau)
        return float(m @ _kl_rows(q, kappa)), q

    spread = max(losses.max() - losses.min(), 1e-12)
    lo = hi = math.log(spread)
    while used(math.exp(lo))[0] <= budget:
        lo -= 1.0
        if lo < -60:
            break
    while used(math.exp(hi))[0] > budget:
        hi += 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if used(math.exp(mid))[0] > budget:
            lo = mid
        else:
            hi = mid
    _, q = used(math.exp(hi))
    return float(m @ (q @ losses)), q


def mirror_ascent_kl_ball(kernel_row: DiscreteMeasure | Sequence[float], losses, budget: float) -> float:
    """``sup { E_q[l] : KL(q || kappa) <= budget }`` for a single kernel row."""
    w = kernel_row.weights if isinstance(kernel_row, DiscreteMeasure) else np.asarray(kernel_row, dtype=float)
    return mirror_ascent_kl_cells(w[None, :], [1.0], losses, budget)[0]


# --------------------------------------------------------------------------- direct phi-divergence primal


def direct_phi_primal(phi: EntropyFunction, candidate_losses, nominal_weights, radius: float, full: bool = False):
    """Worst-case expectation over ``{mu on candidates : D_phi(mu, mu_hat) <= r}``.

    ``nominal_weights`` gives ``mu_hat`` on the same candidate list (zeros
    allowed).  Supported: Kullback-Leibler (bisection) and total variation
    (linear program).  With ``full=True`` returns ``(value, mu)``.
    """
    losses = np.asarray(candidate_losses, dtype=float).ravel()
    w = np.asarray(nominal_weights, dtype=float).ravel()
    if isinstance(phi, KullbackLeibler):
        res = kl_dro_bisection(losses, w, radius, full=True)
        mu = np.zeros(losses.size)
        mu[w > 0] = res.probabilities
        return (res.value, mu) if full else res.value
    if isinstance(phi, TotalVariation):
        k = losses.size
        # variables (mu, t); |mu - w| <= t, sum t <= r, sum mu = 1
        eye = np.eye(k)
        A_ub = np.vstack(
            [
                np.hstack([eye, -eye]),
                np.hstack([-eye, -eye]),
                np.hstack([np.zeros(k), np.ones(k)])[None, :],
            ]
        )
        b_ub = np.concatenate([w, -w, [radius]])
        A_eq = np.hstack([np.ones(k), np.zeros(k)])[None, :]
        res = simplex_tableau(np.concatenate([losses, np.zeros(k)]), A_ub, b_ub, A_eq, [1.0])
        return (res.value, res.x[:k].copy()) if full else res.value
    raise UnsupportedError(f"no direct primal oracle for {phi.name}")


# --------------------------------------------------------------------------- grid search


def grid_argmax(fn: Callable[[np.ndarray], float], domain, resolution: float, levels: int = 2, factor: int = 10):
    """Lattice maximizer of ``fn`` over a box, refined around the incumbent.

    ``domain`` is ``(lower, upper)``.  After the coarse scan, each refinement
    level rescans the neighbouring cells with a step ``factor`` times finer.
    Ties keep the first point in scan order.
    """
    if not resolution > 0:
        raise InputError("resolution must be positive")
    lower = np.atleast_1d(np.asarray(domain[0], dtype=float))
    upper = np.atleast_1d(np.asarray(domain[1], dtype=float))

    def scan(points):
        best_p, best_v = None, -math.inf
        for p in points:
            val = float(fn(p))
            if val > best_v:
                best_p, best_v = p, val
        return best_p, best_v

    best_p, best_v = scan(lattice_points(lower, upper, resolution))
    step = resolution
    for _ in range(levels):
        lo = np.maximum(best_p - step, lower)
        hi = np.minimum(best_p + step, upper)
        step /= factor
        p, v = scan(lattice_points(lo, hi, step))
        if v > best_v:
            best_p, best_v = p, v
    return np.array(best_p), best_v
