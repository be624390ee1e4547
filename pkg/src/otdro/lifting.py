"""Constructors that lift a classic DRO tuple (Z, loss, mu_hat, D, r) into a
:class:`~otdro.core.LiftedInstance` with objective ``f(v, w) = l(v) * w``.

Each ambiguity family gets its own transport cost on the lifted space V x W.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    DiscreteMeasure,
    GroundCost,
    InfeasibleError,
    InputError,
    LiftedInstance,
    PiecewiseAffineLoss,
    SigmaFieldSpec,
    ValueDomain,
    ext_mul,
)
from .divergences import EntropyFunction, KullbackLeibler

INF = math.inf
LIFT_KINDS = ("phi-identity-guard", "sinkhorn-kl-increment", "wasserstein-weight-guard", "interpolated")
DEFAULT_MIX_EPSILON = 1e-3


def _ext_sub(a: float, b: float) -> float:
    """``a - b`` with ``inf - inf = inf``."""
    if math.isinf(a):
        return INF
    return a - b


@dataclass(frozen=True)
class LiftedCost:
    """Transport cost ``c((v, w), (v_hat, w_hat))`` on the lifted space.

    ``phi-identity-guard``
        ``+inf`` unless ``v = v_hat``; then ``g * phi(w / g)`` with
        ``g = 1 / (1 - mix_epsilon)`` on data atoms, and ``phi'_inf * w`` on the
        extra atom (recognized by its nominal weight ``w_hat = 0``).
    ``sinkhorn-kl-increment``
        ``+inf`` unless ``v = v_hat``; then ``reg_epsilon * (phi_KL(w) - phi_KL(w_hat))_+``.
    ``wasserstein-weight-guard``
        ``+inf`` unless ``w = w_hat``; then ``d(v, v_hat)``.
    ``interpolated``
        ``theta1 * w * d(v, v_hat) + theta2 * (phi(w) - phi(w_hat))_+``.
    """

    kind: str
    ground_cost: GroundCost | None = None
    phi: EntropyFunction | None = None
    theta1: float = 1.0
    theta2: float = 1.0
    mix_epsilon: float | None = None
    reg_epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in LIFT_KINDS:
            raise InputError(f"unknown lifted cost kind {self.kind!r}")

    def __call__(self, v, w, v_hat, w_hat) -> float:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        v_hat = np.atleast_1d(np.asarray(v_hat, dtype=float))
        w, w_hat = float(w), float(w_hat)
        if w < 0:
            return INF
        if self.kind == "wasserstein-weight-guard":
            if w != w_hat:
                return INF
            return self.ground_cost(v, v_hat)
        if self.kind == "phi-identity-guard":
            if not np.array_equal(v, v_hat):
                return INF
            if w_hat == 0.0:
                return ext_mul(self.phi.recession, w)
            g = 1.0 / (1.0 - self.mix_epsilon)
            return g * self.phi(w / g)
        if self.kind == "sinkhorn-kl-increment":
            if not np.array_equal(v, v_hat):
                return INF
            kl = KullbackLeibler()
            return self.reg_epsilon * max(_ext_sub(kl(w), kl(w_hat)), 0.0)
        # interpolated
        move = ext_mul(self.theta1 * w, self.ground_cost(v, v_hat))
        grow = max(_ext_sub(self.phi(w), self.phi(w_hat)), 0.0)
        return move + self.theta2 * grow

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.ground_cost is not None:
            gc = self.ground_cost
            out["ground_cost"] = {"kind": gc.kind, "p": gc.p, "label_indices": list(gc.label_indices)}
        if self.phi is not None:
            out["phi"] = self.phi.to_dict()
        if self.kind == "interpolated":
            out["theta1"], out["theta2"] = self.theta1, self.theta2
        if self.mix_epsilon is not None:
            out["mix_epsilon"] = self.mix_epsilon
        if self.reg_epsilon is not None:
            out["reg_epsilon"] = self.reg_epsilon
        return out


@dataclass(frozen=True, eq=False)
class SinkhornLiftData:
    """Kernel rows and adjusted radius of a Sinkhorn lift.

    ``kernel_rows[i]`` is the distribution over the reference atoms with
    weights proportional to ``eta_j * exp(-d(z_j, z_hat_i) / reg_epsilon)``.
    """

    reference: DiscreteMeasure
    reg_epsilon: float
    kernel_rows: tuple[DiscreteMeasure, ...]
    adjusted_radius: float
    nominal: DiscreteMeasure
    radius: float
    log_normalizers: np.ndarray = field(repr=False)

    @property
    def kernel_matrix(self) -> np.ndarray:
        return np.vstack([row.weights for row in self.kernel_rows])


def default_value_domain(atoms: np.ndarray, pad: float = 5.0, w_max: float | None = None) -> ValueDomain:
    """Bounding box of ``atoms`` enlarged by ``pad`` in every coordinate."""
    atoms = np.atleast_2d(atoms)
    n = atoms.shape[0]
    return ValueDomain(
        tuple(atoms.min(axis=0) - pad),
        tuple(atoms.max(axis=0) + pad),
        w_max=float(w_max if w_max is not None else max(4.0, n)),
    )


def _check_loss(loss: PiecewiseAffineLoss, mu_hat: DiscreteMeasure):
    if loss.dim != mu_hat.dim:
        raise InputError(f"loss acts on R^{loss.dim} but atoms live in R^{mu_hat.dim}")


def _with_unit_weight(mu_hat: DiscreteMeasure) -> DiscreteMeasure:
    atoms = np.hstack([mu_hat.atoms, np.ones((mu_hat.size, 1))])
    return DiscreteMeasure(atoms, mu_hat.weights)


def lift_wasserstein(
    loss: PiecewiseAffineLoss,
    ground_cost: GroundCost,
    mu_hat: DiscreteMeasure,
    radius: float,
    value_domain: ValueDomain | None = None,
) -> LiftedInstance:
    """Wasserstein ball: every atom gains weight coordinate 1 and weights may not change."""
    _check_loss(loss, mu_hat)
    return LiftedInstance(
        loss=loss,
        lifted_cost=LiftedCost("wasserstein-weight-guard", ground_cost=ground_cost),
        nominal=_with_unit_weight(mu_hat),
        sigma_field=SigmaFieldSpec("trivial"),
        radius=float(radius),
        value_domain=value_domain or default_value_domain(mu_hat.atoms),
        metadata={"family": "wasserstein"},
    )


def build_interpolated(
    loss: PiecewiseAffineLoss,
    ground_cost: GroundCost,
    phi: EntropyFunction,
    mu_hat: DiscreteMeasure,
    radius: float,
    theta1: float = 1.0,
    theta2: float = 1.0,
    value_domain: ValueDomain | None = None,
) -> LiftedInstance:
    """Cost ``theta1 * w * d(v, v_hat) + theta2 * (phi(w) - phi(w_hat))_+`` around ``mu_hat x delta_1``."""
    _check_loss(loss, mu_hat)
    if not (theta1 > 0 and theta2 > 0):
        raise InputError("theta1 and theta2 must be positive")
    return LiftedInstance(
        loss=loss,
        lifted_cost=LiftedCost(
            "interpolated", ground_cost=ground_cost, phi=phi, theta1=float(theta1), theta2=float(theta2)
        ),
        nominal=_with_unit_weight(mu_hat),
        sigma_field=SigmaFieldSpec("trivial"),
        radius=float(radius),
        value_domain=value_domain or default_value_domain(mu_hat.atoms),
        metadata={"family": "interpolated"},
    )


def lift_phi_divergence(
    loss: PiecewiseAffineLoss,
    phi: EntropyFunction,
    mu_hat: DiscreteMeasure,
    radius: float,
    mix_epsilon: float = DEFAULT_MIX_EPSILON,
    worst_scenario=None,
    value_domain: ValueDomain | None = None,
    grid_step: float | None = None,
) -> LiftedInstance:
    """Generalized phi-divergence ball.

    The nominal measure puts ``(1 - eps) * mu_hat_i`` on ``(z_i, 1/(1 - eps))``
    and ``eps`` on ``(z_worst, 0)``, where ``z_worst`` maximizes the loss.  When
    ``worst_scenario`` is omitted it is located by grid search over the value
    domain and the search resolution is kept in ``metadata``.
    """
    _check_loss(loss, mu_hat)
    if not 0.0 < mix_epsilon < 1.0:
        raise InputError("mix_epsilon must lie in (0, 1)")
    value_domain = value_domain or default_value_domain(mu_hat.atoms)
    meta = {"family": "phi", "mix_epsilon": float(mix_epsilon)}
    if worst_scenario is None:
        from .oracle import grid_argmax

        lo, hi = value_domain.lower(), value_domain.upper()
        step = grid_step or float(np.max(hi - lo)) / 50.0
        worst_scenario, best = grid_argmax(loss, (lo, hi), step)
        meta["worst_scenario_source"] = "grid"
        meta["worst_scenario_grid_step"] = step
        meta["worst_scenario_value"] = best
    else:
        meta["worst_scenario_source"] = "caller"
    z_worst = np.atleast_1d(np.asarray(worst_scenario, dtype=float))
    if z_worst.shape != (mu_hat.dim,):
        raise InputError("worst_scenario has the wrong dimension")
    meta["worst_scenario"] = z_worst.tolist()

    g = 1.0 / (1.0 - mix_epsilon)
    atoms = np.vstack(
        [
            np.hstack([mu_hat.atoms, np.full((mu_hat.size, 1), g)]),
            np.append(z_worst, 0.0)[None, :],
        ]
    )
    weights = np.append((1.0 - mix_epsilon) * mu_hat.weights, mix_epsilon)
    return LiftedInstance(
        loss=loss,
        lifted_cost=LiftedCost("phi-identity-guard", phi=phi, mix_epsilon=float(mix_epsilon)),
        nominal=DiscreteMeasure(atoms, weights),
        sigma_field=SigmaFieldSpec("trivial"),
        radius=float(radius),
        value_domain=value_domain,
        metadata=meta,
    )


def sinkhorn_kernel(ground_cost: GroundCost, mu_hat: DiscreteMeasure, reference: DiscreteMeasure, reg_epsilon: float):
    """Kernel matrix ``kappa`` (rows sum to one) and the row log-normalizers.

    Row ``i`` is proportional to ``eta_j * exp(-d(z_j, z_hat_i) / eps)``; the
    log-normalizer is ``log E_eta[exp(-d(Z, z_hat_i) / eps)]``.
    """
    if not reg_epsilon > 0:
        raise InputError("reg_epsilon must be positive")
    if reference.dim != mu_hat.dim:
        raise InputError("reference measure lives in a different space")
    d = np.array([[ground_cost(z, zh) for z in reference.atoms] for zh in mu_hat.atoms])
    with np.errstate(divide="ignore"):
        logits = -d / reg_epsilon + np.log(reference.weights)[None, :]
    log_norm = logsumexp(logits, axis=1)
    if not np.all(np.isfinite(log_norm)):
        raise InputError("some kernel row has zero total mass under the reference measure")
    kappa = np.exp(logits - log_norm[:, None])
    kappa /= kappa.sum(axis=1, keepdims=True)
    return kappa, log_norm


def lift_sinkhorn(
    loss: PiecewiseAffineLoss,
    ground_cost: GroundCost,
    mu_hat: DiscreteMeasure,
    radius: float,
    reg_epsilon: float,
    reference: DiscreteMeasure,
    value_domain: ValueDomain | None = None,
) -> tuple[LiftedInstance, SinkhornLiftData]:
    """Sinkhorn ball lifted to V = Z x Z with one moment constraint per nominal value.

    Raises :class:`InfeasibleError` when the adjusted radius is negative.
    """
    _check_loss(loss, mu_hat)
    if radius < 0:
        raise InputError("radius must be nonnegative")
    kappa, log_norm = sinkhorn_kernel(ground_cost, mu_hat, reference, reg_epsilon)
    offset = reg_epsilon * math.fsum(mu_hat.weights * log_norm)
    r_bar = radius + offset
    if 0 > r_bar >= -1e-12 * max(1.0, radius, abs(offset)):
        r_bar = 0.0  # rounding in the offset
    if r_bar < 0:
        raise InfeasibleError(
            f"adjusted radius {r_bar:.6g} is negative: the Sinkhorn ball of radius {radius} is empty"
        )
    rows = tuple(DiscreteMeasure(reference.atoms, k, tol=1e-9) for k in kappa)
    data = SinkhornLiftData(reference, float(reg_epsilon), rows, float(r_bar), mu_hat, float(radius), log_norm)

    merged: dict[tuple, float] = {}
    for i, zh in enumerate(mu_hat.atoms):
        for j, z in enumerate(reference.atoms):
            mass = mu_hat.weights[i] * kappa[i, j]
            if mass > 0:
                key = tuple(z.tolist()) + tuple(zh.tolist()) + (1.0,)
                merged[key] = merged.get(key, 0.0) + mass
    atoms = np.array(list(merged.keys()))
    weights = np.array(list(merged.values()))
    weights /= math.fsum(weights)

    d = mu_hat.dim
    if value_domain is None:
        both = np.vstack([reference.atoms, mu_hat.atoms])
        base = default_value_domain(both)
        value_domain = ValueDomain(base.v_lower * 2, base.v_upper * 2, w_max=base.w_max)
    inst = LiftedInstance(
        loss=loss.padded(d),
        lifted_cost=LiftedCost("sinkhorn-kl-increment", ground_cost=ground_cost, reg_epsilon=float(reg_epsilon)),
        nominal=DiscreteMeasure(atoms, weights),
        sigma_field=SigmaFieldSpec("condition-on-nominal-atom", cell_coordinates=tuple(range(d, 2 * d))),
        radius=float(r_bar),
        value_domain=value_domain,
        metadata={"family": "sinkhorn", "reg_epsilon": float(reg_epsilon), "original_radius": float(radius)},
    )
    return inst, data
