"""Shared domain types: measures, losses, ground costs, instances and solver outputs."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

INPUT_WEIGHT_TOL = 1e-12
OUTPUT_WEIGHT_TOL = 1e-6


class OTDROError(Exception):
    """Base class for all errors raised by this package."""


class InputError(OTDROError, ValueError):
    """Malformed arguments, dimension mismatches, invalid parameters."""


class EvaluationError(OTDROError):
    """An integrand or loss produced a non-finite value where one is not allowed."""


class InfeasibleError(OTDROError):
    """The requested problem has an empty feasible set."""


class UnboundedError(OTDROError):
    """The worst-case risk is +inf (the loss outgrows the transport cost)."""


class NumericalError(OTDROError):
    """A numerical routine failed to reach its tolerance."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnsupportedError(InputError):
    """The combination of options is outside what the routine handles."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def ext_mul(a: float, b: float) -> float:
    """Product in extended arithmetic, with ``inf * 0 = 0``."""
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


# --------------------------------------------------------------------------- measures


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure.

    ``atoms`` has shape ``(m, d)``; one-dimensional input is treated as ``m``
    scalar atoms.  Both arrays are read-only after construction.
    """

    atoms: np.ndarray
    weights: np.ndarray
    tol: float = INPUT_WEIGHT_TOL

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2:
            raise InputError("atoms must be a list of points")
        weights = np.array(self.weights, dtype=float).ravel()
        if atoms.shape[0] < 1 or atoms.shape[0] != weights.shape[0]:
            raise InputError(
                f"need at least one atom and matching weights, got {atoms.shape[0]} atoms "
                f"and {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(atoms)):
            raise InputError("atoms must be finite")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InputError("weights must be finite and nonnegative")
        if abs(math.fsum(weights) - 1.0) > self.tol:
            raise InputError(f"weights sum to {math.fsum(weights)!r}, expected 1")
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, z) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(z, dtype=float)), [1.0])

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"DiscreteMeasure(n={self.size}, dim={self.dim})"


def expected_value(measure: DiscreteMeasure, integrand: Callable[[np.ndarray], float]) -> float:
    """Sum of ``weight_i * integrand(atom_i)`` over the atoms of ``measure``."""
    terms = []
    for z, wt in zip(measure.atoms, measure.weights):
        val = float(integrand(z))
        if not math.isfinite(val):
            raise EvaluationError(f"integrand is {val} at atom {z.tolist()}")
        terms.append(wt * val)
    return math.fsum(terms)


# --------------------------------------------------------------------------- losses


@dataclass(frozen=True, eq=False)
class PiecewiseAffineLoss:
    """Pointwise maximum of affine pieces, ``l(v) = max_k a_k.v + b_k``."""

    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        a = np.array(self.slopes, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        b = np.array(self.intercepts, dtype=float).ravel()
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[0] != b.shape[0]:
            raise InputError("need K >= 1 pieces with one slope vector and one intercept each")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InputError("loss pieces must be finite")
        object.__setattr__(self, "slopes", _frozen(a))
        object.__setattr__(self, "intercepts", _frozen(b))

    @classmethod
    def from_pieces(cls, pieces: Sequence[tuple[Sequence[float] | float, float]]):
        slopes = [np.atleast_1d(np.asarray(a, dtype=float)) for a, _ in pieces]
        return cls(np.vstack(slopes), [b for _, b in pieces])

    @property
    def n_pieces(self) -> int:
        return self.slopes.shape[0]

    @property
    def dim(self) -> int:
        return self.slopes.shape[1]

    def piece_values(self, v) -> np.ndarray:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if v.shape != (self.dim,):
            raise InputError(f"point has shape {v.shape}, loss expects ({self.dim},)")
        return self.slopes @ v + self.intercepts

    def __call__(self, v) -> float:
        return float(np.max(self.piece_values(v)))

    def padded(self, extra: int) -> "PiecewiseAffineLoss":
        """Same loss on ``R^(d+extra)``, ignoring the trailing coordinates."""
        pad = np.zeros((self.n_pieces, extra))
        return PiecewiseAffineLoss(np.hstack([self.slopes, pad]), self.intercepts)


def evaluate_loss(loss: PiecewiseAffineLoss, v) -> float:
    return loss(v)


# --------------------------------------------------------------------------- ground costs

GROUND_KINDS = ("p-norm", "squared-euclidean", "squared-euclidean-label-guard")


@dataclass(frozen=True)
class GroundCost:
    """Transport cost ``d(v, v_hat)`` on the outcome space.

    For the label-guard kind, ``label_indices`` lists coordinates that may not
    move: the cost is ``+inf`` when they differ (compared exactly) and the
    squared euclidean distance on the remaining coordinates otherwise.
    """

    kind: str = "squared-euclidean"
    p: float = 2.0
    label_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in GROUND_KINDS:
            raise InputError(f"unknown ground cost kind {self.kind!r}")
        if self.kind == "p-norm" and not (self.p >= 1.0):
            raise InputError("p-norm exponent must lie in [1, inf]")
        if self.kind == "squared-euclidean-label-guard" and not self.label_indices:
            raise InputError("label-guard cost needs at least one label coordinate")
        object.__setattr__(self, "label_indices", tuple(int(i) for i in self.label_indices))

    @property
    def dual_exponent(self) -> float:
        """Hoelder conjugate ``q`` of ``p`` (p-norm kind only)."""
        if self.p == 1.0:
            return math.inf
        if math.isinf(self.p):
            return 1.0
        return self.p / (self.p - 1.0)

    def free_mask(self, dim: int) -> np.ndarray:
        mask = np.ones(dim, dtype=bool)
        if self.kind == "squared-euclidean-label-guard":
            mask[list(self.label_indices)] = False
        return mask

    def __call__(self, v, v_hat) -> float:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        v_hat = np.atleast_1d(np.asarray(v_hat, dtype=float))
        if v.shape != v_hat.shape:
            raise InputError("cost arguments have different dimensions")
        diff = v - v_hat
        if self.kind == "p-norm":
            return float(np.linalg.norm(diff, ord=self.p))
        if self.kind == "squared-euclidean":
            return float(diff @ diff)
        labels = list(self.label_indices)
        if np.any(v[labels] != v_hat[labels]):
            return math.inf
        free = diff[self.free_mask(v.size)]
        return float(free @ free)


# --------------------------------------------------------------------------- lifted problem


@dataclass(frozen=True)
class SigmaFieldSpec:
    """Which conditional moment constraint ``E[W | G] = 1`` applies.

    ``cell_coordinates`` selects the nominal V-coordinates that generate the
    sigma-field for the conditional kind (``None`` means all of them); atoms
    with identical values on those coordinates share one cell.
    """

    kind: str = "trivial"
    cell_coordinates: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("trivial", "condition-on-nominal-atom"):
            raise InputError(f"unknown sigma-field kind {self.kind!r}")

    def cells(self, nominal_v: np.ndarray) -> np.ndarray:
        """Cell label per nominal atom, numbered by first appearance."""
        n = nominal_v.shape[0]
        if self.kind == "trivial":
            return np.zeros(n, dtype=int)
        cols = nominal_v if self.cell_coordinates is None else nominal_v[:, list(self.cell_coordinates)]
        labels: dict[tuple, int] = {}
        out = np.empty(n, dtype=int)
        for i, row in enumerate(cols):
            out[i] = labels.setdefault(tuple(row.tolist()), len(labels))
        return out


@dataclass(frozen=True)
class ValueDomain:
    """Box used by oracles and grid fallbacks.

    When ``v_constrained`` is true the box is also the outcome set V seen by
    the solvers; otherwise V is the whole space and the box only bounds grids.
    """

    v_lower: tuple[float, ...]
    v_upper: tuple[float, ...]
    w_max: float = 4.0
    v_constrained: bool = False

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.v_lower))
        hi = tuple(float(x) for x in np.atleast_1d(self.v_upper))
        if len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
            raise InputError("value domain needs matching bounds with lower <= upper")
        if not self.w_max > 0:
            raise InputError("w_max must be positive")
        object.__setattr__(self, "v_lower", lo)
        object.__setattr__(self, "v_upper", hi)

    @classmethod
    def cube(cls, dim: int, half_width: float, **kw) -> "ValueDomain":
        return cls((-half_width,) * dim, (half_width,) * dim, **kw)

    @property
    def dim(self) -> int:
        return len(self.v_lower)

    def lower(self) -> np.ndarray:
        return np.array(self.v_lower)

    def upper(self) -> np.ndarray:
        return np.array(self.v_upper)


def lattice_points(lower, upper, step: float) -> np.ndarray:
    """Axis-aligned lattice ``lower + k * step`` inside ``[lower, upper]``, in scan order.

    The upper bound is included when it lies on the lattice (up to 1e-9 steps).
    """
    if not step > 0:
        raise InputError("lattice step must be positive")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    axes = []
    for lo, hi in zip(lower, upper):
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        axes.append(lo + step * np.arange(count))
    return np.array(list(itertools.product(*axes)), dtype=float)


@dataclass(frozen=True, eq=False)
class ClassicInstance:
    """A DRO problem before lifting: loss, ground cost, nominal measure and radius."""

    loss: PiecewiseAffineLoss
    ground_cost: GroundCost
    nominal: DiscreteMeasure
    radius: float
    value_domain: ValueDomain

    def __post_init__(self):
        if not self.radius >= 0:
            raise InputError("radius must be nonnegative")
        if self.loss.dim != self.nominal.dim:
            raise InputError("loss dimension does not match the nominal atoms")


@dataclass(frozen=True, eq=False)
class LiftedInstance:
    """The unified problem ``(f, V, W, G, nu_hat, c, r)`` with ``f(v, w) = l(v) * w``.

    Nominal atoms carry the W-coordinate last: row ``i`` is ``(v_hat_i, w_hat_i)``.
    ``lifted_cost`` is a :class:`otdro.lifting.LiftedCost`.
    """

    loss: PiecewiseAffineLoss
    lifted_cost: Any
    nominal: DiscreteMeasure
    sigma_field: SigmaFieldSpec
    radius: float
    value_domain: ValueDomain
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.radius >= 0:
            raise InputError("radius must be nonnegative")
        if np.any(self.nominal.atoms[:, -1] < 0):
            raise InputError("nominal W-coordinates must be nonnegative")
        if self.loss.dim != self.nominal.dim - 1:
            raise InputError("loss dimension must equal the V-dimension of the nominal atoms")

    @property
    def v_hat(self) -> np.ndarray:
        return self.nominal.atoms[:, :-1]

    @property
    def w_hat(self) -> np.ndarray:
        return self.nominal.atoms[:, -1]

    @property
    def weights(self) -> np.ndarray:
        return self.nominal.weights

    def objective(self, v, w) -> float:
        return ext_mul(self.loss(v), float(w))

    def cost(self, v, w, v_hat, w_hat) -> float:
        return self.lifted_cost(v, w, v_hat, w_hat)

    def nominal_risk(self) -> float:
        return math.fsum(
            wt * self.objective(v, w) for v, w, wt in zip(self.v_hat, self.w_hat, self.weights)
        )


# --------------------------------------------------------------------------- solver outputs


@dataclass(frozen=True)
class DualCertificate:
    """Optimal dual multipliers and the dual objective value.

    ``alpha_star`` is a float for the trivial sigma-field and a tuple with one
    value per conditioning cell otherwise.
    """

    lambda_star: float
    alpha_star: float | tuple[float, ...]
    objective: float
    iterations: int
    tolerance_achieved: float
    method: str = ""
    converged: bool = True
    at_lambda_zero: bool = False
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.lambda_star >= 0:
            raise InputError("lambda_star must be nonnegative")
        if not math.isfinite(self.objective):
            raise NumericalError("dual objective is not finite")


@dataclass(frozen=True, eq=False)
class TransportRecord:
    """Mass ``mass`` moved from nominal ``(v_hat, w_hat)`` to ``(v_star, w_star)``."""

    nominal: np.ndarray
    nominal_weight: float
    perturbed: np.ndarray
    weight: float
    mass: float

    def __post_init__(self):
        if not self.weight >= 0:
            raise InputError("weight multipliers must be nonnegative")
        object.__setattr__(self, "nominal", _frozen(self.nominal))
        object.__setattr__(self, "perturbed", _frozen(self.perturbed))


@dataclass(frozen=True, eq=False)
class WorstCaseCoupling:
    """Transport records of a worst-case plan plus the dual certificate."""

    records: tuple[TransportRecord, ...]
    certificate: DualCertificate
    primal_value: float = math.nan
    budget_used: float = math.nan

    def mean_weight(self) -> float:
        return math.fsum(rec.mass * rec.weight for rec in self.records)

    def weak_duality_gap(self) -> float:
        """``dual objective - primal value``; nonnegative up to solver tolerance."""
        return self.certificate.objective - self.primal_value

    def weak_duality_ok(self, tol: float = 1e-6) -> bool:
        return self.primal_value <= self.certificate.objective + tol * max(1.0, abs(self.certificate.objective))
