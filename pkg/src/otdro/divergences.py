"""Entropy functions, their convex conjugates and Csiszar duals, and the
generalized phi-divergence between finitely supported measures.

Every entry exposes

* ``phi(t)`` for ``t >= 0`` with ``phi(0)`` taken as the right limit,
* ``phi0`` and ``recession`` (the slope ``lim phi(t)/t``), both analytic,
* ``conjugate(s) = sup_{t>=0} s*t - phi(t)`` and its derivative, the maximizing ``t``,
* ``dual()``, the entry ``psi(t) = t * phi(1/t)``.

Conjugates and their derivatives accept scalars or arrays.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize, special

from .core import DiscreteMeasure, InputError, UnsupportedError

INF = math.inf


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


class EntropyFunction:
    """Base class; subclasses fill in the formulas."""

    name = ""
    phi0 = 0.0
    recession = INF
    #: conjugate_derivative is available (continuous) on the whole finite domain
    smooth_conjugate = True

    @property
    def params(self) -> dict:
        return {}

    def _phi(self, t: float) -> float:
        raise NotImplementedError

    def __call__(self, t: float) -> float:
        t = float(t)
        if t < 0 or math.isnan(t):
            raise InputError(f"{self.name}: argument must be nonnegative, got {t}")
        if t == 0.0:
            return self.phi0
        if math.isinf(t):
            return INF
        try:
            return float(self._phi(t))
        except OverflowError:
            return INF  # every catalog entry is nonnegative, so overflow means +inf

    def conjugate(self, s):
        raise NotImplementedError

    def conjugate_derivative(self, s):
        """The maximizer ``t*(s)`` of ``s*t - phi(t)``, i.e. the derivative of the conjugate."""
        raise UnsupportedError(f"{self.name}: conjugate is not differentiable")

    def dual(self) -> "EntropyFunction":
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}

    def __eq__(self, other):
        return type(self) is type(other) and self.params == other.params

    def __hash__(self):
        return hash((self.name, tuple(sorted(self.params.items()))))

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"


class KullbackLeibler(EntropyFunction):
    name = "kullback-leibler"
    phi0 = 1.0
    recession = INF

    def _phi(self, t):
        return t * math.log(t) - t + 1.0

    def conjugate(self, s):
        return _out(np.expm1(np.asarray(s, dtype=float)))

    def conjugate_derivative(self, s):
        return _out(np.exp(np.asarray(s, dtype=float)))

    def dual(self):
        return Burg()


class Burg(EntropyFunction):
    name = "burg"
    phi0 = INF
    recession = 1.0

    def _phi(self, t):
        return -math.log(t) + t - 1.0

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(s < 1.0, -np.log1p(-np.minimum(s, 1.0)), INF)
        return _out(val)

    def conjugate_derivative(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return _out(np.where(s < 1.0, 1.0 / (1.0 - np.minimum(s, 1.0)), INF))

    def dual(self):
        return KullbackLeibler()


class JDivergence(EntropyFunction):
    name = "j-divergence"
    phi0 = INF
    recession = INF

    def _phi(self, t):
        return (t - 1.0) * math.log(t)

    def _tstar(self, s):
        # stationarity log t + 1 - 1/t = s; with x = 1/t this is x + log x = 1 - s
        x = np.real(special.wrightomega(1.0 - np.asarray(s, dtype=float)))
        return 1.0 / x

    def conjugate(self, s):
        t = self._tstar(s)
        return _out(t + 1.0 / t + np.asarray(s, dtype=float) - 2.0)

    def conjugate_derivative(self, s):
        return _out(self._tstar(s))

    def dual(self):
        return JDivergence()


class ChiSquared(EntropyFunction):
    name = "chi2"
    phi0 = INF
    recession = 1.0

    def _phi(self, t):
        return (t - 1.0) ** 2 / t

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        val = np.where(s <= 1.0, 2.0 - 2.0 * np.sqrt(np.maximum(1.0 - s, 0.0)), INF)
        return _out(val)

    def conjugate_derivative(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return _out(np.where(s < 1.0, 1.0 / np.sqrt(np.maximum(1.0 - s, 0.0)), INF))

    def dual(self):
        return ModifiedChiSquared()


class ModifiedChiSquared(EntropyFunction):
    name = "modified-chi2"
    phi0 = 1.0
    recession = INF

    def _phi(self, t):
        return (t - 1.0) ** 2

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        return _out(np.where(s >= -2.0, s + 0.25 * s * s, -1.0))

    def conjugate_derivative(self, s):
        s = np.asarray(s, dtype=float)
        return _out(np.maximum(0.0, 1.0 + 0.5 * s))

    def dual(self):
        return ChiSquared()


class Hellinger(EntropyFunction):
    name = "hellinger"
    phi0 = 1.0
    recession = 1.0

    def _phi(self, t):
        return (math.sqrt(t) - 1.0) ** 2

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(s < 1.0, s / (1.0 - np.minimum(s, 1.0)), INF)
        return _out(val)

    def conjugate_derivative(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return _out(np.where(s < 1.0, (1.0 - np.minimum(s, 1.0)) ** -2.0, INF))

    def dual(self):
        return Hellinger()


class ChiOrderN(EntropyFunction):
    name = "chi-order-n"
    phi0 = 1.0
    recession = INF

    def __init__(self, n: float = 3.0):
        n = float(n)
        if not n > 1.0:
            raise InputError("chi-order-n needs n > 1")
        self.n = n

    @property
    def params(self):
        return {"n": self.n}

    def _phi(self, t):
        return abs(t - 1.0) ** self.n

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        n = self.n
        val = s + (n - 1.0) * (np.abs(s) / n) ** (n / (n - 1.0))
        return _out(np.where(s >= -n, val, -1.0))

    def conjugate_derivative(self, s):
        s = np.asarray(s, dtype=float)
        n = self.n
        t = 1.0 + np.sign(s) * (np.abs(s) / n) ** (1.0 / (n - 1.0))
        return _out(np.maximum(t, 0.0))

    def dual(self):
        return ChiOrderNDual(self.n)


class ChiOrderNDual(EntropyFunction):
    """``psi(t) = t * |1/t - 1|^n``, the Csiszar dual of the order-n chi divergence.

    There is no closed-form conjugate; it is computed by a root search on the
    stationarity condition, which is monotone in ``t``.
    """

    name = "chi-order-n-dual"
    phi0 = INF
    recession = 1.0

    def __init__(self, n: float = 3.0):
        n = float(n)
        if not n > 1.0:
            raise InputError("chi-order-n-dual needs n > 1")
        self.n = n

    @property
    def params(self):
        return {"n": self.n}

    def _phi(self, t):
        return abs(t - 1.0) ** self.n * t ** (1.0 - self.n)

    def _dphi(self, t):
        n = self.n
        u = t - 1.0
        return n * abs(u) ** (n - 1.0) * math.copysign(1.0, u) * t ** (1.0 - n) + (1.0 - n) * abs(u) ** n * t ** -n

    def _tstar_scalar(self, s):
        if s >= 1.0:
            return INF
        # psi' increases from -inf (t -> 0) to 1 (t -> inf); search over log t
        g = lambda x: s - self._dphi(math.exp(x))
        lo, hi = -1.0, 1.0
        while g(lo) <= 0:
            lo *= 2.0
        while g(hi) >= 0:
            hi *= 2.0
            if hi > 700:
                return INF
        return math.exp(optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))

    def _conj_scalar(self, s):
        if s > 1.0:
            return INF
        if s == 1.0:
            return self.n  # limit of t - psi(t) as t -> inf
        t = self._tstar_scalar(s)
        return s * t - self._phi(t)

    def conjugate(self, s):
        return _out(np.vectorize(self._conj_scalar, otypes=[float])(s))

    def conjugate_derivative(self, s):
        return _out(np.vectorize(self._tstar_scalar, otypes=[float])(s))

    def dual(self):
        return ChiOrderN(self.n)


class TotalVariation(EntropyFunction):
    name = "total-variation"
    phi0 = 1.0
    recession = 1.0
    smooth_conjugate = False

    def _phi(self, t):
        return abs(t - 1.0)

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        return _out(np.where(s <= 1.0, np.maximum(s, -1.0), INF))

    def dual(self):
        return TotalVariation()


class CressieRead(EntropyFunction):
    name = "cressie-read"

    def __init__(self, theta: float = 0.5):
        theta = float(theta)
        if theta in (0.0, 1.0) or not math.isfinite(theta):
            raise InputError("cressie-read needs theta not in {0, 1}")
        self.theta = theta
        self.phi0 = 1.0 / theta if theta > 0 else INF
        self.recession = 1.0 / (1.0 - theta) if theta < 1 else INF

    @property
    def params(self):
        return {"theta": self.theta}

    def _phi(self, t):
        th = self.theta
        return (1.0 - th + th * t - t**th) / (th * (1.0 - th))

    def _tstar(self, s):
        th = self.theta
        base = 1.0 + (th - 1.0) * s
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(base > 0, np.abs(base) ** (1.0 / (th - 1.0)), np.nan)
        if th > 1:
            t = np.where(base > 0, t, 0.0)
        else:
            t = np.where(base > 0, t, INF)
        return t

    def conjugate(self, s):
        s = np.asarray(s, dtype=float)
        th = self.theta
        t = self._tstar(s)
        with np.errstate(invalid="ignore", over="ignore"):
            interior = s * t - (1.0 - th + th * t - t**th) / (th * (1.0 - th))
        val = np.where(np.isfinite(t), interior, INF)
        if th > 1:
            val = np.where(t == 0.0, -1.0 / th, val)
        elif th < 0:
            val = np.where(s == self.recession, -1.0 / th, val)
        return _out(val)

    def conjugate_derivative(self, s):
        return _out(self._tstar(np.asarray(s, dtype=float)))

    def dual(self):
        return CressieRead(1.0 - self.theta)


CATALOG = {
    cls.name: cls
    for cls in (
        KullbackLeibler,
        Burg,
        JDivergence,
        ChiSquared,
        ModifiedChiSquared,
        Hellinger,
        ChiOrderN,
        ChiOrderNDual,
        TotalVariation,
        CressieRead,
    )
}


def get_entropy(name: str, param: float | None = None, **params) -> EntropyFunction:
    """Look up a catalog entry by name; ``param`` is ``n`` or ``theta`` where relevant."""
    if isinstance(name, dict):
        spec = dict(name)
        return get_entropy(spec.pop("name"), **spec)
    try:
        cls = CATALOG[name]
    except KeyError:
        raise InputError(f"unknown entropy function {name!r}; choose from {sorted(CATALOG)}") from None
    if cls in (ChiOrderN, ChiOrderNDual):
        n = params.pop("n", param)
        return cls(3.0 if n is None else n)
    if cls is CressieRead:
        th = params.pop("theta", param)
        return cls(0.5 if th is None else th)
    return cls()


# --------------------------------------------------------------------------- module-level API


def phi_eval(phi: EntropyFunction, t: float) -> float:
    return phi(t)


def phi_conjugate(phi: EntropyFunction, s: float) -> float:
    return float(phi.conjugate(float(s)))


def csiszar_dual(phi: EntropyFunction) -> EntropyFunction:
    return phi.dual()


def _ext_mul(a: float, b: float) -> float:
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


def align_measures(mu: DiscreteMeasure, mu_hat: DiscreteMeasure):
    """Weights of both measures on the union of their supports (exact atom matching)."""
    if mu.dim != mu_hat.dim:
        raise InputError("measures live in spaces of different dimension")
    index: dict[tuple, int] = {}
    for z in list(mu.atoms) + list(mu_hat.atoms):
        index.setdefault(tuple(z.tolist()), len(index))
    p = np.zeros(len(index))
    q = np.zeros(len(index))
    for z, w in zip(mu.atoms, mu.weights):
        p[index[tuple(z.tolist())]] += w
    for z, w in zip(mu_hat.atoms, mu_hat.weights):
        q[index[tuple(z.tolist())]] += w
    return p, q


def divergence_decomposed(phi: EntropyFunction, mu: DiscreteMeasure, mu_hat: DiscreteMeasure):
    """``(on_support, off_support)`` parts of the generalized divergence.

    The reference measure is uniform on the union of supports, so all
    densities are weight ratios.  ``on_support`` integrates
    ``phi(dmu/dmu_hat)`` against ``mu_hat``; ``off_support`` is the recession
    slope times the mass ``mu`` puts where ``mu_hat`` has none.
    """
    p, q = align_measures(mu, mu_hat)
    on_terms = []
    off_mass = []
    for pj, qj in zip(p, q):
        if qj > 0:
            on_terms.append(_ext_mul(qj, phi(pj / qj)))
        elif pj > 0:
            off_mass.append(pj)
    on = INF if INF in on_terms else math.fsum(on_terms)
    off = _ext_mul(phi.recession, math.fsum(off_mass))
    return on, off


def generalized_divergence(phi: EntropyFunction, mu: DiscreteMeasure, mu_hat: DiscreteMeasure) -> float:
    """Generalized phi-divergence ``D_phi(mu, mu_hat)``, possibly ``+inf``.

    Computed as the sum of the on-support and off-support parts, so the
    decomposition identity holds bit-for-bit.
    """
    on, off = divergence_decomposed(phi, mu, mu_hat)
    return on + off
