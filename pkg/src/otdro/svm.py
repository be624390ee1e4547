"""Worst-case distribution of a linear SVM under an interpolated KL/transport ball.

Synthetic data: ``beta_star ~ N(0, I_2)``, features ``x ~ N(0, I_2)``, labels
``y = sign(sign(beta_star . x) + noise)`` with ``noise ~ N(0, 1e-4)`` and
``sign(0) = +1``.  A linear SVM is fit by plain subgradient descent on the
average hinge loss, then each radius is solved with the label-guarded squared
cost and ``theta1 = theta2 = 1``.

Random numbers come from numpy's PCG64 bit generator: 64-bit raw outputs are
mapped to ``[0, 1)`` with ``(raw >> 11) * 2**-53`` and normals are drawn with
Marsaglia's polar method, so streams are reproducible across platforms.

Encoding: sample ``(x, y)`` becomes ``v = (y*x_1, y*x_2, y)``.  The hinge loss
``max(0, 1 - y*(beta.x + b))`` is then ``max((-beta, -b).v + 1, 0)``, squared
distances in ``x`` equal squared distances in ``y*x`` (``y**2 = 1``), and the
last coordinate carries both the label and the bias so the guard fixes both.
"""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DiscreteMeasure, GroundCost, InputError, PiecewiseAffineLoss, WorstCaseCoupling
from .divergences import KullbackLeibler
from .io import dumps, jsonable
from .lifting import build_interpolated
from .solvers import solve_kl_interpolated

GENERATOR = "numpy PCG64, uniforms (raw >> 11) * 2**-53, normals by Marsaglia polar method"
MAX_SEED_SUBSTITUTIONS = 1000


class PolarNormal:
    """Seeded uniform and standard-normal streams (see module docstring)."""

    def __init__(self, seed: int):
        self._bits = np.random.PCG64(int(seed))
        self._spare: float | None = None

    def uniform(self) -> float:
        raw = int(self._bits.random_raw())
        return (raw >> 11) * 2.0**-53

    def normal(self) -> float:
        if self._spare is not None:
            out, self._spare = self._spare, None
            return out
        while True:
            u = 2.0 * self.uniform() - 1.0
            v = 2.0 * self.uniform() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                break
        f = math.sqrt(-2.0 * math.log(s) / s)
        self._spare = v * f
        return u * f

    def normals(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.array([self.normal() for _ in range(count)]).reshape(shape)


def sign(x) -> np.ndarray:
    """Sign with ``sign(0) = +1``."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class SvmExperimentConfig:
    n: int = 32
    radii: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5)
    theta1: float = 1.0
    theta2: float = 1.0
    seed: int = 0
    noise_variance: float = 1e-4
    steps: int = 10_000
    out: str | None = None


@dataclass(frozen=True)
class SvmData:
    seed: int
    beta_star: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def generate_data(n: int, seed: int, noise_variance: float = 1e-4) -> SvmData:
    rng = PolarNormal(seed)
    beta_star = rng.normals(2)
    x = rng.normals(n, 2)
    pseudo = sign(x @ beta_star)
    noise = math.sqrt(noise_variance) * rng.normals(n)
    return SvmData(int(seed), beta_star, x, sign(pseudo + noise))


def train_svm(x: np.ndarray, y: np.ndarray, steps: int = 10_000) -> tuple[np.ndarray, float]:
    """Subgradient descent on the average hinge loss, step ``1/sqrt(t)``, zero start, no regularization."""
    n = x.shape[0]
    beta, b = np.zeros(x.shape[1]), 0.0
    for t in range(1, steps + 1):
        active = y * (x @ beta + b) < 1.0
        g_beta = -(y[active, None] * x[active]).sum(axis=0) / n
        g_b = -y[active].sum() / n
        step = 1.0 / math.sqrt(t)
        beta = beta - step * g_beta
        b = b - step * g_b
    return beta, float(b)


def hinge_loss(beta: np.ndarray, b: float) -> PiecewiseAffineLoss:
    """Hinge loss on the encoded space ``v = (y*x, y)``."""
    return PiecewiseAffineLoss.from_pieces([(np.append(-beta, -b), 1.0), (np.zeros(beta.size + 1), 0.0)])


def encode(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.hstack([y[:, None] * x, y[:, None]])


def decode(v: np.ndarray) -> tuple[np.ndarray, float]:
    y = float(v[-1])
    return v[:-1] * y, y


@dataclass
class RadiusResult:
    radius: float
    coupling: WorstCaseCoupling
    rows: list  # (x1*, x2*, y, w*, mass, nominal index)

    @property
    def objective(self) -> float:
        return self.coupling.certificate.objective


@dataclass
class SvmExperiment:
    config: SvmExperimentConfig
    data: SvmData
    beta_hat: np.ndarray
    b_hat: float
    empirical_risk: float
    results: list = field(default_factory=list)
    substitutions: list = field(default_factory=list)

    def metadata(self) -> dict:
        return jsonable({
            "generator": GENERATOR,
            "requested_seed": self.config.seed,
            "seed_used": self.data.seed,
            "seed_substitutions": self.substitutions,
            "n": self.config.n,
            "noise_variance": self.config.noise_variance,
            "theta1": self.config.theta1,
            "theta2": self.config.theta2,
            "training": {
                "method": "subgradient descent on the average hinge loss",
                "steps": self.config.steps,
                "step_size": "1/sqrt(t)",
                "init": "zero",
                "regularization": "none",
                "standardization": "none (raw features)",
            },
            "beta_star": self.data.beta_star,
            "beta_hat": self.beta_hat,
            "b_hat": self.b_hat,
            "empirical_risk": self.empirical_risk,
            "radii": [
                {
                    "radius": r.radius,
                    "objective": r.objective,
                    "lambda_star": r.coupling.certificate.lambda_star,
                    "primal_value": r.coupling.primal_value,
                    "mean_weight": r.coupling.mean_weight(),
                    "weak_duality_ok": r.coupling.weak_duality_ok(),
                }
                for r in self.results
            ],
        })


def solve_radius(x, y, beta_hat, b_hat, radius, theta1=1.0, theta2=1.0) -> RadiusResult:
    v = encode(x, y)
    mu = DiscreteMeasure.uniform(v)
    cost = GroundCost("squared-euclidean-label-guard", label_indices=(v.shape[1] - 1,))
    inst = build_interpolated(hinge_loss(beta_hat, b_hat), cost, KullbackLeibler(), mu, radius, theta1, theta2)
    sol = solve_kl_interpolated(inst)
    index = {tuple(row.tolist()): i for i, row in enumerate(v)}
    rows = []
    for rec in sol.records:
        xs, ys = decode(np.asarray(rec.perturbed))
        i = index[tuple(np.asarray(rec.nominal).tolist())]
        rows.append((xs[0], xs[1], ys, rec.weight, rec.mass, i))
    return RadiusResult(float(radius), sol, rows)


def run_experiment(config: SvmExperimentConfig = SvmExperimentConfig()) -> SvmExperiment:
    if config.n < 2:
        raise InputError("the SVM experiment needs at least two samples")
    seed, subs = config.seed, []
    while True:
        data = generate_data(config.n, seed, config.noise_variance)
        if np.unique(data.labels).size == 2:
            break
        subs.append({"seed": seed, "reason": "all labels in one class"})
        if len(subs) >= MAX_SEED_SUBSTITUTIONS:
            raise InputError(f"{len(subs)} consecutive seeds gave one-class data")
        seed += 1
    beta_hat, b_hat = train_svm(data.features, data.labels, config.steps)
    risk = float(np.mean(np.maximum(0.0, 1.0 - data.labels * (data.features @ beta_hat + b_hat))))
    exp = SvmExperiment(config, data, beta_hat, b_hat, risk, substitutions=subs)
    for r in config.radii:
        exp.results.append(solve_radius(data.features, data.labels, beta_hat, b_hat, r, config.theta1, config.theta2))
    if config.out is not None:
        write_outputs(exp, config.out)
    return exp


# --------------------------------------------------------------------------- artifacts


def csv_text(result: RadiusResult) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x1_star", "x2_star", "y", "w_star", "mass", "nominal_index"])
    for x1, x2, y, w, m, i in result.rows:
        writer.writerow(["%.17g" % x1, "%.17g" % x2, "%.17g" % y, "%.17g" % w, "%.17g" % m, i])
    return buf.getvalue()


SVG_SIZE = 400
SVG_PAD = 30


def _frame(points: np.ndarray):
    lo = points.min(axis=0) - 0.5
    hi = points.max(axis=0) + 0.5
    span = float(max(hi - lo))
    lo = (lo + hi) / 2 - span / 2
    scale = (SVG_SIZE - 2 * SVG_PAD) / span

    def to_px(p):
        return SVG_PAD + (p[0] - lo[0]) * scale, SVG_SIZE - SVG_PAD - (p[1] - lo[1]) * scale

    return lo, lo + span, to_px


def _boundary_segment(beta, b, lo, hi):
    """Part of the line ``beta.x + b = 0`` inside the box ``[lo, hi]``."""
    pts = []
    if abs(beta[1]) > 1e-12:
        for x in (lo[0], hi[0]):
            pts.append((x, -(b + beta[0] * x) / beta[1]))
    if abs(beta[0]) > 1e-12:
        for y in (lo[1], hi[1]):
            pts.append((-(b + beta[1] * y) / beta[0], y))
    inside = sorted({(round(px, 12), round(py, 12)) for px, py in pts
                     if lo[0] - 1e-9 <= px <= hi[0] + 1e-9 and lo[1] - 1e-9 <= py <= hi[1] + 1e-9})
    if len(inside) < 2:
        return None
    return inside[0], inside[-1]


def _svg(title: str, body: list) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
            f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">')
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>',
        head,
        f"<title>{title}</title>",
        f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>',
        *body,
        "</svg>",
        "",
    ])


def _weight_color(w: float, w_max: float) -> str:
    t = 0.0 if w_max <= 0 else min(1.0, w / w_max)
    red, blue = int(round(255 * t)), int(round(255 * (1 - t)))
    return f"#{red:02x}40{blue:02x}"


def svg_perturbed(exp: SvmExperiment, result: RadiusResult) -> str:
    pts = np.array([[r[0], r[1]] for r in result.rows] + exp.data.features.tolist())
    lo, hi, to_px = _frame(pts)
    body = []
    seg = _boundary_segment(exp.beta_hat, exp.b_hat, lo, hi)
    if seg is not None:
        (x1, y1), (x2, y2) = to_px(seg[0]), to_px(seg[1])
        body.append(f'<line x1="{x1:.3f}" y1="{y1:.3f}" x2="{x2:.3f}" y2="{y2:.3f}" stroke="black" stroke-width="1.5"/>')
    for x1, x2, y, w, m, i in result.rows:
        px, py = to_px((x1, x2))
        color = "#1f77b4" if y > 0 else "#d62728"
        body.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="4" fill="{color}" fill-opacity="0.8"/>')
    return _svg(f"perturbed points, r = {result.radius:g}", body)


def svg_weights(exp: SvmExperiment, result: RadiusResult) -> str:
    lo, hi, to_px = _frame(exp.data.features)
    n = exp.data.features.shape[0]
    weight = np.zeros(n)
    for _, _, _, w, m, i in result.rows:
        weight[i] += w * m * n  # mass-averaged weight multiplier of atom i
    w_max = float(weight.max())
    body = []
    seg = _boundary_segment(exp.beta_hat, exp.b_hat, lo, hi)
    if seg is not None:
        (x1, y1), (x2, y2) = to_px(seg[0]), to_px(seg[1])
        body.append(f'<line x1="{x1:.3f}" y1="{y1:.3f}" x2="{x2:.3f}" y2="{y2:.3f}" stroke="gray" stroke-width="1"/>')
    for i, (x, y) in enumerate(zip(exp.data.features, exp.data.labels)):
        px, py = to_px(x)
        shape = "circle" if y > 0 else "rect"
        color = _weight_color(weight[i], w_max)
        if shape == "circle":
            body.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="5" fill="{color}"/>')
        else:
            body.append(f'<rect x="{px - 4.5:.3f}" y="{py - 4.5:.3f}" width="9" height="9" fill="{color}"/>')
    return _svg(f"nominal points colored by w*, r = {result.radius:g}", body)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def radius_tag(r: float) -> str:
    return f"r{r:g}".replace(".", "p")


def write_outputs(exp: SvmExperiment, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for res in exp.results:
        tag = radius_tag(res.radius)
        for name, text in (
            (f"worst_case_{tag}.csv", csv_text(res)),
            (f"perturbed_{tag}.svg", svg_perturbed(exp, res)),
            (f"weights_{tag}.svg", svg_weights(exp, res)),
        ):
            _atomic_write(out / name, text)
            written.append(out / name)
    _atomic_write(out / "metadata.json", dumps(exp.metadata()))
    written.append(out / "metadata.json")
    return written
