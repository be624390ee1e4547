"""JSON documents for classic instances, lifted instances and solver results.

Every document carries ``format`` and ``version``; unknown fields are
rejected.  Infinite numbers are written as the strings ``"inf"``/``"-inf"``
so the output stays strict JSON.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .core import (
    ClassicInstance,
    DiscreteMeasure,
    DualCertificate,
    GroundCost,
    InputError,
    LiftedInstance,
    PiecewiseAffineLoss,
    SigmaFieldSpec,
    ValueDomain,
    WorstCaseCoupling,
)
from .divergences import get_entropy
from .lifting import LiftedCost, default_value_domain

INSTANCE_FORMAT = "otdro-instance"
LIFTED_FORMAT = "otdro-lifted"
RESULT_FORMAT = "otdro-result"
VERSION = 1

INSTANCE_FIELDS = {"format", "version", "loss", "cost", "nominal", "sigma_field", "radius", "value_domain",
                   "phi", "reference", "worst_scenario"}
LIFTED_FIELDS = {"format", "version", "loss", "lifted_cost", "nominal", "sigma_field", "radius", "value_domain",
                 "metadata"}


def num(x) -> float | str:
    """JSON-safe number: infinities become strings."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def parse_num(x) -> float:
    if isinstance(x, str):
        if x in ("inf", "-inf", "nan"):
            return float(x)
        raise InputError(f"expected a number, got {x!r}")
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InputError(f"expected a number, got {x!r}")
    return float(x)


def jsonable(obj):
    """Recursively convert numpy values and infinities for ``json.dumps``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return num(obj)
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, doc: dict) -> None:
    """Write atomically: a temporary sibling file is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(doc))
    tmp.replace(path)


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read JSON from {path}: {exc}") from exc


def _check_fields(doc: dict, allowed: set, required: set, fmt: str | None):
    if not isinstance(doc, dict):
        raise InputError("document must be a JSON object")
    extra = set(doc) - allowed
    if extra:
        raise InputError(f"unknown fields: {sorted(extra)}")
    missing = required - set(doc)
    if missing:
        raise InputError(f"missing fields: {sorted(missing)}")
    if fmt is not None and "format" in doc and doc["format"] != fmt:
        raise InputError(f"expected format {fmt!r}, got {doc['format']!r}")
    if doc.get("version", VERSION) != VERSION:
        raise InputError(f"unsupported version {doc.get('version')!r}")


# --------------------------------------------------------------------------- pieces


def loss_to_dict(loss: PiecewiseAffineLoss) -> dict:
    return {"pieces": [{"a": a.tolist(), "b": float(b)} for a, b in zip(loss.slopes, loss.intercepts)]}


def loss_from_dict(doc) -> PiecewiseAffineLoss:
    if not isinstance(doc, dict) or set(doc) != {"pieces"}:
        raise InputError("loss must be {'pieces': [{'a': [...], 'b': ...}, ...]}")
    pieces = []
    for piece in doc["pieces"]:
        if not isinstance(piece, dict) or set(piece) != {"a", "b"}:
            raise InputError("each loss piece must have exactly the fields 'a' and 'b'")
        pieces.append((np.atleast_1d(np.asarray(piece["a"], dtype=float)), parse_num(piece["b"])))
    if not pieces:
        raise InputError("loss needs at least one piece")
    return PiecewiseAffineLoss.from_pieces(pieces)


def measure_to_dict(measure: DiscreteMeasure) -> dict:
    return {"atoms": measure.atoms.tolist(), "weights": measure.weights.tolist()}


def measure_from_dict(doc) -> DiscreteMeasure:
    if not isinstance(doc, dict) or not {"atoms"} <= set(doc) <= {"atoms", "weights"}:
        raise InputError("measure must be {'atoms': [...], 'weights': [...]}")
    atoms = np.asarray(doc["atoms"], dtype=float)
    if "weights" not in doc:
        return DiscreteMeasure.uniform(atoms)
    return DiscreteMeasure(atoms, np.asarray(doc["weights"], dtype=float))


def ground_cost_to_dict(gc: GroundCost) -> dict:
    params: dict = {}
    if gc.kind == "p-norm":
        params["p"] = num(gc.p)
    if gc.label_indices:
        params["label_indices"] = list(gc.label_indices)
    return {"kind": gc.kind, "params": params}


def ground_cost_from_dict(doc) -> GroundCost:
    if not isinstance(doc, dict) or not {"kind"} <= set(doc) <= {"kind", "params"}:
        raise InputError("cost must be {'kind': ..., 'params': {...}}")
    params = dict(doc.get("params", {}))
    extra = set(params) - {"p", "label_indices"}
    if extra:
        raise InputError(f"unknown cost parameters: {sorted(extra)}")
    return GroundCost(doc["kind"], parse_num(params.get("p", 2.0)), tuple(params.get("label_indices", ())))


def sigma_to_dict(sf: SigmaFieldSpec) -> dict:
    out: dict = {"kind": sf.kind}
    if sf.cell_coordinates is not None:
        out["cell_coordinates"] = list(sf.cell_coordinates)
    return out


def sigma_from_dict(doc) -> SigmaFieldSpec:
    if isinstance(doc, str):
        return SigmaFieldSpec(doc)
    if not isinstance(doc, dict) or not {"kind"} <= set(doc) <= {"kind", "cell_coordinates"}:
        raise InputError("sigma_field must be {'kind': ..., 'cell_coordinates': [...]}")
    cc = doc.get("cell_coordinates")
    return SigmaFieldSpec(doc["kind"], None if cc is None else tuple(int(c) for c in cc))


def domain_to_dict(vd: ValueDomain) -> dict:
    return {"lower": list(vd.v_lower), "upper": list(vd.v_upper), "w_max": vd.w_max, "constrained": vd.v_constrained}


def domain_from_dict(doc) -> ValueDomain:
    if not isinstance(doc, dict) or not {"lower", "upper"} <= set(doc) <= {"lower", "upper", "w_max", "constrained"}:
        raise InputError("value_domain must be {'lower', 'upper', 'w_max', 'constrained'}")
    return ValueDomain(tuple(doc["lower"]), tuple(doc["upper"]), float(doc.get("w_max", 4.0)),
                       bool(doc.get("constrained", False)))


# --------------------------------------------------------------------------- classic instances


def instance_to_dict(inst: ClassicInstance, **extras) -> dict:
    doc = {
        "format": INSTANCE_FORMAT,
        "version": VERSION,
        "loss": loss_to_dict(inst.loss),
        "cost": ground_cost_to_dict(inst.ground_cost),
        "nominal": measure_to_dict(inst.nominal),
        "sigma_field": {"kind": "trivial"},
        "radius": inst.radius,
        "value_domain": domain_to_dict(inst.value_domain),
    }
    for key, value in extras.items():
        if key not in INSTANCE_FIELDS:
            raise InputError(f"unknown instance field {key!r}")
        doc[key] = value
    return doc


def instance_from_dict(doc: dict) -> tuple[ClassicInstance, dict]:
    """Classic instance plus the optional extras (``phi``, ``reference``, ``worst_scenario``)."""
    _check_fields(doc, INSTANCE_FIELDS, {"loss", "cost", "nominal", "radius"}, INSTANCE_FORMAT)
    nominal = measure_from_dict(doc["nominal"])
    vd = domain_from_dict(doc["value_domain"]) if "value_domain" in doc else default_value_domain(nominal.atoms)
    inst = ClassicInstance(loss_from_dict(doc["loss"]), ground_cost_from_dict(doc["cost"]), nominal,
                           parse_num(doc["radius"]), vd)
    if "sigma_field" in doc and sigma_from_dict(doc["sigma_field"]).kind != "trivial":
        raise InputError("classic instances use the trivial sigma-field; lifts choose their own")
    extras = {}
    if "phi" in doc:
        extras["phi"] = get_entropy(doc["phi"])
    if "reference" in doc:
        extras["reference"] = measure_from_dict(doc["reference"])
    if "worst_scenario" in doc:
        extras["worst_scenario"] = np.atleast_1d(np.asarray(doc["worst_scenario"], dtype=float))
    return inst, extras


# --------------------------------------------------------------------------- lifted instances


def lifted_cost_from_dict(doc) -> LiftedCost:
    allowed = {"kind", "ground_cost", "phi", "theta1", "theta2", "mix_epsilon", "reg_epsilon"}
    if not isinstance(doc, dict) or "kind" not in doc or set(doc) - allowed:
        raise InputError("malformed lifted_cost")
    gc = None
    if "ground_cost" in doc:
        g = doc["ground_cost"]
        gc = GroundCost(g["kind"], parse_num(g.get("p", 2.0)), tuple(g.get("label_indices", ())))
    return LiftedCost(
        doc["kind"],
        ground_cost=gc,
        phi=get_entropy(doc["phi"]) if "phi" in doc else None,
        theta1=parse_num(doc.get("theta1", 1.0)),
        theta2=parse_num(doc.get("theta2", 1.0)),
        mix_epsilon=doc.get("mix_epsilon"),
        reg_epsilon=doc.get("reg_epsilon"),
    )


def lifted_to_dict(inst: LiftedInstance) -> dict:
    cost = inst.lifted_cost.to_dict()
    if "ground_cost" in cost:
        cost["ground_cost"] = dict(cost["ground_cost"], p=num(cost["ground_cost"]["p"]))
    return {
        "format": LIFTED_FORMAT,
        "version": VERSION,
        "loss": loss_to_dict(inst.loss),
        "lifted_cost": cost,
        "nominal": measure_to_dict(inst.nominal),
        "sigma_field": sigma_to_dict(inst.sigma_field),
        "radius": inst.radius,
        "value_domain": domain_to_dict(inst.value_domain),
        "metadata": jsonable(inst.metadata),
    }


def lifted_from_dict(doc: dict) -> LiftedInstance:
    _check_fields(doc, LIFTED_FIELDS, LIFTED_FIELDS - {"format", "version", "metadata"}, LIFTED_FORMAT)
    return LiftedInstance(
        loss=loss_from_dict(doc["loss"]),
        lifted_cost=lifted_cost_from_dict(doc["lifted_cost"]),
        nominal=measure_from_dict(doc["nominal"]),
        sigma_field=sigma_from_dict(doc["sigma_field"]),
        radius=parse_num(doc["radius"]),
        value_domain=domain_from_dict(doc["value_domain"]),
        metadata=dict(doc.get("metadata", {})),
    )


# --------------------------------------------------------------------------- results


def result_to_dict(sol: WorstCaseCoupling, empirical_risk: float | None = None, extra_diagnostics=None) -> dict:
    cert = sol.certificate
    alpha = cert.alpha_star
    diagnostics = {
        "iterations": cert.iterations,
        "tolerance_achieved": cert.tolerance_achieved,
        "method": cert.method,
        "converged": cert.converged,
        "at_lambda_zero": cert.at_lambda_zero,
        "notes": list(cert.notes),
        "primal_value": sol.primal_value,
        "budget_used": sol.budget_used,
        "mean_weight": sol.mean_weight(),
        "weak_duality_gap": sol.weak_duality_gap(),
        "weak_duality_ok": sol.weak_duality_ok(),
    }
    if empirical_risk is not None:
        diagnostics["empirical_risk"] = empirical_risk
    diagnostics.update(extra_diagnostics or {})
    return jsonable({
        "format": RESULT_FORMAT,
        "version": VERSION,
        "objective": cert.objective,
        "lambda_star": cert.lambda_star,
        "alpha_star": list(alpha) if isinstance(alpha, tuple) else alpha,
        "records": [
            {"nominal": r.nominal, "nominal_weight": r.nominal_weight, "perturbed": r.perturbed,
             "weight": r.weight, "mass": r.mass}
            for r in sol.records
        ],
        "diagnostics": diagnostics,
    })


def certificate_from_result(doc: dict) -> DualCertificate:
    if doc.get("format") != RESULT_FORMAT:
        raise InputError("not an otdro-result document")
    diag = doc.get("diagnostics", {})
    alpha = doc["alpha_star"]
    alpha = tuple(parse_num(a) for a in alpha) if isinstance(alpha, list) else parse_num(alpha)
    return DualCertificate(
        lambda_star=parse_num(doc["lambda_star"]),
        alpha_star=alpha,
        objective=parse_num(doc["objective"]),
        iterations=int(diag.get("iterations", 0)),
        tolerance_achieved=parse_num(diag.get("tolerance_achieved", 0.0)),
        method=str(diag.get("method", "")),
        converged=bool(diag.get("converged", True)),
        at_lambda_zero=bool(diag.get("at_lambda_zero", False)),
        notes=tuple(diag.get("notes", ())),
    )
