"""Command-line interface: ``otdro {lift, solve, oracle, emit-conic, svm-demo, divergence}``.

Exit codes: 0 success, 2 input error, 3 infeasible or unbounded, 4 numerical
failure (including failed certificate checks).  ``OTDRO_LOG`` sets the log
level (``debug``, ``info``, ``warning``, ``error``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import io
from .conic import build_conic, serialize_conic, verify_certificate
from .core import (
    EvaluationError,
    InfeasibleError,
    InputError,
    NumericalError,
    OTDROError,
    UnboundedError,
)
from .divergences import divergence_decomposed, get_entropy
from .lifting import DEFAULT_MIX_EPSILON, build_interpolated, lift_phi_divergence, lift_sinkhorn, lift_wasserstein
from .oracle import lp_primal_trace
from .solvers import solve
from .svm import SvmExperimentConfig, run_experiment

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4
log = logging.getLogger("otdro")


def _phi(args):
    if args.phi is None:
        return None
    return get_entropy(args.phi, args.phi_param)


def cmd_lift(args) -> int:
    inst, extras = io.instance_from_dict(io.read_json(args.input))
    radius = inst.radius if args.radius is None else args.radius
    phi = _phi(args) or extras.get("phi")
    family = args.family
    if family == "wasserstein":
        lifted = lift_wasserstein(inst.loss, inst.ground_cost, inst.nominal, radius, value_domain=inst.value_domain)
    elif family == "interpolated":
        lifted = build_interpolated(inst.loss, inst.ground_cost, phi or get_entropy("kullback-leibler"), inst.nominal,
                                    radius, args.theta1, args.theta2, value_domain=inst.value_domain)
    elif family == "phi":
        if phi is None:
            raise InputError("the phi family needs --phi or a 'phi' field in the instance")
        lifted = lift_phi_divergence(inst.loss, phi, inst.nominal, radius, args.mix_epsilon,
                                     worst_scenario=extras.get("worst_scenario"), value_domain=inst.value_domain)
    else:
        reference = io.measure_from_dict(io.read_json(args.reference)) if args.reference else extras.get("reference")
        if reference is None:
            raise InputError("the sinkhorn family needs --reference or a 'reference' field in the instance")
        if args.reg_epsilon is None:
            raise InputError("the sinkhorn family needs --reg-epsilon")
        lifted, data = lift_sinkhorn(inst.loss, inst.ground_cost, inst.nominal, radius, args.reg_epsilon, reference)
    io.write_json(args.out, io.lifted_to_dict(lifted))
    print(f"lifted {family} instance: {lifted.nominal.size} nominal atoms, radius {float(lifted.radius)!r}")
    return EXIT_OK


def cmd_solve(args) -> int:
    inst = io.lifted_from_dict(io.read_json(args.input))
    sol = solve(inst, args.method)
    risk = inst.nominal_risk()
    ok = sol.weak_duality_ok(args.tol)
    doc = io.result_to_dict(sol, empirical_risk=risk, extra_diagnostics={"weak_duality_tol": args.tol,
                                                                        "weak_duality_ok": ok})
    if args.out:
        io.write_json(args.out, doc)
    cert = sol.certificate
    print(f"objective: {float(cert.objective)!r}")
    print(f"empirical risk: {float(risk)!r}")
    print(f"lambda_star: {float(cert.lambda_star)!r}")
    print(f"primal value: {float(sol.primal_value)!r}")
    print(f"weak duality: {'ok' if ok else 'FAILED'} (gap {sol.weak_duality_gap():.3e}, tol {args.tol:g})")
    if ok and cert.converged:
        print("status: converged")
        return EXIT_OK
    print("status: not certified")
    return EXIT_NUMERICAL


def cmd_oracle(args) -> int:
    inst = io.lifted_from_dict(io.read_json(args.input))
    trace = lp_primal_trace(inst, args.v_step, levels=args.levels, w_max=args.w_max)
    dual = solve(inst).certificate.objective
    doc = {
        "value": trace.value,
        "dual_objective": dual,
        "gap_vs_dual": dual - trace.value,
        "grid_trace": [{"v_step": s, "value": v} for s, v in zip(trace.steps, trace.values)],
        "monotone": trace.is_monotone(),
    }
    if args.out:
        io.write_json(args.out, doc)
    print(f"grid value: {float(trace.value)!r}")
    print(f"dual objective: {float(dual)!r}")
    print(f"gap vs dual: {dual - trace.value:.3e}")
    return EXIT_OK


def cmd_emit_conic(args) -> int:
    inst = io.lifted_from_dict(io.read_json(args.input))
    program = build_conic(inst)
    text = serialize_conic(program)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(out)
    print(f"conic program: {program.n_variables} variables, {len(program.constraints)} constraints")
    if args.verify:
        cert = io.certificate_from_result(io.read_json(args.verify))
        report = verify_certificate(program, cert, inst)
        if report.skipped:
            print(f"verification skipped: {report.note}")
            return EXIT_OK
        print(f"verification: {len(report.violations)} violations, objective gap {report.objective_gap:.3e}")
        for idx, family, amount in report.violations[:10]:
            print(f"  row {idx} ({family}): {amount:.3e}")
        return EXIT_OK if report.ok else EXIT_NUMERICAL
    return EXIT_OK


def cmd_svm_demo(args) -> int:
    radii = tuple(args.radius) if args.radius else SvmExperimentConfig.radii
    config = SvmExperimentConfig(n=args.n, radii=radii, theta1=args.theta1, theta2=args.theta2, seed=args.seed,
                                 out=args.out)
    exp = run_experiment(config)
    if exp.substitutions:
        print(f"seed {config.seed} gave one-class data; used seed {exp.data.seed}")
    print(f"empirical hinge risk: {float(exp.empirical_risk)!r}")
    for res in exp.results:
        c = res.coupling
        print(f"r = {res.radius:g}: worst-case risk {float(res.objective)!r}, mean w* {c.mean_weight():.12f}")
    if args.out:
        print(f"wrote outputs to {args.out}")
    return EXIT_OK


def cmd_divergence(args) -> int:
    mu = io.measure_from_dict(io.read_json(args.mu))
    mu_hat = io.measure_from_dict(io.read_json(args.mu_hat))
    phi = get_entropy(args.phi, args.phi_param)
    on, off = divergence_decomposed(phi, mu, mu_hat)
    total = on + off
    print(f"D_phi: {float(total)!r}")
    print(f"on-support part: {float(on)!r}")
    print(f"off-support part: {float(off)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otdro", description="Worst-case risk over optimal-transport ambiguity sets.")
    sub = p.add_subparsers(dest="command", required=True)

    def phi_flags(sp, default=None):
        sp.add_argument("--phi", default=default, help="entropy function name, e.g. kullback-leibler")
        sp.add_argument("--phi-param", type=float, default=None, help="order n or theta for parametric entries")

    sp = sub.add_parser("lift", help="lift a classic instance")
    sp.add_argument("--family", required=True, choices=["wasserstein", "phi", "sinkhorn", "interpolated"])
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--radius", type=float, default=None, help="override the instance radius")
    phi_flags(sp)
    sp.add_argument("--mix-epsilon", type=float, default=DEFAULT_MIX_EPSILON)
    sp.add_argument("--reg-epsilon", type=float, default=None)
    sp.add_argument("--theta1", type=float, default=1.0)
    sp.add_argument("--theta2", type=float, default=1.0)
    sp.add_argument("--reference", default=None, help="JSON measure used as the Sinkhorn reference")
    sp.set_defaults(func=cmd_lift)

    sp = sub.add_parser("solve", help="solve a lifted instance through its dual")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--method", choices=["kl", "general-phi", "sinkhorn", "wasserstein"], default=None)
    sp.add_argument("--tol", type=float, default=1e-6, help="relative tolerance of the weak-duality check")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("oracle", help="grid LP primal of a lifted instance")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--v-step", type=float, required=True)
    sp.add_argument("--w-max", type=float, default=None)
    sp.add_argument("--levels", type=int, default=3)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("emit-conic", help="write the exponential-cone program of a KL interpolated instance")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verify", default=None, help="result JSON whose certificate is checked against the program")
    sp.set_defaults(func=cmd_emit_conic)

    sp = sub.add_parser("svm-demo", help="worst-case distribution of a linear SVM")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--radius", type=float, nargs="+", default=None)
    sp.add_argument("--theta1", type=float, default=1.0)
    sp.add_argument("--theta2", type=float, default=1.0)
    sp.set_defaults(func=cmd_svm_demo)

    sp = sub.add_parser("divergence", help="generalized phi-divergence between two JSON measures")
    phi_flags(sp, default="kullback-leibler")
    sp.add_argument("--mu", required=True)
    sp.add_argument("--mu-hat", required=True)
    sp.set_defaults(func=cmd_divergence)
    return p


def _configure_logging():
    level = os.environ.get("OTDRO_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleError, UnboundedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OTDROError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
