"""
Interpolating between Wasserstein and KL balls
==============================================

The interpolated cost charges theta1 per unit of transport and theta2 per unit
of likelihood-ratio entropy. A large theta1 pins the atoms in place and
recovers a KL ball; a large theta2 pins the weights and recovers a Wasserstein
ball. In between, the worst case mixes both moves.
"""

import numpy as np

from otdro import DiscreteMeasure, GroundCost, PiecewiseAffineLoss, get_entropy
from otdro.conic import build_conic, serialize_conic, verify_certificate
from otdro.lifting import build_interpolated
from otdro.oracle import kl_dro_bisection
from otdro.solvers import solve_kl_interpolated, wasserstein_dual

loss = PiecewiseAffineLoss.from_pieces([(1.0, 0.0), (-0.5, 0.5)])  # max(v, 0.5 - 0.5 v)
mu_hat = DiscreteMeasure([[-1.0], [0.0], [1.5]], [0.3, 0.4, 0.3])
cost = GroundCost("p-norm", 2)
kl = get_entropy("kullback-leibler")
radius = 0.2

print("empirical risk:", sum(w * loss(v) for v, w in zip(mu_hat.atoms, mu_hat.weights)))
for theta1, theta2 in [(1e8, 1.0), (4.0, 1.0), (1.0, 1.0), (1.0, 1e8)]:
    inst = build_interpolated(loss, cost, kl, mu_hat, radius, theta1, theta2)
    sol = solve_kl_interpolated(inst)
    cert = sol.certificate
    print(f"theta1={theta1:g} theta2={theta2:g}: worst-case risk {cert.objective:.6f}, "
          f"lambda* {cert.lambda_star:.4f}, mean weight {sol.mean_weight():.6f}")

# the two ends agree with the classic balls
losses = [loss(v) for v in mu_hat.atoms]
print("KL ball (bisection):      ", kl_dro_bisection(losses, mu_hat.weights, radius))
print("Wasserstein ball (dual):  ", wasserstein_dual(loss, cost, mu_hat.atoms, mu_hat.weights, radius)[1])

# the worst case itself: where each nominal atom goes and with which weight
inst = build_interpolated(loss, cost, kl, mu_hat, radius, 1.0, 1.0)
sol = solve_kl_interpolated(inst)
for rec in sol.records:
    print(f"  {rec.nominal[0]:+.2f} -> {rec.perturbed[0]:+.4f}  weight {rec.weight:.4f}  mass {rec.mass:.3f}")

# every converged solve comes with an exponential-cone certificate
program = build_conic(inst)
report = verify_certificate(program, sol.certificate, inst, tol=1e-7)
print(f"conic program: {program.n_variables} variables, {len(program.constraints)} constraints, "
      f"{len(report.violations)} violations, objective gap {report.objective_gap:.1e}")
print(serialize_conic(program)[:200], "...")
