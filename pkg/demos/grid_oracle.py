"""
Checking the dual with a grid LP
================================

The worst-case problem is an infinite LP over couplings. Restricting the
perturbed points and weights to a finite grid gives a lower bound that a
dense simplex solves exactly. Refining the grid closes the gap, and adding the
dual solver's maximizers to the grid closes it completely.
"""

from otdro import DiscreteMeasure, GroundCost, PiecewiseAffineLoss, ValueDomain
from otdro.lifting import lift_wasserstein
from otdro.oracle import build_grid, lp_primal, lp_primal_trace
from otdro.solvers import solve_wasserstein

loss = PiecewiseAffineLoss.from_pieces([(1.2, -0.3), (-0.7, 0.1)])
mu_hat = DiscreteMeasure([[-0.5], [0.25], [0.75]], [0.3, 0.3, 0.4])
inst = lift_wasserstein(loss, GroundCost("squared-euclidean"), mu_hat, 0.3,
                        value_domain=ValueDomain((-2.0,), (2.0,)))

sol = solve_wasserstein(inst)
dual = sol.certificate.objective
print("dual objective:", dual)

trace = lp_primal_trace(inst, 0.5, levels=3)
for step, value in zip(trace.steps, trace.values):
    print(f"  grid step {step:<6g} LP value {value:.8f}  gap {dual - value:.2e}")
print("monotone:", trace.is_monotone())

grid = build_grid(inst, 0.25, extra_v=[rec.perturbed for rec in sol.records])
lp = lp_primal(inst, grid)
print(f"with the maximizers on the grid: {lp.value:.10f} ({lp.n_variables} variables)")
