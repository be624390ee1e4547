"""
Sinkhorn balls
==============

Entropic regularization turns the transport ball into a KL ball per nominal
atom around a Gibbs kernel. The radius shifts by an amount fixed by the
kernel, and a ball whose shifted radius is negative is empty.
"""

import numpy as np

from otdro import DiscreteMeasure, GroundCost, InfeasibleError, PiecewiseAffineLoss
from otdro.lifting import lift_sinkhorn
from otdro.oracle import mirror_ascent_kl_cells
from otdro.solvers import solve_sinkhorn

loss = PiecewiseAffineLoss.from_pieces([(0.8, 0.0), (-0.4, 0.2)])
mu_hat = DiscreteMeasure([[-0.5], [0.5]], [0.5, 0.5])
reference = DiscreteMeasure.uniform(np.linspace(-2, 2, 9)[:, None])
cost = GroundCost("squared-euclidean")

for eps in (0.05, 0.2, 0.5):
    _, data = lift_sinkhorn(loss, cost, mu_hat, 1.0, eps, reference)
    sol = solve_sinkhorn(data, loss)
    losses = np.array([loss(z) for z in reference.atoms])
    primal, _ = mirror_ascent_kl_cells(data.kernel_matrix, mu_hat.weights, losses, data.adjusted_radius / eps)
    print(f"eps={eps}: adjusted radius {data.adjusted_radius:.4f}, dual {sol.certificate.objective:.6f}, "
          f"mirror-ascent primal {primal:.6f}")

# a reference far from the data gives an empty ball
far = DiscreteMeasure.uniform([[10.0], [11.0]])
try:
    lift_sinkhorn(loss, cost, mu_hat, 0.01, 1.0, far)
except InfeasibleError as exc:
    print("infeasible:", exc)
