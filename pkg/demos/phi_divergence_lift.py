"""
phi-divergence balls as lifted transport problems
=================================================

A phi-divergence ball lets the adversary reweight the nominal atoms and, when
phi grows linearly, also move a little mass to new points. Lifting the problem
reproduces both moves with a transport cost on (value, weight) pairs. The lifted
grid LP and a direct LP over candidate points give the same answer.
"""

import numpy as np

from otdro import DiscreteMeasure, PiecewiseAffineLoss, get_entropy
from otdro.lifting import lift_phi_divergence
from otdro.oracle import build_grid, direct_phi_primal, lp_primal
from otdro.solvers import solve_phi_lift

loss = PiecewiseAffineLoss.from_pieces([(1.0, 0.0), (-1.0, 0.1)])  # |v|-like
atoms = np.array([-0.5, 0.25, 1.0])
weights = np.array([0.2, 0.5, 0.3])
candidates = np.concatenate([atoms, [1.75, -1.5]])
cand_losses = np.array([loss([c]) for c in candidates])
nominal = np.concatenate([weights, [0.0, 0.0]])
eps = 0.2

for name, radius in [("kullback-leibler", 0.3), ("total-variation", 0.4)]:
    phi = get_entropy(name)
    direct, mu = direct_phi_primal(phi, cand_losses, nominal, radius, full=True)
    inst = lift_phi_divergence(loss, phi, DiscreteMeasure(atoms[:, None], weights), radius, mix_epsilon=eps,
                               worst_scenario=[candidates[np.argmax(cand_losses)]])
    g = 1.0 / (1.0 - eps)
    ws = [g * mu[j] / weights[j] for j in range(3)] + [mu[3:].sum() / eps]
    lifted = lp_primal(inst, build_grid(inst, 100.0, w_max=2.0, w_step=0.25, extra_w=ws)).value
    line = f"{name:>17}: direct {direct:.8f}  lifted LP {lifted:.8f}"
    if name != "total-variation":  # the dual solver needs a differentiable entropy
        line += f"  dual {solve_phi_lift(inst).certificate.objective:.8f}"
    print(line)
    print("    worst-case weights on candidates:", np.round(mu, 4))

# entropies without a direct oracle still solve through the lifted dual
inst = lift_phi_divergence(loss, get_entropy("hellinger"), DiscreteMeasure(atoms[:, None], weights), 0.1,
                           mix_epsilon=eps, worst_scenario=[1.75])
print("hellinger, radius 0.1, dual:", solve_phi_lift(inst).certificate.objective)
