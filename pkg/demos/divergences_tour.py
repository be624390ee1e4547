"""
Generalized phi-divergences
===========================

Walk through the entropy catalog: evaluate a divergence between measures with
different supports, split it into its on-support and off-support parts, swap
the arguments through the Csiszar dual, and evaluate a convex conjugate.
"""

import numpy as np

from otdro import DiscreteMeasure, csiszar_dual, divergence_decomposed, generalized_divergence, get_entropy, phi_conjugate

# mu puts 0.3 of its mass on an atom the reference does not charge
mu = DiscreteMeasure([[0.0], [1.0], [2.0]], [0.35, 0.35, 0.3])
mu_hat = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])

for name in ("kullback-leibler", "burg", "hellinger", "total-variation", "chi2"):
    phi = get_entropy(name)
    on, off = divergence_decomposed(phi, mu, mu_hat)
    print(f"{name:>18}: D = {generalized_divergence(phi, mu, mu_hat):.6f}  (on {on:.6f}, off {off:.6f})")

# KL is infinite here because KL grows superlinearly and cannot pay for the new atom.
# Burg is linear at infinity, so the new atom costs phi'(inf) * 0.3 = 0.3.

# swapping the arguments is the same as using the Csiszar dual entropy
phi = get_entropy("cressie-read", 0.5)
psi = csiszar_dual(phi)
nu = DiscreteMeasure([[0.0], [1.0]], [0.2, 0.8])
print("D_phi(nu, mu_hat) =", generalized_divergence(phi, nu, mu_hat))
print("D_psi(mu_hat, nu) =", generalized_divergence(psi, mu_hat, nu))

# convex conjugates, compared with a brute-force supremum over a grid
kl = get_entropy("kullback-leibler")
t = np.linspace(1e-9, 50, 200001)
for s in (-1.0, 0.0, 1.5):
    grid = np.max(s * t - (t * np.log(t) - t + 1))
    print(f"phi*({s:+.1f}) = {phi_conjugate(kl, s):.8f}   grid sup {grid:.8f}")
