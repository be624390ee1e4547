"""
Worst-case distribution of a linear SVM
=======================================

Train a linear SVM on 32 noisy points, then ask how bad its hinge risk can get
when the data may move (transport cost theta1) and be reweighted (entropy
cost theta2). Labels never change; the adversary only moves features and
shifts weight toward the margin violators.
"""

import sys
import tempfile
from pathlib import Path

from otdro.svm import SvmExperimentConfig, run_experiment, write_outputs

exp = run_experiment(SvmExperimentConfig(seed=0))
print("beta_hat:", exp.beta_hat, "b_hat:", round(exp.b_hat, 6))
print("empirical hinge risk:", exp.empirical_risk)
for res in exp.results:
    heavy = max(res.rows, key=lambda row: row[3])
    print(f"r={res.radius}: worst-case risk {res.objective:.6f}, mean weight {res.coupling.mean_weight():.6f}, "
          f"heaviest point ({heavy[0]:.3f}, {heavy[1]:.3f}) with weight {heavy[3]:.3f}")

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
for path in write_outputs(exp, out):
    print("wrote", path)
