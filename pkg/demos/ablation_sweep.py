"""Shared-seed ablation on the noise-exterior scene.

Run: python3 demos/ablation_sweep.py [axis] [trials]
axis is one of rejection, coarse-to-fine, tau, init-count.
"""

import sys

from mclrf import harness
from mclrf.field import SceneSpec

axis = sys.argv[1] if len(sys.argv) > 1 else "coarse-to-fine"
trials = int(sys.argv[2]) if len(sys.argv) > 2 else 5
spec = harness.ExperimentSpec(scene=SceneSpec(kind="noise-exterior"), trials=trials)
table = harness.run_ablation(spec, axis, progress=lambda r: print(f"  seed {r.trial_seed}: pos err {r.final_pos_err:.4f}"))
print(table.csv_text())
