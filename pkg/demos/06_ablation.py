"""
A one-seed ablation
===================

Colour-alignment weight on vs. off on the toy scene. The full three-seed run
is ``mvstyle ablate --study all --out <dir>``.
"""

import sys
import tempfile

from mvstyle.ablation import format_table, run_study
from mvstyle.training import TrainConfig

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="mvstyle-ablate-")
results = run_study("ca", TrainConfig(resolution=32), seeds=[0], out_root=out)
print(format_table(results))
with_ca, without_ca = results
print("CHD lower with the colour term:", with_ca.chd < without_ca.chd)
