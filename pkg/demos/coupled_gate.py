"""
Two coupled cells compute OR and AND
====================================

Two cells joined in configuration 2 receive synchronized pulses of
+0.73 V and -0.73 V.  Afterwards cell A holds A+B and cell B holds AB.  A
coarse sweep of the pulse plane shows the other operating regions.

    python demos/coupled_gate.py
"""
import numpy as np

from dcram.circuit import CouplingConfig
from dcram.logic import LogicSetup, extract_gate, format_function, run_coupled, sweep_operation_map

setup = LogicSetup()
cfg = CouplingConfig.two_cell(2)

for a in (0, 1):
    for b in (0, 1):
        r = run_coupled(cfg, 0.73, -0.73, (a, b), setup)
        print(f"A={a} B={b} -> cells {r.bits}  IVD {r.ivd[0]:+.2f} {r.ivd[1]:+.2f} V  "
              f"energy {r.energy:.2f} fJ")

gate = extract_gate(cfg, 0.73, -0.73, setup)
print("cell outputs:", [format_function(f, 2) for f in gate.outputs],
      f"margin {gate.margin:.2f} V")

# A 9 x 9 map; the full 81 x 81 one is `dcram map`.
grid = np.linspace(-2.0, 2.0, 9)
omap = sweep_operation_map(cfg, grid, grid, setup)
short = {"identity": "I", "logic_operation": "L", "forced_state": "F", "non_readable": "."}
print("rows V1 (top = -2 V), columns V2")
for i, v1 in enumerate(grid):
    print(f"{v1:+5.1f}  " + " ".join(short[r] for r in omap.regions[i]))
print(omap.region_counts())
