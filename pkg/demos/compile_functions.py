"""
Compiling boolean functions into pulse schedules
================================================

The compiler searches over registry states, applying library gates level
by level, and returns a schedule with the fewest levels.  Each schedule is
then simulated on every input word.  XNOR needs two levels, with the
reconfigurable library and on the fixed three-cell chain alike.

    python demos/compile_functions.py
"""
from dcram.compiler import (BooleanFunction, builtin_library, compile_dynamic, compile_fixed,
                            estimate_speedup)

dynamic = builtin_library("dynamic")
fixed = builtin_library("fixed")

xnor = BooleanFunction(2, 0b1001)
for name, res in (("dynamic", compile_dynamic(xnor, dynamic)),
                  ("fixed", compile_fixed(xnor, fixed))):
    print(f"{name}: {xnor.label} in {res.levels} level(s), registry {res.schedule.registry}, "
          f"verified {res.verified}")
    for k, lv in enumerate(res.schedule.levels):
        print(f"  level {k + 1}: {lv.config.label} V1={lv.V1:+.2f} V2={lv.V2:+.2f} "
              f"cells {lv.cells} then {lv.post}")
    for run in res.runs:
        print(f"    inputs {run.inputs} -> {run.output}  ({run.energy:.1f} fJ)")

print("levels per two-bit function (symbolic):")
for mask in range(16):
    fn = BooleanFunction(2, mask)
    d = compile_dynamic(fn, dynamic, verify=False).levels
    f = compile_fixed(fn, fixed, verify=False).levels
    print(f"  {fn.label:>7}: dynamic {d}, fixed {f}")

print(f"throughput over a 64-bit CPU: {estimate_speedup():g}x")
