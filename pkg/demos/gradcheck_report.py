"""Finite-difference check of every layer, then the same check with a broken GELU backward.

Run: python3 demos/gradcheck_report.py
"""

from moa import tensor as T
from moa.verification import gradcheck_suite

for name, rep in gradcheck_suite("all").items():
    print(f"{name:<12} {rep.max_rel_error:.2e} {'ok' if rep.passed else 'FAIL'}")

real = T.gelu


def broken_gelu(x):
    out = real(x)
    return T._record(out.data, (x,), lambda g: (-g,), "gelu")


T.gelu = broken_gelu
rep = gradcheck_suite("gelu")["gelu"]
T.gelu = real
print(f"\nwith a wrong backward: {rep.max_rel_error:.2e}, failing {rep.failing()}")
