"""Generate src/halfspace_fmm/_bjet.py: derivatives of B(R) = R3 log(R + R3) - R up to order 4.

Run from the repository root:  python3 tools/gen_bjet.py
The output is committed; sympy is only needed to regenerate it.
"""

import itertools
from pathlib import Path

import sympy as sp

r1, r2, r3 = sp.symbols("r1 r2 r3", real=True)
Rs, W, LW = sp.symbols("Rs W LW", positive=True)
coords = (r1, r2, r3)
# dW/dr_k with W = R + r3; dW/dr3 = W/R exactly, which avoids forming R + r3 by subtraction.
dW = (r1 / Rs, r2 / Rs, W / Rs)


def diff(expr, k):
    return (
        sp.diff(expr, coords[k])
        + sp.diff(expr, Rs) * coords[k] / Rs
        + sp.diff(expr, W) * dW[k]
        + sp.diff(expr, LW) * dW[k] / W
    )


# Start from the exact gradient (-r1/W, -r2/W, log W) so r3 only enters through dR/dr3 = r3/R.
B = r3 * LW - Rs
first = (-r1 / W, -r2 / W, LW)
entries = [((), B)]
for order in range(1, 5):
    for idx in itertools.combinations_with_replacement(range(3), order):
        e = first[idx[-1]]
        for k in reversed(idx[:-1]):
            e = sp.factor_terms(sp.cancel(diff(e, k))).subs(Rs + r3, W)
        entries.append((idx, e))

names = ["v" + "".join(str(i + 1) for i in idx) if idx else "v" for idx, _ in entries]
repl, reduced = sp.cse([e for _, e in entries], symbols=sp.numbered_symbols("t"))

lines = [
    '"""Closed-form derivatives of R3 log(R+R3) - R; generated by tools/gen_bjet.py, do not edit."""',
    "",
    "import math",
    "",
    "import numba",
    "",
    "",
    "@numba.njit(cache=True, fastmath=False)",
    "def b_jet(r1, r2, r3, out):",
    '    """Fill ``out[0:35]`` with the value and all derivatives of order 1-4 (sorted index tuples)."""',
    "    Rs = math.sqrt(r1 * r1 + r2 * r2 + r3 * r3)",
    "    if r3 >= 0.0:",
    "        W = Rs + r3",
    "    else:",
    "        W = (r1 * r1 + r2 * r2) / (Rs - r3)",
    "    LW = math.log(W)",
]
for sym, val in repl:
    lines.append(f"    {sym} = {sp.pycode(val)}")
for k, (name, val) in enumerate(zip(names, reduced)):
    lines.append(f"    out[{k}] = {sp.pycode(val)}")
lines.append("")
lines.append("")
lines.append("INDEX = (")
for idx, _ in entries:
    lines.append(f"    {tuple(idx)!r},")
lines.append(")")
lines.append("")
text = "\n".join(lines).replace("math.", "math.")
Path(__file__).resolve().parents[1].joinpath("src/halfspace_fmm/_bjet.py").write_text(text)
print(f"wrote {len(entries)} entries, {len(repl)} common subexpressions")
