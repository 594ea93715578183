"""Smallest constant for which the Gruschin closed-form bound dominates the Gramian bound.

Sweeps (x, y, T) for one l, estimates Psi_T by Monte Carlo and prints the
required constant per point and its maximum c_emp.
"""

import argparse
import itertools

import numpy as np

from logharnack.bounds import estimate_PsiT, required_closed_form_constant, gramian_bound
from logharnack.control import theta_sup
from logharnack.model import GruschinParams, make_gruschin
from logharnack.paths import MCConfig

PAIRS = [
    ((0.0, 0.0), (1.0, 1.0)),
    ((0.0, 0.0), (0.0, 1.0)),
    ((1.0, 0.0), (1.5, 0.5)),
    ((0.0, 0.0), (2.0, 0.0)),
    ((1.0, 1.0), (1.0, 2.0)),
    ((-1.0, 0.0), (1.0, 1.0)),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--l", type=float, default=1.0)
    ap.add_argument("--T", type=float, nargs="+", default=[0.25, 0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--n-paths", type=int, default=20_000)
    ap.add_argument("--dt-divisor", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    model = make_gruschin(GruschinParams(l=args.l))
    mc = MCConfig(args.n_paths, args.dt_divisor, args.seed)
    worst = 0.0
    print("T,x,y,Psi,gramian_bound,required_c")
    for T, (x, y) in itertools.product(args.T, PAIRS):
        x, y = np.array(x), np.array(y)
        Psi = estimate_PsiT(model, x[:1], y[:1], T, mc)
        d0, d2 = abs(x[0] - y[0]), abs(x[1] - y[1])
        b = gramian_bound(model.profile, theta_sup(model.linear_part, T), T, d0, d2, Psi.value)
        c = required_closed_form_constant(args.l, T, x, y, 1, b)
        worst = max(worst, c)
        print(f"{T},{x.tolist()},{y.tolist()},{Psi.value:.6g},{b:.6g},{c:.6g}")
    print(f"c_emp = {worst:.6g}")


if __name__ == "__main__":
    main()
