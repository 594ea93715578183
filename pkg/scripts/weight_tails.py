"""Tail diagnostics of the coupling weight on the Gramian pathway.

Given the first components, log R2 is Gaussian with mean -V/2 and variance V,
where V is the integrated squared control. Large V makes the sample mean of R
undershoot 1 at any practical path count. This prints quantiles of V, the
sample means of R1 and R1 R2, and the effective sample size of R1 R2.
"""

import argparse

import numpy as np

from logharnack.coupling import CouplingParams
from logharnack.engine import run_coupled
from logharnack.model import GruschinParams, make_gruschin
from logharnack.stats import estimate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--l", type=float, nargs="+", default=[0.25, 0.5, 1.0, 2.0])
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--n-paths", type=int, default=20_000)
    ap.add_argument("--dt-divisor", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pathway", choices=["control", "drift"], default="control")
    args = ap.parse_args(argv)

    x, y = np.array([0.0, 0.0]), np.array([1.0, 1.0])
    print("l      V_50     V_90     V_99     E R1            E R1R2          ESS")
    for l in args.l:
        model = make_gruschin(GruschinParams(m=1, d=1, l=l))
        res = run_coupled(
            model, CouplingParams(T=args.T, x=x, y=y), args.n_paths, args.seed, args.dt_divisor, args.pathway
        )
        V = res.get("eta_sq_int", np.full(args.n_paths, np.nan))
        q = np.nanquantile(V, [0.5, 0.9, 0.99]) if np.isfinite(V).any() else [np.nan] * 3
        w = np.exp(res["logR1"] + res["logR2"])
        r1, r12 = estimate(np.exp(res["logR1"])), estimate(w)
        ess = w.sum() ** 2 / np.sum(w * w)
        print(
            f"{l:<6g} {q[0]:<8.3g} {q[1]:<8.3g} {q[2]:<8.3g} "
            f"{r1.value:.3f}+-{r1.stderr:.3f}   {r12.value:.3f}+-{r12.stderr:.3f}   {ess:.0f}"
        )


if __name__ == "__main__":
    main()
