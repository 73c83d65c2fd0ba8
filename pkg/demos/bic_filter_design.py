#!/usr/bin/env python3
"""Pick a cluster count with K-means + BIC and its first valley.

Draws patch-like samples from G Gaussian clusters, scans K = 2..12 and prints
the BIC curve; the first local minimum recovers G.
"""
import argparse

import numpy as np

from vcnn.design import PatchSet, bic_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clusters", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    centers = rng.standard_normal((args.clusters, 8)) * 10
    x = np.concatenate([c + rng.standard_normal((60, 8)) for c in centers])
    curve, results = bic_curve(PatchSet(x, 1, 1), range(2, 13), seed=args.seed)
    for k, s in zip(curve.ks, curve.scores):
        mark = "  <- valley" if k == curve.valley else ""
        print(f"K={k:2d}  BIC={s:12.5g}  WCSS={results[k].wcss:10.1f}{mark}")
    print(f"true G = {args.clusters}, detected K = {curve.valley} ({curve.flag})")


if __name__ == "__main__":
    main()
