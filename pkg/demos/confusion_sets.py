#!/usr/bin/env python3
"""Group classes into confusion sets from soft classifier scores.

Simulates a 6-class classifier that mixes up classes {0,1} and {2,3,4}
and recognizes class 5 confidently, computes the confusion-factor matrix and
lets spectral clustering choose the number of sets.

The two confusable groups come out as mixed sets. Class 5 does not become a
pure set: its softmax scores never reach exactly zero, so its affinity is
small but not zero, and the eigengap rule still picks two clusters. Class 5
is then attached to one of them. Only classes with zero confusion toward
every other class are split out as pure sets. Refinement usually leaves such
a passenger class alone, because its samples land in pure subtree leaves.
"""
import argparse

import numpy as np

from vcnn.confusion import ScoreMatrix, confusion_factor_matrix, spectral_cluster
from vcnn.network import softmax


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    groups = [[0, 1], [2, 3, 4], [5]]
    y = np.repeat(np.arange(6), 40)
    logits = rng.normal(0, 0.3, (len(y), 6))
    for g in groups[:2]:
        for c in g:
            logits[np.ix_(y == c, g)] += 2.0  # the whole group looks alike
    logits[np.arange(len(y)), y] += 1.0
    logits[y == 5, 5] += 6.0  # class 5 is recognized with confidence
    cf = confusion_factor_matrix(ScoreMatrix(softmax(logits), y))
    np.set_printoptions(precision=3, suppress=True)
    print("confusion factors:\n", cf)
    names = [f"class{c}" for c in range(6)]
    print(spectral_cluster(cf, seed=args.seed).to_text(names))


if __name__ == "__main__":
    main()
