"""Held-out R@1 of the full model against the lambda=0 and Euclidean variants.

    python3 scripts/ablation.py [--seeds 5] [--steps 5000]
"""
import argparse
import json

import numpy as np

from hyperalign.experiments import ablation

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, default=5)
ap.add_argument("--steps", type=int, default=5000)
args = ap.parse_args()

res = ablation(range(args.seeds), steps=args.steps)
for name, vals in res.items():
    print(f"{name:14s} mean r1 {np.mean(vals):.4f}  per seed {' '.join(f'{v:.3f}' for v in vals)}")
print(json.dumps(res))
