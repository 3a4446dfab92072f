"""Adaptive MLMC against plain Monte Carlo at the same finest level.

For each tolerance, runs the adaptive estimator a few times and a plain
MC estimator with the same NFE budget, then reports errors against the
stored truth. Slow at eps = 0.01 (about a minute).

    python demos/mlmc_vs_mc.py
"""

import numpy as np

from mlmc_diffusion import mlmc, registry

b = registry.get_benchmark("mix-2c-4d")
s = b.sampler(L=12)
q = b.qoi()

print(" eps     L   MLMC NFE    MLMC err   MC err (same NFE)   eps_est")
for eps in (0.05, 0.02, 0.01):
    for seed in range(3):
        r = mlmc.adaptive_mlmc(s, eps, q, seed=seed)
        n_mc = r.total_nfe // s.grid.steps(r.L)
        est, _, _ = mlmc.mc_estimate(s, r.L, n_mc, q, seed=seed)
        print(f" {eps:<6} {r.L:3d}   {r.total_nfe:9d}   {np.linalg.norm(r.estimate - b.truth):.4f}"
              f"     {np.linalg.norm(est - b.truth):.4f}              {r.eps_est:.4f}")
    print(f"   samples per level (last run): {r.n_per_level}")
