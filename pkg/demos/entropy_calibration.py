"""Rescale each neighborhood's scores so the attention has a chosen Shannon efficiency."""
from collections import Counter

import numpy as np

from attnlipkit.datasets import gen_synthetic_citation
from attnlipkit.entropy import NeighborhoodScores, calibrate_graph, entropy_and_efficiency

g = gen_synthetic_citation(200, 4, 0.8, 8, seed=0)
rng = np.random.default_rng(0)
sets = [NeighborhoodScores(u, rng.standard_normal(len(g.neighbors(u))) * 3) for u in range(g.n) if len(g.neighbors(u))]


def efficiencies(score_sets):
    out = []
    for ns in score_sets:
        if len(ns.scores) < 2:
            continue
        p = np.exp(ns.scores - ns.scores.max())
        out.append(entropy_and_efficiency(p / p.sum())[1])
    return np.array(out)


print(f"raw efficiency: mean {efficiencies(sets).mean():.3f}, spread {np.ptp(efficiencies(sets)):.3f}")

for target in (0.3, 0.6, 0.9):
    results, scaled = calibrate_graph(sets, target)
    eta = efficiencies(scaled)
    statuses = dict(Counter(r.status.value for r in results))
    print(f"T={target}: max |eta - T| = {np.abs(eta - target).max():.1e}, statuses {statuses}")
