"""Composite diffusion: agents pass the iterate along a chain, each applying
its own denoiser.  With only agents 2 and 3 in the chain two states stay
consistent; with all four agents only the true one does.

    python3 demos/partial_composite.py
"""

import numpy as np

from podiff.composite import CompositeConfig, composite_estimate, run_composite, \
    run_partial_composite
from podiff.env import EnvState, OracleDenoiser, condition_vector, encode_history, observe, \
    sensor_net_2x2

spec = sensor_net_2x2(collectively_observable=True)
oracle = OracleDenoiser(spec)
truth = 0
obs = observe(spec, EnvState((truth,)), np.random.default_rng(0))
conds = [condition_vector(i, encode_history(spec, i, [obs[i]], []), spec.n_agents)
         for i in range(spec.n_agents)]
cfg = CompositeConfig(K2=100, D_phi=1e-4)


def summary(name, rep):
    est = rep.estimates
    areas, counts = np.unique(np.argmax(est, axis=1), return_counts=True) if len(est) else ([], [])
    print(f"{name}: {len(rep.accepted)}/{rep.K2} accepted, "
          f"estimates by area {dict(zip(map(int, areas), map(int, counts)))}")


part = run_partial_composite(oracle, [conds[2], conds[3]], cfg, np.random.default_rng(1),
                             participants=[2, 3], state_dim=4)
full = run_composite(oracle, conds, cfg, np.random.default_rng(1), state_dim=4)
summary("agents 2,3", part)
summary("all agents", full)
est, accepted = composite_estimate(full)
print("point estimate (all agents):", np.round(est, 4).tolist(), "from accepted samples" if accepted else "fallback")
