"""Fixed points of the exact Bayes denoiser on the 2x2 sensor network.

Each agent sees two of the four areas.  For a given observation the flow
y <- f(tau, y) settles on the states the agent cannot tell apart, and only
the state that every agent keeps survives the intersection.

    python3 demos/oracle_fixed_points.py
"""

import numpy as np

from podiff.env import EnvState, OracleDenoiser, condition_vector, encode_history, observe, \
    sensor_net_2x2
from podiff.flow import FlowConfig, find_fixed_points, intersect_fixed_points

spec = sensor_net_2x2(collectively_observable=True)
oracle = OracleDenoiser(spec)
rng = np.random.default_rng(0)
cfg = FlowConfig(num_samples=400)

for truth in range(spec.num_areas):
    obs = observe(spec, EnvState((truth,)), rng)
    sets = []
    print(f"target in area {truth}")
    for agent in range(spec.n_agents):
        tau = encode_history(spec, agent, [obs[agent]], [])
        fps = find_fixed_points(oracle, condition_vector(agent, tau, spec.n_agents), cfg, rng)
        sets.append(fps)
        states = [int(np.argmax(a)) for a in fps.attractors]
        print(f"  agent {agent} sees {obs[agent].tolist()}: attractors at areas {states}, "
              f"|lambda_max| {np.round(fps.lambda_max, 3).tolist()}")
    shared = intersect_fixed_points(sets)
    print(f"  shared: {[int(np.argmax(s)) for s in shared]}")
