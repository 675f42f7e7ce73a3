"""
A tour of one synthetic indoor world
====================================

Generates a world from a seed, looks around from a node, and walks the
same planner route twice: once by picking neighbor viewpoints, once with
30-degree turns and FORWARD moves.
"""

import numpy as np

from asknav.world import (
    AgentState,
    TurnAction,
    generate_world,
    observe,
    oracle_path_to_region,
    step_turn_based,
    step_viewpoint,
)
from asknav.agent import turn_based_expansion

# Worlds are pure functions of their seed.
world = generate_world(3)
print(f"world {world.world_id}: {world.num_nodes} nodes, "
      f"regions {sorted(world.regions)}, goal region {world.goal_region!r}")

# Every node exposes a 36-view panorama (12 headings x 3 elevations).
state = AgentState(node=0)
obs = observe(world, state)
print(f"\nstanding at node 0 in {world.region_of[0]!r}, "
      f"{len(obs.views)} views, {obs.num_regions} salient regions")
for i, (cls, name) in enumerate(obs.region_tags):
    print(f"  region {i}: {name} (class {cls})")

# The planner gives the shortest node path into the goal region.
path = oracle_path_to_region(world, 0, world.goal_region)
print(f"\nplanner route to {world.goal_region!r}: {list(path)}")

# Walking it as viewpoint choices: each step faces the chosen neighbor.
s = AgentState(node=path[0])
for nxt in path[1:]:
    s = step_viewpoint(world, s, nxt)
    print(f"  moved to {s.node}, heading {np.degrees(s.heading):6.1f} deg")

# The same route in the low-level action space is much longer: every move
# costs a few rotations first.
expansion = turn_based_expansion(world, path)
actions = [a for _, a in expansion]
print(f"\nsame route with turns: {len(actions)} actions")
print("  " + " ".join(a.name for a in actions))

s = AgentState(node=path[0])
for a in actions:
    if a is TurnAction.STOP:
        break
    s = step_turn_based(world, s, a)
assert s.node == path[-1]
print(f"  replayed to node {s.node}, as promised")
