"""
Synthesizing navigation dialogs
===============================

Simulates one hint-question-answer episode against the scripted guide,
prints the transcript, and shows how the same episode unrolls into the
three supervision styles and into ask/navigate labels.
"""

from asknav.dialog import (
    GenConfig,
    extract_ask_labels,
    extract_nav_instances,
    simulate_dialog_episode,
)
from asknav.world import generate_world

world = generate_world(5)
episode = simulate_dialog_episode(world, seed=2, cfg=GenConfig())

print(f"episode on {world.world_id}: start {episode.start}, "
      f"goal region {episode.goal_region!r}")
print(f"hint: {' '.join(episode.history.hint)}")
for i, (q, a) in enumerate(episode.history.exchanges, start=1):
    print(f"  Q{i}: {' '.join(q)}")
    print(f"  A{i}: {' '.join(a)}")
print(f"walked: {list(episode.path)}")

# One episode, three kinds of supervision. The walked segments teach what
# the agent actually did; the planner segments teach what it should have
# done; mixed keeps the walk only when it already covers the planner's
# target, so training never rewards a wrong turn.
for mode in ("navigator", "oracle", "mixed"):
    insts = extract_nav_instances(world, episode, mode)
    print(f"\n{mode}: {len(insts)} instances")
    for inst in insts:
        print(f"  from {inst.start}: {list(inst.path)}")

# The same timeline also yields binary ask/navigate decisions with the
# steps-since-last-question counter each one saw.
examples = extract_ask_labels(episode)
print(f"\n{len(examples)} ask labels "
      f"({sum(e.label for e in examples)} positive)")
for e in examples:
    kind = "ASK " if e.label else "move"
    print(f"  {kind} at {e.prefix[-1]:3d}, since_ask {e.steps_since_ask}")
