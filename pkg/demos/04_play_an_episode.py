"""
Playing a full game: navigate, ask, follow the answer
=====================================================

Trains a small navigator and question head on one world, then plays a
held-out task end to end against the scripted questioner and guide,
printing the event transcript as it happens.
"""

from asknav.agent import AgentConfig, train_imitation, train_question_head
from asknav.dialog import GenConfig, extract_ask_labels, extract_nav_instances, simulate_dialog_episode
from asknav.encoder import EncoderConfig
from asknav.gameplay import (
    NeuralPolicy,
    make_game_task,
    run_episode,
    scripted_guide,
    scripted_questioner,
)
from asknav.vocab import build_vocabulary
from asknav.world import generate_world

world = generate_world(3)
worlds = {world.world_id: world}

# A handful of synthetic episodes is enough for a demo-sized policy.
insts, asks = [], []
for seed in range(8):
    ep = simulate_dialog_episode(world, seed, GenConfig())
    insts.extend(extract_nav_instances(world, ep, "mixed"))
    asks.extend(extract_ask_labels(ep))

print(f"training on {len(insts)} instances...")
nav, _ = train_imitation(
    worlds, insts, "viewpoint",
    AgentConfig(steps=60, batch_size=6),
    vocab=build_vocabulary(),
    enc_cfg=EncoderConfig(num_layers=2, ff_dim=128),
    seed=0,
)
head, head_report = train_question_head(
    nav, worlds, asks, cfg=AgentConfig(head_steps=100), seed=0
)
print(f"question head: val balanced accuracy "
      f"{head_report['val_balanced_accuracy']:.2f}, theta {head.theta:.2f}")

# "general" mode lets the learned head decide when to interrupt and ask.
task = make_game_task(world, seed=17)
log = run_episode(
    NeuralPolicy(nav, head), scripted_questioner, scripted_guide,
    world, task, mode="general",
)

print(f"\nhint: {' '.join(task.hint)}")
for e in log.events:
    if e["event"] == "nav":
        print(f"  step {e['step']:2d}: -> node {e['node']}")
    elif e["event"] == "question":
        print(f"  step {e['step']:2d}: Q: {e['tokens']}")
    elif e["event"] == "answer":
        print(f"           A: {e['tokens']}")
    elif e["event"] == "stop":
        print(f"  step {e['step']:2d}: STOP")

print(f"\nended by {log.reason} after {log.turns} turns / {log.steps} steps")
print(f"metrics: {log.metrics}")
