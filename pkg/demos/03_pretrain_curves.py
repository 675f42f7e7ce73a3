"""
Watching the two-stage curriculum start from its analytic losses
================================================================

With zero-initialized output heads every objective begins exactly at its
uniform-predictor value: ln(vocab) for masked words, ln(64) for masked
tags, ln(36) for the direction bins, ln(2) for clean-vs-polluted. A short
run shows each curve dropping from that point.
"""

import math

from asknav.dialog import GenConfig, extract_nav_instances, simulate_dialog_episode
from asknav.encoder import EncoderConfig
from asknav.pretrain import (
    CurriculumFlags,
    PretrainConfig,
    PretrainDatasets,
    make_caption_corpus,
    run_pretraining,
)
from asknav.world import generate_world

world = generate_world(0)
worlds = {world.world_id: world}

captions = make_caption_corpus([world], seed=0, count=60)
nav = []
for seed in range(8):
    ep = simulate_dialog_episode(world, seed, GenConfig())
    nav.extend(extract_nav_instances(world, ep, "mixed"))
print(f"{len(captions)} captioned views, {len(nav)} navigation instances")

model, heads, vocab, report = run_pretraining(
    PretrainDatasets(worlds=worlds, captions=captions, nav=nav),
    CurriculumFlags(),
    PretrainConfig(stage1_steps=40, stage2_steps=40, batch_size=4),
    EncoderConfig(num_layers=2, ff_dim=128),
    seed=0,
)

expected = {
    "stage1_mtl": math.log(len(vocab)),
    "stage1_cl": math.log(2),
    "mlm": math.log(len(vocab)),
    "motp": math.log(heads.detector_classes),
    "directional": math.log(36),
}
print(f"\n{'curve':12s} {'analytic':>9s} {'first':>9s} {'last':>9s}")
for key, curve in report["curves"].items():
    print(f"{key:12s} {expected[key]:9.4f} {curve[0]:9.4f} {curve[-1]:9.4f}")
