from dataclasses import replace

import numpy as np
import pytest
import torch

from asknav.agent import (
    AgentConfig,
    Navigator,
    QuestionHead,
    group_ask_examples,
    instance_loss,
    load_navigator,
    rollout,
    rotation_macro,
    save_navigator,
    train_question_head,
    featurize_episode,
    turn_based_expansion,
)
from asknav.dialog import GenConfig, extract_ask_labels, extract_nav_instances, simulate_dialog_episode
from asknav.encoder import CrossModalEncoder
from asknav.errors import DataError
from asknav.world import AgentState, TurnAction, step_turn_based


def _make_nav(vocab, tiny_enc, space="viewpoint", seed=0):
    torch.manual_seed(seed)
    enc = CrossModalEncoder(tiny_enc, vocab_size=len(vocab))
    return Navigator(enc, vocab, AgentConfig(), space)


def _instances(world, mode="mixed", episodes=3):
    out = []
    for seed in range(episodes):
        ep = simulate_dialog_episode(world, seed, GenConfig(max_steps=30))
        out.extend(extract_nav_instances(world, ep, mode))
    return [i for i in out if len(i.path) >= 2]


def test_rotation_macro_reaches_target(world3):
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(20):
        node = int(rng.integers(world3.num_nodes))
        target = world3.neighbors[node][0]
        state = AgentState(node=node, heading=float(rng.integers(12)) * np.pi / 6)
        macro = rotation_macro(world3, state, target)
        assert macro is not None
        assert all(
            a in (TurnAction.FORWARD, TurnAction.LEFT, TurnAction.RIGHT) for a in macro
        )
        assert macro[-1] == TurnAction.FORWARD
        s = state
        for a in macro:
            s = step_turn_based(world3, s, a)
        assert s.node == target
        checked += 1
    assert checked == 20


def test_turn_based_expansion_replays_path(world3):
    inst = _instances(world3)[0]
    expansion = turn_based_expansion(world3, inst.path)
    assert expansion is not None
    assert expansion[-1][1] == TurnAction.STOP
    visited = [inst.path[0]]
    state = AgentState(node=inst.path[0])
    for st, action in expansion[:-1]:
        assert st.node == state.node
        state = step_turn_based(world3, state, action)
        if state.node != visited[-1]:
            visited.append(state.node)
    assert visited == list(inst.path)


@pytest.mark.parametrize("space", ["viewpoint", "turn-based"])
def test_instance_loss_shapes(world3, vocab, tiny_enc, space):
    nav = _make_nav(vocab, tiny_enc, space)
    inst = _instances(world3)[0]
    total, steps, hits = instance_loss(nav, world3, inst)
    assert total.requires_grad
    assert float(total.detach()) > 0
    assert steps >= len(inst.path)  # viewpoint: path[1:] + STOP; turn-based longer
    assert 0 <= hits <= steps


def test_rollout_deterministic(world3, vocab, tiny_enc):
    nav = _make_nav(vocab, tiny_enc).eval()
    inst = _instances(world3)[0]
    t1 = rollout(nav, world3, inst)
    t2 = rollout(nav, world3, inst)
    assert t1 == t2
    s1 = rollout(nav, world3, inst, decoding="sample", rng=np.random.default_rng(7))
    s2 = rollout(nav, world3, inst, decoding="sample", rng=np.random.default_rng(7))
    assert s1 == s2
    assert t1.nodes[0] == inst.start


def test_navigator_checkpoint_roundtrip(tmp_path, world3, vocab, tiny_enc):
    nav = _make_nav(vocab, tiny_enc).eval()
    head = QuestionHead(tiny_enc.hidden_dim, nav.cfg.decoder_dim, nav.cfg.head_hidden)
    head.theta = 0.7
    p = tmp_path / "nav.pt"
    save_navigator(nav, str(p), head=head, extra={"note": "x"})
    back, head2, extra = load_navigator(str(p))
    assert extra == {"note": "x"}
    assert head2.theta == 0.7
    assert back.space == nav.space
    inst = _instances(world3)[0]
    assert rollout(nav, world3, inst) == rollout(back, world3, inst)


def test_navigator_checkpoint_without_head(tmp_path, vocab, tiny_enc):
    nav = _make_nav(vocab, tiny_enc)
    p = tmp_path / "nav.pt"
    save_navigator(nav, str(p))
    _, head, extra = load_navigator(str(p))
    assert head is None
    assert extra == {}


def _ask_stream(world, episodes=6, period=(3, 3)):
    out = []
    for seed in range(episodes):
        ep = simulate_dialog_episode(
            world, seed, GenConfig(question_period=period, min_start_steps=5, max_steps=30)
        )
        out.extend(extract_ask_labels(ep))
    return out


def test_group_ask_examples_chains_and_dedupes(world5):
    stream = _ask_stream(world5)
    groups = group_ask_examples(stream)
    for run in groups.values():
        assert len(run[0].prefix) == 1
        for a, b in zip(run, run[1:]):
            if a.label == 0:
                assert b.prefix[: len(a.prefix)] == a.prefix
                assert len(b.prefix) == len(a.prefix) + 1
            else:
                assert b.prefix == a.prefix
    # feeding the same stream twice adds no duplicate chains
    doubled = group_ask_examples(stream + stream)
    assert len(doubled) == len(groups)


def test_train_question_head_needs_both_labels(world5, vocab, tiny_enc):
    nav = _make_nav(vocab, tiny_enc).eval()
    stream = [ex for ex in _ask_stream(world5, episodes=2) if ex.label == 0]
    with pytest.raises(DataError):
        train_question_head(nav, {world5.world_id: world5}, stream)


def test_train_question_head_reports(world5, vocab, tiny_enc):
    nav = _make_nav(vocab, tiny_enc).eval()
    stream = _ask_stream(world5, episodes=8)
    cfg = AgentConfig(head_steps=20)
    head, report = train_question_head(nav, {world5.world_id: world5}, stream, cfg, seed=0)
    assert 0.0 <= head.theta <= 1.0
    assert report["train_examples"] > 0 and report["val_examples"] > 0
    assert 0.0 < report["positive_fraction"] < 1.0


def test_featurize_rejects_broken_chains(world5, vocab, tiny_enc):
    nav = _make_nav(vocab, tiny_enc).eval()
    groups = group_ask_examples(_ask_stream(world5, episodes=2))
    run = next(r for r in groups.values() if len(r) >= 3 and r[0].label == 0)
    # successor whose prefix does not extend its parent's
    broken = [run[0], replace(run[1], prefix=run[0].prefix)]
    with pytest.raises(DataError):
        featurize_episode(nav, world5, broken)
