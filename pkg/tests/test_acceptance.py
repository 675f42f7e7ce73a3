"""Headline checks for the whole pipeline, one test per claim.

Each test records a PASS/FAIL summary line (see conftest) and keeps its
recipe inline so a red line can be reproduced by copy-paste. The slow
trend checks train real navigators and sit at the bottom.
"""

import hashlib
import itertools
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import central_difference_error, record

from asknav.agent import (
    AgentConfig,
    Navigator,
    QuestionHead,
    instance_loss,
    rollout,
    teacher_forced_accuracy,
    train_imitation,
    train_question_head,
)
from asknav.dialog import (
    GenConfig,
    extract_ask_labels,
    extract_nav_instances,
    generate_instruction_instances,
    simulate_dialog_episode,
)
from asknav.encoder import (
    DIRECTION_DIM,
    CrossModalEncoder,
    EncoderConfig,
    build_direction_embedding,
)
from asknav.gameplay import (
    GAME_MODES,
    HEURISTIC_PERIOD,
    NeuralPolicy,
    load_episode_logs,
    make_game_task,
    replay_metrics,
    run_episode,
    save_episode_logs,
    scripted_guide,
    scripted_questioner,
)
from asknav.metrics import EvalEpisode, goal_progress, make_eval_episode, ndtw, spl, success
from asknav.pretrain import (
    IGNORE,
    CurriculumFlags,
    PretrainConfig,
    PretrainDatasets,
    PretrainHeads,
    build_stage1_batch,
    build_stage2_batch,
    loss_directional,
    loss_mlm,
    loss_motp,
    loss_stage1,
    make_caption_corpus,
    mask_tokens,
    pollute_tags,
    run_pretraining,
)
from asknav.vocab import build_vocabulary, vocabulary_for_world
from asknav.world import generate_world


def _mixed_instances(world, seeds, gen=None):
    out = []
    for s in seeds:
        ep = simulate_dialog_episode(world, s, gen or GenConfig())
        out.extend(extract_nav_instances(world, ep, "mixed"))
    return out


def _param_checksums(module):
    return {
        k: hashlib.sha256(v.detach().cpu().numpy().tobytes()).hexdigest()
        for k, v in module.state_dict().items()
    }


# ---------------------------------------------------------------------------
# 1. every loss against central differences, in float64


def test_gradients_match_central_differences():
    t0 = time.time()
    world = generate_world(2, nodes=10, regions=2, objects=8)
    worlds = {world.world_id: world}
    vocab = vocabulary_for_world(world)
    enc_cfg = EncoderConfig(num_layers=1, ff_dim=64)
    cfg = PretrainConfig()

    torch.manual_seed(0)
    model = CrossModalEncoder(enc_cfg, vocab_size=len(vocab)).double()
    heads = PretrainHeads(enc_cfg.hidden_dim, len(vocab))
    g = torch.Generator().manual_seed(1)
    for p in heads.parameters():
        with torch.no_grad():
            p.normal_(0.0, 0.02, generator=g)
    heads = heads.double()

    captions = make_caption_corpus([world], seed=0, count=4)
    s1 = build_stage1_batch(
        captions[:2], worlds, vocab, enc_cfg, np.random.default_rng(1), cfg
    )
    assert (s1.mlm_labels != IGNORE).any()

    nav_pool = [i for i in _mixed_instances(world, range(4)) if len(i.path) >= 2]
    for probe in itertools.count(2):
        s2 = build_stage2_batch(
            nav_pool[:2], worlds, vocab, enc_cfg,
            np.random.default_rng(probe), cfg, CurriculumFlags(),
        )
        if (s2.mlm_labels != IGNORE).any() and (s2.motp_labels != IGNORE).any():
            break

    worst = {}
    rng = np.random.default_rng(0)
    worst["mlm"] = central_difference_error(
        lambda: loss_mlm(model, heads, s1)[0], [model, heads], rng
    )
    worst["contrastive"] = central_difference_error(
        lambda: F.binary_cross_entropy_with_logits(
            heads.contrastive(model(s1.tensors)[:, 0]).squeeze(-1),
            s1.contrastive_labels.double(),
        ),
        [model, heads],
        rng,
    )
    worst["motp"] = central_difference_error(
        lambda: loss_motp(model, heads, s2)[0], [model, heads], rng
    )
    worst["directional"] = central_difference_error(
        lambda: loss_directional(model, heads, s2)[0], [model, heads], rng
    )

    torch.manual_seed(0)
    nav = Navigator(
        CrossModalEncoder(enc_cfg, vocab_size=len(vocab)), vocab, AgentConfig(), "viewpoint"
    ).double()
    inst = generate_instruction_instances(world, 0, 1, path_steps=(2, 3))[0]
    worst["imitation"] = central_difference_error(
        lambda: instance_loss(nav, world, inst)[0], [nav], rng
    )

    torch.manual_seed(2)
    head = QuestionHead(enc_cfg.hidden_dim, nav.cfg.decoder_dim).double()
    feats = torch.from_numpy(
        rng.normal(size=(6, enc_cfg.hidden_dim + nav.cfg.decoder_dim + 17))
    )
    labels = torch.tensor([0.0, 1.0, 0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    pw = torch.tensor(2.0, dtype=torch.float64)
    worst["ask"] = central_difference_error(
        lambda: F.binary_cross_entropy_with_logits(head(feats), labels, pos_weight=pw),
        [head],
        rng,
    )

    elapsed = time.time() - t0
    peak = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s"
    ok = record("gradient-suite", peak < 1e-4 and elapsed < 300, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. corruption rates


def test_mask_and_pollution_rates():
    rng = np.random.default_rng(0)
    ids = np.full(20_000, 42, dtype=np.int64)
    _, labels = mask_tokens(ids, rng)
    masked_frac = float((labels != IGNORE).mean())

    pool = np.arange(24)
    tags = np.array([1, 5, 9], dtype=np.int64)
    clean = sum(pollute_tags(tags, rng, pool)[1] for _ in range(10_000)) / 10_000

    ok = record(
        "mask-pollute-rates",
        0.14 <= masked_frac <= 0.16 and 0.48 <= clean <= 0.52,
        f"masked {masked_frac:.4f}, clean {clean:.4f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. zero-initialized heads start at the uniform-predictor losses


def test_initial_losses_are_analytic():
    world = generate_world(11, nodes=12, regions=2)
    worlds = {world.world_id: world}
    vocab = vocabulary_for_world(world)
    enc_cfg = EncoderConfig(num_layers=1, ff_dim=64)
    cfg = PretrainConfig()

    torch.manual_seed(0)
    model = CrossModalEncoder(enc_cfg, vocab_size=len(vocab)).double()
    heads = PretrainHeads(enc_cfg.hidden_dim, len(vocab)).double()

    captions = make_caption_corpus([world], seed=0, count=6)
    nav_pool = [i for i in _mixed_instances(world, range(6)) if len(i.path) >= 2]
    for probe in itertools.count(0):
        rng = np.random.default_rng(probe)
        s1 = build_stage1_batch(captions[:4], worlds, vocab, enc_cfg, rng, cfg)
        s2 = build_stage2_batch(
            nav_pool[:4], worlds, vocab, enc_cfg, rng, cfg, CurriculumFlags()
        )
        if (s1.mlm_labels != IGNORE).any() and (s2.motp_labels != IGNORE).any():
            break

    with torch.no_grad():
        _, parts = loss_stage1(model, heads, s1)
        mlm = float(loss_mlm(model, heads, s1)[0])
        motp = float(loss_motp(model, heads, s2)[0])
        direc = float(loss_directional(model, heads, s2)[0])

    errs = {
        "mlm": abs(mlm - math.log(len(vocab))),
        "contrastive": abs(parts["stage1_cl"] - math.log(2)),
        "motp": abs(motp - math.log(heads.detector_classes)),
        "directional": abs(direc - math.log(36)),
    }
    worst = max(errs.values())
    ok = record(
        "analytic-initial-losses",
        worst < 1e-6,
        f"ln {len(vocab)}/ln {heads.detector_classes}/ln 36/ln 2, worst err {worst:.1e}",
    )
    assert ok, errs


# ---------------------------------------------------------------------------
# 4. pose embedding layout


def test_direction_embedding_layout():
    rng = np.random.default_rng(0)
    ok = DIRECTION_DIM == 128
    worst_norm = 0.0
    for _ in range(1000):
        h = float(rng.uniform(0, 2 * np.pi))
        e = float(rng.uniform(-np.pi / 2, np.pi / 2))
        d = build_direction_embedding(h, e)
        base = np.array(
            [math.sin(h), math.cos(h), math.sin(e), math.cos(e)], dtype=np.float32
        )
        ok = ok and d.shape == (128,)
        for k in range(32):
            ok = ok and np.array_equal(d[4 * k : 4 * k + 4], base)
        worst_norm = max(worst_norm, abs(float(np.dot(d, d)) - 64.0))
        if not ok:
            break
    ok = ok and worst_norm < 1e-3
    ok = record(
        "direction-embedding", ok, f"dim 128, 32 tiles, worst |d.d-64| {worst_norm:.1e}"
    )
    assert ok


# ---------------------------------------------------------------------------
# 5. metric exactness


def _brute_dtw(a, b):
    best = [math.inf]
    n, m = len(a), len(b)

    def walk(i, j, cost):
        cost += float(np.linalg.norm(a[i] - b[j]))
        if cost >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = cost
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, cost)

    walk(0, 0, 0.0)
    return best[0]


def _rand_episode(rng):
    n = int(rng.integers(2, 6))
    pos = rng.normal(size=(n, 3)) * 4
    return EvalEpisode(
        executed=tuple(range(n)),
        reference=tuple(range(n)),
        goal=0,
        start_goal_dist=float(rng.uniform(0, 12)),
        end_goal_dist=float(rng.uniform(0, 12)),
        shortest_len=float(rng.uniform(0.5, 10)),
        executed_len=float(rng.uniform(0.1, 20)),
        executed_pos=pos,
        reference_pos=pos,
    )


def test_metric_exactness():
    rng = np.random.default_rng(0)
    ndtw_err = 0.0
    for _ in range(200):
        ex = rng.normal(size=(int(rng.integers(1, 6)), 3)) * 3
        ref = rng.normal(size=(int(rng.integers(1, 6)), 3)) * 3
        ep = EvalEpisode(
            executed=(0,) * len(ex), reference=(0,) * len(ref), goal=0,
            start_goal_dist=1.0, end_goal_dist=1.0, shortest_len=1.0,
            executed_len=1.0, executed_pos=ex, reference_pos=ref,
        )
        want = math.exp(-_brute_dtw(ex, ref) / (len(ref) * 3.0))
        ndtw_err = max(ndtw_err, abs(ndtw(ep) - want))

    bounds_ok = True
    for _ in range(200):
        eps = [_rand_episode(rng) for _ in range(int(rng.integers(1, 9)))]
        sr = float(np.mean([success(e) for e in eps]))
        s = spl(eps)
        bounds_ok = bounds_ok and 0.0 <= s <= sr <= 1.0

    flat = _rand_episode(rng)
    same = EvalEpisode(**{**flat.__dict__, "end_goal_dist": flat.start_goal_dist})
    done = EvalEpisode(**{**flat.__dict__, "end_goal_dist": 0.0})
    gp_ok = goal_progress(same) == 0.0 and goal_progress(done) == flat.start_goal_dist

    ok = record(
        "metric-exactness",
        ndtw_err < 1e-9 and bounds_ok and gp_ok,
        f"ndtw err {ndtw_err:.1e} over 200 pairs; SPL<=SR on 200 sets; GP edges exact",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. mixed supervision picks the walked segment iff it contains the
#    planner segment's endpoint


def test_mixed_supervision_rule():
    world = generate_world(4)
    checked = segment_branch = oracle_branch = 0
    for seed in itertools.count(0):
        ep = simulate_dialog_episode(world, seed, GenConfig())
        walked = extract_nav_instances(world, ep, "navigator")
        planned = extract_nav_instances(world, ep, "oracle")
        mixed = extract_nav_instances(world, ep, "mixed")
        for n, o, m in zip(walked, planned, mixed):
            expected = n.path if o.path[-1] in n.path else o.path
            assert m.path == expected, (seed, n.path, o.path, m.path)
            if o.path[-1] in n.path:
                segment_branch += 1
            else:
                oracle_branch += 1
            checked += 1
            if checked == 100:
                break
        if checked == 100:
            break
    ok = record(
        "mixed-supervision-rule",
        checked == 100 and segment_branch > 0 and oracle_branch > 0,
        f"100 instances: {segment_branch} segment / {oracle_branch} planner",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. a navigator can memorize eight instances


def test_overfit_eight_instances():
    t0 = time.time()
    world = generate_world(7)
    worlds = {world.world_id: world}
    insts = []
    for seed in itertools.count(0):
        insts.extend(_mixed_instances(world, [seed]))
        if len(insts) >= 8:
            break
    insts = insts[:8]
    vocab = build_vocabulary()
    nav, _ = train_imitation(
        worlds, insts, "viewpoint", AgentConfig(steps=300, batch_size=8),
        vocab=vocab, enc_cfg=EncoderConfig(), seed=0,
    )
    acc = teacher_forced_accuracy(nav, worlds, insts)
    reproduced = 0
    for inst in insts:
        traj = rollout(nav, world, inst)
        reproduced += int(traj.stopped and traj.nodes == tuple(inst.path))
    elapsed = time.time() - t0
    ok = record(
        "overfit-eight-instances",
        acc >= 0.99 and reproduced == 8,
        f"TF acc {acc:.3f}, greedy {reproduced}/8, {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8 + 9. question-head training leaves the navigator untouched and
#        recovers a periodic asking pattern


@pytest.fixture(scope="module")
def ask_training(world5, vocab):
    gen = GenConfig(question_period=(3, 3), min_start_steps=6)
    examples = []
    for seed in range(12):
        examples.extend(extract_ask_labels(simulate_dialog_episode(world5, seed, gen)))
    torch.manual_seed(0)
    enc = CrossModalEncoder(EncoderConfig(num_layers=2, ff_dim=128), vocab_size=len(vocab))
    nav = Navigator(enc, vocab, AgentConfig(), "viewpoint").eval()
    before = _param_checksums(nav)
    head, report = train_question_head(
        nav, {world5.world_id: world5}, examples, cfg=AgentConfig(head_steps=200), seed=0
    )
    return nav, before, head, report


def test_navigator_frozen_under_head_training(ask_training):
    nav, before, _, _ = ask_training
    after = _param_checksums(nav)
    ok = record(
        "frozen-navigator",
        after == before,
        f"{len(before)} tensors, sha256 unchanged",
    )
    assert ok


def test_ask_head_recovers_periodic_pattern(ask_training):
    _, _, head, report = ask_training
    ba = report["val_balanced_accuracy"]
    ok = record(
        "ask-head-accuracy",
        ba >= 0.9,
        f"val balanced accuracy {ba:.3f}, theta {head.theta:.3f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 10. viewpoint beats low-level turns at equal budget


def _success_rate(nav, worlds, instances):
    wins = 0
    for inst in instances:
        w = worlds[inst.world_id]
        traj = rollout(nav, w, inst)
        wins += int(success(make_eval_episode(w, traj.nodes, inst.path, inst.path[-1])))
    return wins / len(instances)


def test_action_space_trend():
    t0 = time.time()
    worlds = {w.world_id: w for w in (generate_world(0), generate_world(1))}
    gen = GenConfig(min_start_steps=6)
    train, val = [], []
    for w in worlds.values():
        for i in range(16):
            train.extend(extract_nav_instances(w, simulate_dialog_episode(w, 1000 + i, gen), "mixed"))
        for i in range(5):
            val.extend(extract_nav_instances(w, simulate_dialog_episode(w, 2000 + i, gen), "mixed"))
    vocab = build_vocabulary()
    enc_cfg = EncoderConfig(num_layers=2, ff_dim=128)
    cfg = AgentConfig(steps=250, batch_size=8)

    sr = {"viewpoint": [], "turn-based": []}
    for seed in (0, 1, 2):
        for space in sr:
            nav, _ = train_imitation(
                worlds, train, space, cfg, vocab=vocab, enc_cfg=enc_cfg, seed=seed
            )
            sr[space].append(_success_rate(nav, worlds, val))
    gap = float(np.mean(sr["viewpoint"])) - float(np.mean(sr["turn-based"]))
    elapsed = time.time() - t0
    detail = (
        f"viewpoint {['%.2f' % v for v in sr['viewpoint']]} vs "
        f"turn-based {['%.2f' % v for v in sr['turn-based']]}, "
        f"gap {100 * gap:.0f} pts, {elapsed:.0f}s"
    )
    ok = record("action-space-trend", gap >= 0.10 and elapsed < 1200, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 11. the two-stage curriculum helps on held-out worlds


def test_pretraining_gain_on_unseen_worlds():
    t0 = time.time()
    train_worlds = {w.world_id: w for w in (generate_world(0), generate_world(1))}
    unseen = [generate_world(s) for s in (100, 101, 102)]
    gen = GenConfig(min_start_steps=6)

    pretrain_nav, finetune_nav = [], []
    for w in train_worlds.values():
        for i in range(16):
            insts = extract_nav_instances(w, simulate_dialog_episode(w, 1000 + i, gen), "mixed")
            pretrain_nav.extend(insts)
            if i < 8:
                finetune_nav.extend(insts)
    unseen_val = []
    for w in unseen:
        for i in range(12):
            unseen_val.extend(
                extract_nav_instances(w, simulate_dialog_episode(w, 2000 + i, gen), "oracle")
            )

    enc_cfg = EncoderConfig(num_layers=2, ff_dim=128)
    fit_cfg = AgentConfig(steps=120, batch_size=8)
    pt_cfg = PretrainConfig(stage1_steps=100, stage2_steps=100, lr=3e-4)
    unseen_by_id = {w.world_id: w for w in unseen}

    def mean_gp(nav):
        vals = []
        for inst in unseen_val:
            w = unseen_by_id[inst.world_id]
            traj = rollout(nav, w, inst)
            vals.append(goal_progress(make_eval_episode(w, traj.nodes, inst.path, inst.path[-1])))
        return float(np.mean(vals))

    diffs = []
    for seed in (0, 1, 2):
        captions = make_caption_corpus(list(train_worlds.values()), seed, 120)
        datasets = PretrainDatasets(worlds=train_worlds, captions=captions, nav=pretrain_nav)
        model, _, vocab_pre, _ = run_pretraining(
            datasets, CurriculumFlags(), pt_cfg, enc_cfg, seed=seed
        )
        nav_pre, _ = train_imitation(
            train_worlds, finetune_nav, "viewpoint", fit_cfg,
            pretrained=model, vocab=vocab_pre, seed=seed,
        )
        nav_scratch, _ = train_imitation(
            train_worlds, finetune_nav, "viewpoint", fit_cfg,
            vocab=vocabulary_for_world(next(iter(train_worlds.values()))),
            enc_cfg=enc_cfg, seed=seed,
        )
        diffs.append(mean_gp(nav_pre) - mean_gp(nav_scratch))

    margin = float(np.mean(diffs))
    elapsed = time.time() - t0
    detail = f"GP gains {['%+.2f' % d for d in diffs]}, mean {margin:+.2f} m, {elapsed:.0f}s"
    ok = record("pretraining-gain", margin > 0.0, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 12. game-play contract over 50 seeded episodes per mode


def test_gameplay_contract(tmp_path, world3, vocab, tiny_enc):
    t0 = time.time()
    worlds = {world3.world_id: world3}
    insts, asks = [], []
    for seed in range(8):
        ep = simulate_dialog_episode(world3, seed, GenConfig())
        insts.extend(extract_nav_instances(world3, ep, "mixed"))
        asks.extend(extract_ask_labels(ep))
    nav, _ = train_imitation(
        worlds, insts, "viewpoint", AgentConfig(steps=60, batch_size=6),
        vocab=vocab, enc_cfg=tiny_enc, seed=0,
    )
    head, _ = train_question_head(
        nav, worlds, asks, cfg=AgentConfig(head_steps=100), seed=0
    )

    ok = True
    notes = []
    for mode in GAME_MODES:
        policy = NeuralPolicy(nav, head)
        logs = [
            run_episode(
                policy, scripted_questioner, scripted_guide, world3,
                make_game_task(world3, i), mode,
            )
            for i in range(50)
        ]
        for log in logs:
            ok = ok and log.reason in ("declared-goal", "max-turns", "aborted")
            ok = ok and log.turns <= log.max_turns == 20
            qs = log.question_steps
            if mode == "heuristic4":
                expected = tuple(
                    s for s in range(1, log.steps + 1) if s % HEURISTIC_PERIOD == 0
                )
                ok = ok and (
                    qs == expected
                    or (log.reason == "max-turns" and qs == expected[:-1])
                )
            else:
                aps = log.ask_positive_steps
                ok = ok and (
                    qs == aps
                    or (log.reason == "max-turns" and aps[: len(qs)] == qs
                        and len(aps) == len(qs) + 1)
                )
        path = tmp_path / f"{mode}.jsonl"
        save_episode_logs(logs, str(path))
        back = load_episode_logs(str(path))
        ok = ok and back == logs
        ok = ok and all(replay_metrics(world3, log) == log.metrics for log in back)
        notes.append(f"{mode}: {sum(len(l.question_steps) for l in logs)} questions")

    elapsed = time.time() - t0
    detail = "; ".join(notes) + f", 50 episodes each, {elapsed:.0f}s"
    ok = record("gameplay-contract", ok, detail)
    assert ok, detail
