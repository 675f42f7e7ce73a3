"""Command-line pipeline: worlds -> data -> pretrain -> finetune -> play.

Every command takes --config/--seed/--run-dir plus repeatable --set dotted
overrides, validates the resolved config before any compute, and writes its
artifacts under the run directory. Exit codes: 0 ok, 2 config error, 3 data
error (including missing upstream artifacts).
"""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import metrics as M
from .agent import (
    ask_probability,
    featurize_episode,
    group_ask_examples,
    load_navigator,
    rollout,
    save_navigator,
    train_imitation,
    train_question_head,
)
from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    save_config,
    to_dict,
)
from .dialog import (
    extract_ask_labels,
    extract_nav_instances,
    generate_instruction_instances,
    load_dataset,
    save_dataset,
    simulate_dialog_episode,
)
from .encoder import load_encoder, save_encoder
from .errors import ConfigError, DataError
from .gameplay import (
    NeuralPolicy,
    load_episode_logs,
    make_game_task,
    replay_metrics,
    run_episode,
    save_episode_logs,
    scripted_guide,
    scripted_questioner,
)
from .pretrain import PretrainDatasets, make_caption_corpus, run_pretraining
from .world import generate_world, load_world, save_world

REPORT_SCHEMA = "asknav.report"
REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# Run-directory layout


def world_path(run_dir, seed):
    return os.path.join(run_dir, "worlds", f"world-{seed}.json")


def data_path(run_dir, name):
    return os.path.join(run_dir, "data", f"{name}.jsonl")


def checkpoint_path(run_dir, name):
    return os.path.join(run_dir, "checkpoints", f"{name}.pt")


def report_path(run_dir, name):
    return os.path.join(run_dir, "reports", f"{name}.json")


def log_path(run_dir, name):
    return os.path.join(run_dir, "logs", f"{name}.jsonl")


def _require(path, producer):
    if not os.path.exists(path):
        raise DataError(f"missing artifact {path}; run `asknav {producer}` first")
    return path


def _write_report(cfg, payload, path):
    report = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
    }
    report.update(payload)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _meta(cfg):
    return {"config_hash": config_hash(cfg), "seed": cfg.seed}


def _load_worlds(run_dir, seeds, producer="gen-world"):
    worlds = {}
    for s in seeds:
        w = load_world(_require(world_path(run_dir, s), producer))
        worlds[w.world_id] = w
    return worlds


def _episode_seed(cfg, world_seed, index):
    ss = np.random.SeedSequence([cfg.seed, int(world_seed), 0xE9, int(index)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_world(cfg, args):
    out_dir = os.path.join(args.run_dir, "worlds")
    os.makedirs(out_dir, exist_ok=True)
    for split, seeds in (("train", cfg.train_seeds), ("unseen", cfg.unseen_seeds)):
        for s in seeds:
            w = generate_world(s, cfg.world)
            save_world(w, world_path(args.run_dir, s))
            print(f"{split} world seed {s}: {w.config.nodes} nodes -> {world_path(args.run_dir, s)}")
    return 0


def _episodes_for(cfg, world, indices):
    return [
        simulate_dialog_episode(world, _episode_seed(cfg, world.seed, i), cfg.data.gen)
        for i in indices
    ]


def cmd_gen_data(cfg, args):
    os.makedirs(os.path.join(args.run_dir, "data"), exist_ok=True)
    train_worlds = _load_worlds(args.run_dir, cfg.train_seeds)
    unseen_worlds = _load_worlds(args.run_dir, cfg.unseen_seeds)
    n, v = cfg.data.episodes_per_world, cfg.data.val_episodes_per_world
    lookahead = cfg.data.gen.lookahead
    meta = _meta(cfg)

    train_eps, val_seen_eps, val_unseen_eps = [], [], []
    for w in train_worlds.values():
        train_eps += _episodes_for(cfg, w, range(n))
        val_seen_eps += _episodes_for(cfg, w, range(n, n + v))
    for w in unseen_worlds.values():
        val_unseen_eps += _episodes_for(cfg, w, range(v))

    counts = {}
    for mode in ("navigator", "oracle", "mixed"):
        for name, eps, worlds in (
            (f"nav-train-{mode}", train_eps, train_worlds),
            (f"nav-val-seen-{mode}", val_seen_eps, train_worlds),
            (f"nav-val-unseen-{mode}", val_unseen_eps, unseen_worlds),
        ):
            items = []
            for ep in eps:
                items += extract_nav_instances(worlds[ep.world_id], ep, mode, lookahead)
            save_dataset(items, data_path(args.run_dir, name), meta)
            counts[name] = len(items)

    for name, eps in (
        ("ask-train", train_eps),
        ("ask-val-seen", val_seen_eps),
        ("ask-val-unseen", val_unseen_eps),
    ):
        items = []
        for ep in eps:
            items += extract_ask_labels(ep)
        save_dataset(items, data_path(args.run_dir, name), meta)
        counts[name] = len(items)

    vln = []
    for w in train_worlds.values():
        vln += generate_instruction_instances(
            w, _episode_seed(cfg, w.seed, 0x71), cfg.data.vln_paths_per_world
        )
    save_dataset(vln, data_path(args.run_dir, "vln-train"), meta)
    counts["vln-train"] = len(vln)

    for name, c in sorted(counts.items()):
        print(f"{name}: {c} records")
    return 0


def cmd_pretrain(cfg, args):
    os.makedirs(os.path.join(args.run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(args.run_dir, "reports"), exist_ok=True)
    worlds = _load_worlds(args.run_dir, cfg.train_seeds)
    nav_file = data_path(args.run_dir, f"nav-train-{cfg.finetune.supervision}")
    nav = load_dataset(_require(nav_file, "gen-data"))
    captions = make_caption_corpus(
        list(worlds.values()), cfg.seed, cfg.data.captions_per_world * len(worlds)
    )
    datasets = PretrainDatasets(worlds=worlds, captions=captions, nav=nav)
    steps_file = os.path.join(args.run_dir, "reports", "pretrain-steps.jsonl")
    model, heads, vocab, report = run_pretraining(
        datasets,
        cfg.pretrain.flags,
        cfg.pretrain.train,
        cfg.encoder,
        seed=cfg.seed,
        report_path=steps_file,
    )
    out = checkpoint_path(args.run_dir, "pretrained")
    save_encoder(model, vocab, out, extra=_meta(cfg))
    report.pop("config", None)
    _write_report(cfg, {"pretrain": report}, report_path(args.run_dir, "pretrain"))
    print(f"pretrained encoder -> {out} ({report['steps']} steps)")
    return 0


def cmd_finetune(cfg, args):
    os.makedirs(os.path.join(args.run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(args.run_dir, "reports"), exist_ok=True)
    worlds = _load_worlds(args.run_dir, cfg.train_seeds)
    nav_file = data_path(args.run_dir, f"nav-train-{cfg.finetune.supervision}")
    instances = load_dataset(_require(nav_file, "gen-data"))
    vln = None
    if cfg.finetune.train.vln_mixing > 0:
        vln = load_dataset(_require(data_path(args.run_dir, "vln-train"), "gen-data"))

    pretrained, vocab = None, None
    if cfg.finetune.use_pretrained:
        ckpt = _require(checkpoint_path(args.run_dir, "pretrained"), "pretrain")
        pretrained, vocab, _ = load_encoder(ckpt)
    else:
        from .vocab import build_vocabulary

        vocab = build_vocabulary(cfg.world.objects, cfg.world.regions)

    space = cfg.finetune.space
    nav, report = train_imitation(
        worlds,
        instances,
        space,
        cfg=cfg.finetune.train,
        pretrained=pretrained,
        vocab=vocab,
        vln_instances=vln,
        enc_cfg=cfg.encoder,
        seed=cfg.seed,
    )
    out = checkpoint_path(args.run_dir, f"navigator-{space}")
    save_navigator(nav, out, extra=_meta(cfg))
    summary = {
        "space": space,
        "supervision": cfg.finetune.supervision,
        "use_pretrained": cfg.finetune.use_pretrained,
        "vln_mixing": cfg.finetune.train.vln_mixing,
        "final_loss": report["loss_curve"][-1] if report["loss_curve"] else None,
        "loss_curve": report["loss_curve"],
    }
    _write_report(cfg, {"finetune": summary}, report_path(args.run_dir, f"finetune-{space}"))
    print(f"navigator ({space}) -> {out}")
    return 0


def cmd_train_ask(cfg, args):
    os.makedirs(os.path.join(args.run_dir, "reports"), exist_ok=True)
    space = cfg.finetune.space
    ckpt = _require(checkpoint_path(args.run_dir, f"navigator-{space}"), "finetune")
    nav, _, _ = load_navigator(ckpt)
    worlds = _load_worlds(args.run_dir, cfg.train_seeds)
    examples = load_dataset(_require(data_path(args.run_dir, "ask-train"), "gen-data"))
    head, report = train_question_head(
        nav, worlds, examples, cfg=cfg.finetune.train, seed=cfg.seed
    )
    out = checkpoint_path(args.run_dir, f"asknav-{space}")
    save_navigator(nav, out, head=head, extra=_meta(cfg))
    _write_report(cfg, {"ask": report}, report_path(args.run_dir, "ask"))
    print(
        f"question head -> {out} "
        f"(val balanced accuracy {report['val_balanced_accuracy']:.3f}, theta {report['theta']:.3f})"
    )
    return 0


def _default_checkpoint(cfg, run_dir):
    space = cfg.finetune.space
    with_head = checkpoint_path(run_dir, f"asknav-{space}")
    if os.path.exists(with_head):
        return with_head
    return checkpoint_path(run_dir, f"navigator-{space}")


def _eval_split(cfg, nav, head, worlds, instances, ask_examples, rng):
    episodes = []
    for inst in instances:
        traj = rollout(nav, worlds[inst.world_id], inst, decoding=cfg.eval.decoding, rng=rng)
        episodes.append(
            M.make_eval_episode(worlds[inst.world_id], traj.nodes, inst.path, inst.path[-1])
        )
    out = M.evaluate_episodes(episodes, cfg.eval.success_radius, cfg.eval.dtw_threshold)
    if head is not None and ask_examples:
        preds, labels = [], []
        for group in group_ask_examples(ask_examples).values():
            feats = featurize_episode(nav, worlds[group[0].world_id], group)
            with torch.no_grad():
                probs = torch.sigmoid(head(feats)).numpy()
            preds += (probs >= head.theta).astype(int).tolist()
            labels += [e.label for e in group]
        out["ask"] = M.classification_report(np.array(preds), np.array(labels))
    return out


def cmd_evaluate(cfg, args):
    os.makedirs(os.path.join(args.run_dir, "reports"), exist_ok=True)
    ckpt = args.checkpoint or _default_checkpoint(cfg, args.run_dir)
    _require(ckpt, "finetune")
    nav, head, _ = load_navigator(ckpt)
    sup = cfg.finetune.supervision
    for split, seeds in (("seen", cfg.train_seeds), ("unseen", cfg.unseen_seeds)):
        worlds = _load_worlds(args.run_dir, seeds)
        instances = load_dataset(
            _require(data_path(args.run_dir, f"nav-val-{split}-{sup}"), "gen-data")
        )
        ask = load_dataset(_require(data_path(args.run_dir, f"ask-val-{split}"), "gen-data"))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xEA]))
        result = _eval_split(cfg, nav, head, worlds, instances, ask, rng)
        result["checkpoint"] = ckpt
        result["split"] = split
        path = _write_report(cfg, {"metrics": result}, report_path(args.run_dir, f"eval-{split}"))
        line = (
            f"{split}: GP {result['goal_progress']:.2f} SR {result['success_rate']:.2f} "
            f"SPL {result['spl']:.2f} nDTW {result['ndtw']:.2f}"
        )
        if "ask" in result and result["ask"]["balanced_accuracy"] is not None:
            line += f" askBA {result['ask']['balanced_accuracy']:.2f}"
        print(line + f" -> {path}")
    return 0


def cmd_gameplay(cfg, args):
    os.makedirs(os.path.join(args.run_dir, "logs"), exist_ok=True)
    os.makedirs(os.path.join(args.run_dir, "reports"), exist_ok=True)
    mode = args.mode or cfg.gameplay.mode
    ckpt = args.checkpoint or _default_checkpoint(cfg, args.run_dir)
    _require(ckpt, "finetune")
    nav, head, _ = load_navigator(ckpt)
    if mode == "general" and head is None:
        raise ConfigError(
            f"general game play needs a question head; {ckpt} has none (run `asknav train-ask`)"
        )
    nav.head = head
    worlds = list(_load_worlds(args.run_dir, cfg.unseen_seeds).values())
    logs = []
    for i in range(cfg.gameplay.episodes):
        world = worlds[i % len(worlds)]
        task = make_game_task(world, seed=_episode_seed(cfg, world.seed, 0x6A + i))
        policy = NeuralPolicy(nav)
        logs.append(
            run_episode(
                policy,
                scripted_questioner,
                scripted_guide,
                world,
                task,
                mode=mode,
                max_turns=cfg.gameplay.max_turns,
                lookahead=cfg.gameplay.lookahead,
                segment_cap=cfg.gameplay.segment_cap,
            )
        )
    out = log_path(args.run_dir, f"gameplay-{mode}")
    save_episode_logs(logs, out, _meta(cfg))
    summary = {
        "mode": mode,
        "episodes": len(logs),
        "mean_goal_progress": float(np.mean([l.metrics["goal_progress"] for l in logs])),
        "success_rate": float(np.mean([l.metrics["success"] for l in logs])),
        "mean_ndtw": float(np.mean([l.metrics["ndtw"] for l in logs])),
        "mean_turns": float(np.mean([l.turns for l in logs])),
        "mean_questions": float(np.mean([len(l.question_steps) for l in logs])),
        "reasons": {r: sum(1 for l in logs if l.reason == r) for r in
                    sorted({l.reason for l in logs})},
        "log_file": out,
    }
    _write_report(cfg, {"gameplay": summary}, report_path(args.run_dir, f"gameplay-{mode}"))
    print(
        f"{mode}: {len(logs)} episodes, mean GP {summary['mean_goal_progress']:.2f}, "
        f"SR {summary['success_rate']:.2f}, mean questions {summary['mean_questions']:.1f} -> {out}"
    )
    return 0


def cmd_replay(cfg, args):
    mode = args.mode or cfg.gameplay.mode
    path = args.log or log_path(args.run_dir, f"gameplay-{mode}")
    logs = load_episode_logs(_require(path, "gameplay"))
    seeds = set(cfg.train_seeds) | set(cfg.unseen_seeds)
    worlds = {}
    for s in seeds:
        p = world_path(args.run_dir, s)
        if os.path.exists(p):
            w = load_world(p)
            worlds[w.world_id] = w
    for i, log in enumerate(logs):
        if log.world_id not in worlds:
            raise DataError(
                f"{path}: episode {i} references {log.world_id} with no world file in "
                f"{os.path.join(args.run_dir, 'worlds')}"
            )
        rederived = replay_metrics(worlds[log.world_id], log)
        if rederived != log.metrics:
            raise DataError(
                f"{path}: episode {i} metrics do not replay: "
                f"stored {log.metrics}, re-derived {rederived}"
            )
    print(f"{path}: {len(logs)} episodes replay bit-exactly")
    return 0


COMMANDS = {
    "gen-world": cmd_gen_world,
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-ask": cmd_train_ask,
    "evaluate": cmd_evaluate,
    "gameplay": cmd_gameplay,
    "replay": cmd_replay,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="asknav", description="dialog-guided navigation pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        p.add_argument("--run-dir", default="run", help="artifact directory")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, repeatable",
        )
        if name == "finetune":
            p.add_argument("--action-space", choices=("viewpoint", "turn-based"), default=None)
        if name in ("evaluate", "gameplay"):
            p.add_argument("--checkpoint", default=None, help="navigator checkpoint path")
        if name in ("gameplay", "replay"):
            p.add_argument("--mode", choices=("heuristic4", "general"), default=None)
        if name == "replay":
            p.add_argument("--log", default=None, help="episode log file to verify")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    if getattr(args, "action_space", None):
        cfg = apply_overrides(cfg, [f"finetune.space={args.action_space}"])
    cfg.validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        os.makedirs(args.run_dir, exist_ok=True)
        save_config(cfg, os.path.join(args.run_dir, "config.json"))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
