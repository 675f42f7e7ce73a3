"""Attention LSTM action decoder over the cross-modal encoder, imitation
training for both action spaces, rollouts, and the frozen-stack question
head that decides when to ask instead of navigate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dialog import AskExample
from .encoder import (
    DIRECTION_DIM,
    CrossModalEncoder,
    EncoderConfig,
    assemble_input,
    build_direction_embedding,
    collate_inputs,
)
from .errors import ConfigError, DataError
from .vocab import Vocabulary
from .world import (
    STOP_CHOICE,
    AgentState,
    TurnAction,
    bearing,
    next_node_direction,
    observe,
    step_turn_based,
    step_viewpoint,
)

ACTION_SPACES = ("viewpoint", "turn-based")
NAVIGATOR_VERSION = 1

TURN_ORDER = (
    TurnAction.FORWARD,
    TurnAction.LEFT,
    TurnAction.RIGHT,
    TurnAction.UP,
    TurnAction.DOWN,
    TurnAction.STOP,
)
TURN_INDEX = {a: i for i, a in enumerate(TURN_ORDER)}
PREV_NONE = len(TURN_ORDER)  # embedding slot for "episode just started"

ASK_STEP_CAP = 16  # steps-since-question one-hot saturates here


@dataclass(frozen=True)
class AgentConfig:
    decoder_dim: int = 128
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    clip_norm: float = 1.0
    vln_mixing: float = 0.0  # chance a batch slot draws from the extra pool
    max_steps_viewpoint: int = 20
    max_steps_turn: int = 80
    head_hidden: int = 64
    head_steps: int = 200
    head_lr: float = 1e-2
    head_val_fraction: float = 0.25

    def validate(self):
        if not (0.0 <= self.vln_mixing <= 1.0):
            raise ConfigError("vln_mixing must be a probability")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("steps and batch_size must be positive")


@dataclass
class DecoderState:
    h: torch.Tensor  # [1, D]
    c: torch.Tensor  # [1, D]
    prev: torch.Tensor  # [D_prev] previous-action embedding input


@dataclass
class ActionDistribution:
    space: str
    candidates: list  # [STOP_CHOICE, node, ...] or list of TurnAction
    logits: torch.Tensor  # [C]

    @property
    def probs(self):
        return F.softmax(self.logits.detach(), dim=-1).numpy()


class Navigator(nn.Module):
    """Encoder + LSTM decoder with per-space action scorers."""

    def __init__(self, encoder, vocab, cfg, space):
        super().__init__()
        if space not in ACTION_SPACES:
            raise ConfigError(f"unknown action space {space!r}")
        cfg.validate()
        self.encoder = encoder
        self.vocab = vocab
        self.cfg = cfg
        self.space = space
        h = encoder.cfg.hidden_dim
        p = encoder.cfg.feature_dim
        d = cfg.decoder_dim
        self.pooled_proj = nn.Linear(p, d)
        self.prev_turn_embed = nn.Embedding(len(TURN_ORDER) + 1, d)
        self.lstm = nn.LSTMCell(2 * d, d)
        self.combine = nn.Linear(d + h, d)
        self.cand_proj = nn.Linear(p + DIRECTION_DIM, d)
        self.stop_embed = nn.Parameter(torch.zeros(d))
        self.turn_head = nn.Linear(d, len(TURN_ORDER))
        nn.init.normal_(self.stop_embed, std=0.02)

    @property
    def dtype(self):
        return self.pooled_proj.weight.dtype

    def init_state(self):
        d = self.cfg.decoder_dim
        t = self.dtype
        return DecoderState(
            h=torch.zeros(1, d, dtype=t),
            c=torch.zeros(1, d, dtype=t),
            prev=torch.zeros(d, dtype=t),
        )

    def prev_action_input(self, move_direction=None, turn_action=None):
        """Embedding of the action taken last step, for the next LSTM input."""
        if self.space == "viewpoint":
            if move_direction is None:
                return torch.zeros(self.cfg.decoder_dim, dtype=self.dtype)
            h, e = move_direction
            return torch.from_numpy(
                build_direction_embedding(h, e, self.cfg.decoder_dim)
            ).to(self.dtype)
        idx = PREV_NONE if turn_action is None else TURN_INDEX[turn_action]
        return self.prev_turn_embed(torch.tensor(idx))

    def decode_step(self, enc_hidden, enc_mask, world, obs, state, dec):
        """One decoder step; returns (ActionDistribution, DecoderState)."""
        pooled = torch.from_numpy(obs.pooled_feature()).to(self.dtype)
        x = torch.cat([dec.prev, self.pooled_proj(pooled)]).unsqueeze(0)
        h, c = self.lstm(x, (dec.h, dec.c))

        scores = enc_hidden @ h.squeeze(0)  # [L]
        scores = scores.masked_fill(~enc_mask, float("-inf"))
        attn = F.softmax(scores, dim=-1)
        context = attn @ enc_hidden  # [H]
        tilde = torch.tanh(self.combine(torch.cat([h.squeeze(0), context])))

        if self.space == "viewpoint":
            neighbors = list(world.neighbors[state.node])
            cands = [STOP_CHOICE] + neighbors
            view_feats = obs.view_pooled_features()
            embeds = [self.stop_embed]
            for nb in neighbors:
                hh, ee, bin_ = next_node_direction(world, state, nb)
                feat = np.concatenate(
                    [view_feats[bin_], build_direction_embedding(hh, ee)]
                )
                embeds.append(self.cand_proj(torch.from_numpy(feat).to(self.dtype)))
            logits = torch.stack([tilde @ e for e in embeds])
        else:
            cands = list(TURN_ORDER)
            logits = self.turn_head(tilde)

        new = DecoderState(h=h, c=c, prev=dec.prev)
        return ActionDistribution(self.space, cands, logits), new, tilde


# ---------------------------------------------------------------------------
# Teacher forcing


def viewpoint_states(world, path):
    """Agent states along a node path, headings facing each move."""
    states = [AgentState(node=path[0])]
    for u, v in zip(path, path[1:]):
        states.append(step_viewpoint(world, states[-1], v))
    return states


def rotation_macro(world, state, target):
    """Shortest turn-action sequence reaching `target` from `state`.

    Breadth-first search over (node, grid-heading) with FORWARD/RIGHT/LEFT.
    Ties prefer FORWARD progress, then right turns. Usually this is a few
    rotations plus one FORWARD, but when the target is angularly shadowed
    by a nearer neighbor the walk routes through it.
    """
    k0 = int(round(state.heading / (math.pi / 6))) % 12
    start = (state.node, k0)
    came = {start: None}
    queue = [start]
    goal = None
    while queue:
        cur = queue.pop(0)
        if cur[0] == target:
            goal = cur
            break
        node, k = cur
        probe = AgentState(node, (k * math.pi / 6) % (2 * math.pi), state.elevation)
        succs = [
            (TurnAction.FORWARD, (step_turn_based(world, probe, TurnAction.FORWARD).node, k)),
            (TurnAction.RIGHT, (node, (k + 1) % 12)),
            (TurnAction.LEFT, (node, (k - 1) % 12)),
        ]
        for action, nxt in succs:
            if nxt not in came:
                came[nxt] = (cur, action)
                queue.append(nxt)
    if goal is None:
        return None
    actions = []
    while came[goal] is not None:
        goal, action = came[goal]
        actions.append(action)
    return actions[::-1]


def turn_based_expansion(world, path):
    """(state, target-action) pairs realizing a node path with rotations
    and FORWARDs, ending with STOP."""
    state = AgentState(node=path[0])
    out = []
    for target in path[1:]:
        macro = rotation_macro(world, state, target)
        if macro is None:
            return None
        for action in macro:
            out.append((state, action))
            state = step_turn_based(world, state, action)
        if state.node != target:
            return None
    out.append((state, TurnAction.STOP))
    return out


def _validate_path(world, inst):
    for u, v in zip(inst.path, inst.path[1:]):
        if v not in world.neighbors[u]:
            raise DataError(
                f"instance {inst.world_id} start={inst.start} mode={inst.mode}: "
                f"supervision step {u}->{v} is not an edge"
            )


def _encode_steps(nav, world, inst, states):
    """Batched encoder forward over every step's (history, observation)."""
    inputs = [
        assemble_input(nav.vocab, inst.history, observe(world, s), nav.encoder.cfg)
        for s in states
    ]
    batch = collate_inputs(inputs, nav.vocab.pad_id, nav.encoder.cfg.max_len)
    hidden = nav.encoder(batch)
    mask = torch.cat([batch["token_mask"], batch["region_mask"]], dim=1)
    return hidden, mask


def instance_loss(nav, world, inst):
    """Teacher-forced cross-entropy over one instance; returns (sum, steps, hits)."""
    _validate_path(world, inst)
    if nav.space == "viewpoint":
        states = viewpoint_states(world, inst.path)
        targets = list(inst.path[1:]) + [STOP_CHOICE]
    else:
        expansion = turn_based_expansion(world, inst.path)
        if expansion is None:
            raise DataError(
                f"instance {inst.world_id} start={inst.start} mode={inst.mode}: "
                "path is not executable with 30-degree turns"
            )
        states = [s for s, _ in expansion]
        targets = [a for _, a in expansion]

    hidden, mask = _encode_steps(nav, world, inst, states)
    dec = nav.init_state()
    total = hidden.sum() * 0.0
    hits = 0
    for t, (state, target) in enumerate(zip(states, targets)):
        obs = observe(world, state)
        dist, dec, _ = nav.decode_step(hidden[t], mask[t], world, obs, state, dec)
        idx = dist.candidates.index(target)
        total = total + F.cross_entropy(
            dist.logits.unsqueeze(0), torch.tensor([idx])
        )
        hits += int(dist.logits.detach().argmax().item() == idx)
        if nav.space == "viewpoint":
            if target != STOP_CHOICE:
                dec.prev = nav.prev_action_input(
                    move_direction=bearing(world, state.node, target)
                )
        else:
            if target != TurnAction.STOP:
                dec.prev = nav.prev_action_input(turn_action=target)
    return total, len(targets), hits


def train_imitation(
    worlds,
    instances,
    space,
    cfg=None,
    pretrained=None,
    vocab=None,
    vln_instances=None,
    enc_cfg=None,
    seed=0,
):
    """Imitation-train a navigator; returns (navigator, report).

    `pretrained` is an encoder to finetune (deep-copied); omitting it trains
    from random initialization with `enc_cfg`. `vln_instances` mix in with
    probability cfg.vln_mixing per batch slot.
    """
    cfg = cfg or AgentConfig()
    cfg.validate()
    if not instances:
        raise ConfigError("no training instances")
    if vocab is None:
        raise ConfigError("train_imitation needs the shared vocabulary")

    torch.manual_seed(seed)
    if pretrained is None:
        encoder = CrossModalEncoder(enc_cfg or EncoderConfig(), vocab_size=len(vocab))
    else:
        encoder = copy.deepcopy(pretrained)
    nav = Navigator(encoder, vocab, cfg, space)
    nav.train()

    opt = torch.optim.Adam(nav.parameters(), lr=cfg.lr)
    rng_mix = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    rng_pick = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))

    losses = []
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            mix = rng_mix.random()
            if vln_instances and mix < cfg.vln_mixing:
                pool = vln_instances
            else:
                pool = instances
            batch.append(pool[int(rng_pick.integers(len(pool)))])
        total = None
        steps_n = 0
        for inst in batch:
            l, n, _ = instance_loss(nav, worlds[inst.world_id], inst)
            total = l if total is None else total + l
            steps_n += n
        loss = total / steps_n
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(nav.parameters(), cfg.clip_norm)
        opt.step()
        losses.append(float(loss.detach()))

    nav.eval()
    report = {"loss_curve": losses, "steps": cfg.steps, "space": space, "seed": int(seed)}
    return nav, report


def teacher_forced_accuracy(nav, worlds, instances):
    """Fraction of supervision steps whose argmax action matches the target."""
    hits = 0
    steps = 0
    with torch.no_grad():
        for inst in instances:
            _, n, h = instance_loss(nav, worlds[inst.world_id], inst)
            hits += h
            steps += n
    return hits / max(steps, 1)


# ---------------------------------------------------------------------------
# Rollouts


@dataclass(frozen=True)
class Trajectory:
    nodes: tuple  # node sequence, start included
    actions: tuple  # chosen candidates, in order
    stopped: bool  # STOP was selected before the step cap
    steps: int


def rollout(nav, world, inst, max_steps=None, decoding="greedy", rng=None):
    """Execute the policy from inst.start under inst.history."""
    if decoding not in ("greedy", "sample"):
        raise ConfigError(f"unknown decoding {decoding!r}")
    if decoding == "sample" and rng is None:
        raise ConfigError("sample decoding needs an rng")
    if max_steps is None:
        max_steps = (
            nav.cfg.max_steps_viewpoint
            if nav.space == "viewpoint"
            else nav.cfg.max_steps_turn
        )
    state = AgentState(node=inst.start)
    dec = nav.init_state()
    nodes = [state.node]
    actions = []
    stopped = False
    with torch.no_grad():
        for _ in range(max_steps):
            obs = observe(world, state)
            x = assemble_input(nav.vocab, inst.history, obs, nav.encoder.cfg)
            batch = collate_inputs([x], nav.vocab.pad_id, nav.encoder.cfg.max_len)
            hidden = nav.encoder(batch)
            mask = torch.cat([batch["token_mask"], batch["region_mask"]], dim=1)
            dist, dec, _ = nav.decode_step(hidden[0], mask[0], world, obs, state, dec)
            if decoding == "greedy":
                pick = int(dist.logits.argmax().item())
            else:
                pick = int(rng.choice(len(dist.candidates), p=dist.probs))
            choice = dist.candidates[pick]
            actions.append(choice)
            if nav.space == "viewpoint":
                if choice == STOP_CHOICE:
                    stopped = True
                    break
                dec.prev = nav.prev_action_input(
                    move_direction=bearing(world, state.node, choice)
                )
                state = step_viewpoint(world, state, choice)
                nodes.append(state.node)
            else:
                if choice == TurnAction.STOP:
                    stopped = True
                    break
                dec.prev = nav.prev_action_input(turn_action=choice)
                state = step_turn_based(world, state, choice)
                if state.node != nodes[-1]:
                    nodes.append(state.node)
    return Trajectory(
        nodes=tuple(nodes),
        actions=tuple(
            a.name if isinstance(a, TurnAction) else a for a in actions
        ),
        stopped=stopped,
        steps=len(actions),
    )


# ---------------------------------------------------------------------------
# Question-asking head


class QuestionHead(nn.Module):
    """Two-layer feed-forward ask/navigate classifier on frozen features."""

    def __init__(self, enc_hidden, decoder_dim, hidden=64):
        super().__init__()
        in_dim = enc_hidden + decoder_dim + ASK_STEP_CAP + 1
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1)
        )
        self.theta = 0.5

    def forward(self, feats):
        return self.net(feats).squeeze(-1)


def _steps_one_hot(steps_since_ask):
    v = torch.zeros(ASK_STEP_CAP + 1)
    v[min(int(steps_since_ask), ASK_STEP_CAP)] = 1.0
    return v


def featurize_episode(nav, world, examples):
    """Frozen-stack features for one episode's examples, in time order.

    Replays the episode once: at each time-step the current history and
    observation are encoded, the decoder advances, and the features
    [CLS, combined decoder state, steps-since-question one-hot] are taken
    at that step's decision point. Asking leaves the agent in place, so the
    previous-action input only changes on navigation steps.
    """
    feats = []
    dec = nav.init_state()
    state = AgentState(node=examples[0].prefix[0])
    with torch.no_grad():
        for i, ex in enumerate(examples):
            if ex.prefix[-1] != state.node:
                raise DataError("ask examples out of order for featurization")
            obs = observe(world, state)
            x = assemble_input(nav.vocab, ex.history, obs, nav.encoder.cfg)
            batch = collate_inputs([x], nav.vocab.pad_id, nav.encoder.cfg.max_len)
            hidden = nav.encoder(batch)
            mask = torch.cat([batch["token_mask"], batch["region_mask"]], dim=1)
            dist, dec, tilde = nav.decode_step(
                hidden[0], mask[0], world, obs, state, dec
            )
            feats.append(
                torch.cat(
                    [
                        hidden[0, 0],
                        tilde,
                        _steps_one_hot(ex.steps_since_ask).to(tilde.dtype),
                    ]
                )
            )
            if ex.label == 0 and i + 1 < len(examples):
                # a navigation step: the successor's prefix names the move
                succ = examples[i + 1].prefix
                if len(succ) <= len(ex.prefix):
                    raise DataError(
                        "episode group mixes unrelated examples; prefixes do not chain"
                    )
                nxt = succ[len(ex.prefix)]
                dec.prev = nav.prev_action_input(
                    move_direction=bearing(world, state.node, nxt)
                )
                state = step_viewpoint(world, state, nxt)
    return torch.stack(feats)


def _balanced_accuracy(preds, labels):
    recalls = []
    for cls in (0, 1):
        sel = labels == cls
        if sel.sum() == 0:
            return None
        recalls.append(float((preds[sel] == cls).mean()))
    return sum(recalls) / 2


def group_ask_examples(examples):
    """Regroup a flat example stream into per-episode chains.

    Keys hash the episode content, so two simulations that happen to produce
    the same episode share a key; their example streams are split apart again
    at each prefix restart and exact-duplicate chains dropped.
    """
    chains = {}
    for ex in examples:
        runs = chains.setdefault(ex.episode_key, [])
        if not runs or len(ex.prefix) == 1:
            runs.append([ex])
        else:
            runs[-1].append(ex)
    groups = {}
    for key, runs in chains.items():
        seen = set()
        for i, run in enumerate(runs):
            sig = tuple((e.label, e.prefix, e.steps_since_ask) for e in run)
            if sig in seen:
                continue
            seen.add(sig)
            groups[(key, i)] = run
    return groups


def train_question_head(nav, worlds, examples, cfg=None, seed=0):
    """Fit the ask/navigate head with the navigator frozen; returns
    (head, report). theta lands where validation balanced accuracy peaks."""
    cfg = cfg or nav.cfg
    labels_all = {ex.label for ex in examples}
    if labels_all != {0, 1}:
        raise DataError("question-head training needs both ask and navigate labels")

    by_episode = group_ask_examples(examples)
    feats_by_ep = {}
    labels_by_ep = {}
    for key, eps in by_episode.items():
        world = worlds[eps[0].world_id]
        feats_by_ep[key] = featurize_episode(nav, world, eps)
        labels_by_ep[key] = torch.tensor([float(e.label) for e in eps])

    keys = sorted(by_episode)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    rng.shuffle(keys)
    n_val = max(1, int(len(keys) * cfg.head_val_fraction))
    val_keys, train_keys = keys[:n_val], keys[n_val:]
    if not train_keys:
        raise DataError("not enough episodes to split off a validation set")

    x_train = torch.cat([feats_by_ep[k] for k in train_keys])
    y_train = torch.cat([labels_by_ep[k] for k in train_keys])
    x_val = torch.cat([feats_by_ep[k] for k in val_keys])
    y_val = torch.cat([labels_by_ep[k] for k in val_keys])
    if set(y_train.tolist()) != {0.0, 1.0}:
        raise DataError("training split collapsed to a single class")

    torch.manual_seed(seed)
    head = QuestionHead(
        nav.encoder.cfg.hidden_dim, nav.cfg.decoder_dim, cfg.head_hidden
    )
    pos = float(y_train.sum())
    neg = float(len(y_train) - pos)
    pos_weight = torch.tensor(neg / max(pos, 1.0))
    opt = torch.optim.Adam(head.parameters(), lr=cfg.head_lr)
    for _ in range(cfg.head_steps):
        logits = head(x_train)
        loss = F.binary_cross_entropy_with_logits(logits, y_train, pos_weight=pos_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        val_probs = torch.sigmoid(head(x_val)).numpy()
    y_val_np = y_val.numpy().astype(int)
    best = (None, -1.0)
    for theta in _threshold_grid(val_probs):
        preds = (val_probs >= theta).astype(int)
        ba = _balanced_accuracy(preds, y_val_np)
        if ba is not None and ba > best[1]:
            best = (theta, ba)
    if best[0] is None:
        # validation split is single-class; fall back to the default cut
        best = (0.5, float("nan"))
    head.theta = float(best[0])
    head.eval()
    report = {
        "val_balanced_accuracy": best[1],
        "theta": head.theta,
        "train_examples": int(len(y_train)),
        "val_examples": int(len(y_val)),
        "positive_fraction": pos / max(len(y_train), 1),
    }
    return head, report


def _threshold_grid(probs):
    qs = np.unique(probs)
    mids = (qs[1:] + qs[:-1]) / 2
    return np.concatenate([[0.0], mids, [1.0 + 1e-9]])


@dataclass(frozen=True)
class AskContext:
    """Everything should_ask needs, replayed from scratch for purity."""

    world_id: str
    history: object
    prefix: tuple
    steps_since_ask: int


def ask_probability(head, features):
    with torch.no_grad():
        return float(torch.sigmoid(head(features)))


def should_ask(nav, head, worlds, ctx):
    """(probability, decision) for asking at this point of an episode."""
    world = worlds[ctx.world_id]
    # replay the prefix as navigate-labeled pseudo-examples, deciding at the end
    examples = []
    for i in range(len(ctx.prefix)):
        examples.append(
            AskExample(
                world_id=ctx.world_id,
                history=ctx.history,
                prefix=tuple(ctx.prefix[: i + 1]),
                steps_since_ask=max(0, ctx.steps_since_ask - (len(ctx.prefix) - 1 - i)),
                label=0,
                episode_key="query",
            )
        )
    feats = featurize_episode(nav, world, examples)
    prob = ask_probability(head, feats[-1])
    return prob, prob >= head.theta


# ---------------------------------------------------------------------------
# Checkpoints


def save_navigator(nav, path, head=None, extra=None):
    torch.save(
        {
            "version": NAVIGATOR_VERSION,
            "space": nav.space,
            "encoder_config": asdict(nav.encoder.cfg),
            "agent_config": asdict(nav.cfg),
            "vocab": list(nav.vocab.id_to_token),
            "state": nav.state_dict(),
            "head_state": head.state_dict() if head is not None else None,
            "head_theta": head.theta if head is not None else None,
            "extra": dict(extra or {}),
        },
        path,
    )


def load_navigator(path):
    from .vocab import SPECIAL_TOKENS

    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("version") != NAVIGATOR_VERSION:
        raise DataError(f"{path}: unsupported navigator checkpoint version")
    enc_cfg = EncoderConfig(**blob["encoder_config"])
    cfg = AgentConfig(**blob["agent_config"])
    vocab = Vocabulary(blob["vocab"][len(SPECIAL_TOKENS):])
    encoder = CrossModalEncoder(enc_cfg, vocab_size=len(vocab))
    nav = Navigator(encoder, vocab, cfg, blob["space"])
    nav.load_state_dict(blob["state"])
    nav.eval()
    head = None
    if blob.get("head_state") is not None:
        head = QuestionHead(enc_cfg.hidden_dim, cfg.decoder_dim, cfg.head_hidden)
        head.load_state_dict(blob["head_state"])
        head.theta = float(blob["head_theta"])
        head.eval()
    return nav, head, blob.get("extra", {})
