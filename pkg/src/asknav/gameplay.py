"""Navigator-questioner-guide episode loop.

One time-step is one decode pass: the navigator either asks (when the
mode's trigger fires) or moves. A turn is a navigation segment plus its
optional preceding exchange; episodes end when the navigator declares the
goal by stopping or when the turn budget runs out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .agent import _steps_one_hot, ask_probability
from .dialog import (
    DialogHistory,
    GenConfig,
    guide_answer,
    hint_tokens,
    question_tokens,
    salient_object,
)
from .encoder import assemble_input, collate_inputs
from .errors import ConfigError, DataError, InvalidActionError
from .metrics import goal_progress, make_eval_episode, ndtw, success
from .world import (
    STOP_CHOICE,
    AgentState,
    TurnAction,
    bearing,
    observe,
    oracle_path_to_region,
    step_turn_based,
    step_viewpoint,
)

LOG_SCHEMA = "asknav.episode-log"
LOG_VERSION = 1

GAME_MODES = ("heuristic4", "general")
HEURISTIC_PERIOD = 4
SEGMENT_CAP = 10


@dataclass(frozen=True)
class GameTask:
    hint: tuple
    start: int
    goal_region: str


def make_game_task(world, seed, min_start_steps=4):
    """Seeded task: hint naming a goal-region landmark, spawn away from it."""
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, int(seed), 0x6A3E]))
    goal = world.goal_region
    non_goal = [n for n in world.node_ids() if world.region_of[n] != goal]
    if not non_goal:
        raise DataError("world has no start candidates outside the goal region")
    hops = {n: len(oracle_path_to_region(world, n, goal)) - 1 for n in non_goal}
    want = min(min_start_steps, max(hops.values()))
    candidates = [n for n in non_goal if hops[n] >= want]
    start = int(candidates[int(rng.integers(len(candidates)))])
    target = salient_object(world, world.regions[goal][0])
    return GameTask(hint=hint_tokens(target, goal), start=start, goal_region=goal)


def scripted_guide(world, state, goal, l=5):
    """The privileged answerer: wraps the planner-backed answer template."""
    return guide_answer(world, state, goal, lookahead=l)


def scripted_questioner(history, visible_tags=()):
    """Templated question over the hint's target and current sights."""
    return question_tokens(history, visible_tags=visible_tags)


class NeuralPolicy:
    """Incremental decoding wrapper: one decode pass per time-step, with the
    decoder state carried across moves and exchanges alike."""

    def __init__(self, nav, head=None):
        self.nav = nav
        self.head = head
        self.dec = None

    @property
    def space(self):
        return self.nav.space

    def reset(self):
        self.dec = self.nav.init_state()

    def step(self, world, state, history, since_ask):
        nav = self.nav
        obs = observe(world, state)
        x = assemble_input(nav.vocab, history, obs, nav.encoder.cfg)
        batch = collate_inputs([x], nav.vocab.pad_id, nav.encoder.cfg.max_len)
        with torch.no_grad():
            hidden = nav.encoder(batch)
            mask = torch.cat([batch["token_mask"], batch["region_mask"]], dim=1)
            dist, self.dec, tilde = nav.decode_step(
                hidden[0], mask[0], world, obs, state, self.dec
            )
            choice = dist.candidates[int(dist.logits.argmax().item())]
            prob = None
            if self.head is not None:
                feats = torch.cat(
                    [hidden[0, 0], tilde, _steps_one_hot(since_ask)]
                )
                prob = ask_probability(self.head, feats)
        return choice, prob

    def moved(self, world, state, choice):
        if self.nav.space == "viewpoint":
            self.dec.prev = self.nav.prev_action_input(
                move_direction=bearing(world, state.node, choice)
            )
        else:
            self.dec.prev = self.nav.prev_action_input(turn_action=choice)


class OraclePolicy:
    """Planner-following scripted navigator; never asks."""

    space = "viewpoint"
    goal_region = None  # run_episode fills this in from the task

    def reset(self):
        pass

    def step(self, world, state, history, since_ask):
        if self.goal_region is None:
            raise ConfigError("OraclePolicy needs goal_region set before use")
        if world.region_of[state.node] == self.goal_region:
            return STOP_CHOICE, None
        return oracle_path_to_region(world, state.node, self.goal_region)[1], None

    def moved(self, world, state, choice):
        pass


@dataclass
class EpisodeLog:
    world_id: str
    mode: str
    hint: tuple
    start: int
    goal_region: str
    max_turns: int
    events: list
    reason: str
    turns: int
    steps: int
    path: tuple
    metrics: dict

    @property
    def question_steps(self):
        return tuple(e["step"] for e in self.events if e["event"] == "question")

    @property
    def ask_positive_steps(self):
        return tuple(
            e["step"]
            for e in self.events
            if e["event"] == "ask_decision" and e["ask"]
        )


def episode_metrics(world, path, goal_region):
    """GP, success, and planner-referenced nDTW for a walked path."""
    reference = oracle_path_to_region(world, path[0], goal_region)
    ep = make_eval_episode(world, path, reference, goal_region)
    return {
        "goal_progress": goal_progress(ep),
        "success": bool(success(ep)),
        "ndtw": ndtw(ep),
    }


def run_episode(
    policy,
    questioner,
    guide,
    world,
    task,
    mode,
    max_turns=20,
    lookahead=5,
    segment_cap=SEGMENT_CAP,
):
    """Play one episode; returns an EpisodeLog that replays exactly."""
    if mode not in GAME_MODES:
        raise ConfigError(f"unknown game-play mode {mode!r}")
    if hasattr(policy, "goal_region"):
        policy.goal_region = task.goal_region
    policy.reset()

    history = DialogHistory(hint=task.hint)
    state = AgentState(node=task.start)
    events = []
    path = [task.start]
    nav_steps = 0
    since_ask = 0
    seg_steps = 0
    turn = 1
    reason = None
    pending_ask = False

    events.append(
        {
            "event": "init",
            "world_id": world.world_id,
            "hint": " ".join(task.hint),
            "start": task.start,
            "goal_region": task.goal_region,
            "mode": mode,
            "max_turns": max_turns,
        }
    )

    while reason is None:
        if pending_ask:
            if turn >= max_turns:
                reason = "max-turns"
                break
            turn += 1
            seg_steps = 0
            tags = [salient_object(world, state.node)]
            q = questioner(history, visible_tags=tags)
            a = guide(world, state, task.goal_region, lookahead)
            events.append(
                {"event": "question", "step": nav_steps, "turn": turn, "tokens": " ".join(q)}
            )
            events.append({"event": "answer", "turn": turn, "tokens": " ".join(a)})
            history = history.with_exchange(q, a)
            since_ask = 0
            pending_ask = False
            continue

        choice, prob = policy.step(world, state, history, since_ask)

        if mode == "general" and prob is not None and since_ask >= 1:
            ask = prob >= policy.head.theta
            events.append(
                {"event": "ask_decision", "step": nav_steps, "prob": prob, "ask": ask}
            )
            if ask:
                pending_ask = True
                continue

        stop = (
            choice == STOP_CHOICE
            if policy.space == "viewpoint"
            else choice == TurnAction.STOP
        )
        if stop:
            reason = "declared-goal"
            events.append({"event": "stop", "step": nav_steps, "turn": turn})
            break

        try:
            if policy.space == "viewpoint":
                policy.moved(world, state, choice)
                state = step_viewpoint(world, state, choice)
            else:
                policy.moved(world, state, choice)
                state = step_turn_based(world, state, choice)
        except InvalidActionError as e:
            reason = "aborted"
            events.append({"event": "abort", "step": nav_steps, "error": str(e)})
            break

        nav_steps += 1
        since_ask += 1
        seg_steps += 1
        if state.node != path[-1]:
            path.append(state.node)
        events.append(
            {
                "event": "nav",
                "step": nav_steps,
                "turn": turn,
                "node": state.node,
                "action": choice.name if isinstance(choice, TurnAction) else choice,
            }
        )

        if mode == "heuristic4" and nav_steps % HEURISTIC_PERIOD == 0:
            pending_ask = True
        elif seg_steps >= segment_cap:
            if turn >= max_turns:
                reason = "max-turns"
            else:
                turn += 1
                seg_steps = 0

    metrics = episode_metrics(world, tuple(path), task.goal_region)
    events.append({"event": "end", "reason": reason, "turns": turn, "steps": nav_steps})
    return EpisodeLog(
        world_id=world.world_id,
        mode=mode,
        hint=tuple(task.hint),
        start=task.start,
        goal_region=task.goal_region,
        max_turns=max_turns,
        events=events,
        reason=reason,
        turns=turn,
        steps=nav_steps,
        path=tuple(path),
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# Log files and replay


def save_episode_logs(logs, path, meta=None):
    header = {"schema": LOG_SCHEMA, "version": LOG_VERSION}
    header.update(meta or {})
    with open(path, "w") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
        for log in logs:
            json.dump(
                {
                    "world_id": log.world_id,
                    "mode": log.mode,
                    "hint": " ".join(log.hint),
                    "start": log.start,
                    "goal_region": log.goal_region,
                    "max_turns": log.max_turns,
                    "events": log.events,
                    "reason": log.reason,
                    "turns": log.turns,
                    "steps": log.steps,
                    "path": list(log.path),
                    "metrics": log.metrics,
                },
                f,
                sort_keys=True,
            )
            f.write("\n")


def load_episode_logs(path):
    logs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record ({e.msg})") from e
            if lineno == 1:
                if obj.get("schema") != LOG_SCHEMA:
                    raise DataError(f"{path}:1: not an episode-log file")
                if obj.get("version") != LOG_VERSION:
                    raise DataError(f"{path}:1: unsupported version {obj.get('version')}")
                continue
            try:
                logs.append(
                    EpisodeLog(
                        world_id=obj["world_id"],
                        mode=obj["mode"],
                        hint=tuple(obj["hint"].split()),
                        start=obj["start"],
                        goal_region=obj["goal_region"],
                        max_turns=obj["max_turns"],
                        events=obj["events"],
                        reason=obj["reason"],
                        turns=obj["turns"],
                        steps=obj["steps"],
                        path=tuple(obj["path"]),
                        metrics=obj["metrics"],
                    )
                )
            except (KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed record ({e})") from e
    return logs


def replay_metrics(world, log):
    """Re-derive metrics from a log's events; must equal the stored block."""
    path = [log.start]
    for e in log.events:
        if e["event"] == "nav" and e["node"] != path[-1]:
            path.append(e["node"])
    if tuple(path) != log.path:
        raise DataError("logged events do not reproduce the logged path")
    return episode_metrics(world, tuple(path), log.goal_region)
