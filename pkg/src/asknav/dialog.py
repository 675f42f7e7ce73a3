"""Dialog-navigation episode synthesis and supervision extraction.

A DialogEpisode mirrors the cooperative data-collection format: an initial
hint about the goal, alternating navigation segments and question/answer
exchanges, ending inside the goal region. From an episode we extract
per-exchange navigation instances under three supervision modes
(navigator / oracle / mixed) and per-time-step binary ask/navigate labels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .world import (
    AgentState,
    bearing,
    is_edge_connected,
    oracle_path_to_region,
    signed_delta,
    shortest_path,
)

DATASET_SCHEMA = "asknav.dataset"
DATASET_VERSION = 1

SUPERVISION_MODES = ("navigator", "oracle", "mixed")


@dataclass(frozen=True)
class DialogHistory:
    """Initial hint plus the question/answer exchanges so far."""

    hint: tuple  # T_O tokens
    exchanges: tuple = ()  # ((q_tokens, a_tokens), ...)

    def with_exchange(self, question, answer):
        return DialogHistory(self.hint, self.exchanges + ((tuple(question), tuple(answer)),))


@dataclass(frozen=True)
class DialogEpisode:
    """One full navigator/guide episode on a world.

    segments[t] lists the nodes visited in navigation segment t, including
    its starting node, so segments[t][0] == segments[t-1][-1] and
    segments[0][0] is the spawn node. questions[t]/answers[t] hold the
    exchange that precedes segments[t + 1].
    """

    world_id: str
    hint: tuple
    start: int
    goal_region: str
    target_object: str
    segments: tuple  # m + 1 node tuples
    questions: tuple  # m token tuples
    answers: tuple  # m token tuples

    @property
    def num_exchanges(self):
        return len(self.questions)

    def history_at(self, t):
        return DialogHistory(
            self.hint,
            tuple(
                (self.questions[i], self.answers[i]) for i in range(t)
            ),
        )

    def validate(self, world):
        if self.segments[0][0] != self.start:
            raise DataError("first segment does not start at the spawn node")
        for prev, cur in zip(self.segments, self.segments[1:]):
            if cur[0] != prev[-1]:
                raise DataError("segments are not chained")
        for seg in self.segments:
            if not is_edge_connected(world, seg):
                raise DataError("segment is not path-connected in the world")
        if world.region_of[self.segments[-1][-1]] != self.goal_region:
            raise DataError("episode does not terminate in the goal region")


@dataclass(frozen=True)
class NavInstance:
    """A static navigation task: dialog history in, supervision path out."""

    world_id: str
    history: DialogHistory
    start: int
    path: tuple  # supervision path, starting at `start`
    mode: str  # navigator | oracle | mixed | instruction
    goal_region: str


@dataclass(frozen=True)
class AskExample:
    """One unrolled time-step with a binary ask(1)/navigate(0) label."""

    world_id: str
    history: DialogHistory
    prefix: tuple  # trajectory nodes so far, including the spawn node
    steps_since_ask: int
    label: int
    episode_key: str  # groups examples from one episode for splitting


@dataclass(frozen=True)
class GenConfig:
    detour_prob: float = 0.2
    question_period: tuple = (3, 6)  # inclusive uniform range, steps
    lookahead: int = 5  # guide looks this many oracle steps ahead
    min_start_steps: int = 4  # spawn at least this many hops from the goal
    max_steps: int = 60  # safety cap before forcing the oracle route

    def validate(self):
        if self.lookahead < 1:
            raise ConfigError("guide lookahead must be >= 1")
        if not (1 <= self.question_period[0] <= self.question_period[1]):
            raise ConfigError("question period range must satisfy 1 <= lo <= hi")
        if not (0.0 <= self.detour_prob <= 1.0):
            raise ConfigError("detour_prob must be a probability")
        if self.min_start_steps < 1:
            raise ConfigError("min_start_steps must be >= 1")


# ---------------------------------------------------------------------------
# Templated text


def hint_tokens(target_object, goal_region):
    return ("find", "the", target_object, "in", "the", goal_region)


def hint_target(hint):
    """Target object named by a hint produced with hint_tokens."""
    toks = list(hint)
    return toks[2] if len(toks) > 2 else "goal"


def direction_word(heading, target_heading):
    d = signed_delta(target_heading, heading)
    if abs(d) <= math.pi / 4:
        return "forward"
    if abs(d) >= 3 * math.pi / 4:
        return "behind"
    return "right" if d > 0 else "left"


def salient_object(world, node):
    """Deterministic per-node landmark: smallest tag id visible there."""
    tag = min(min(world.view_objects[(node, v)]) for v in range(36))
    return world.object_vocab[tag]


def guide_answer(world, state, goal_region, lookahead=5):
    """Deterministic answer describing the next `lookahead` oracle steps.

    Names the direction of the first step relative to the agent's heading
    and the salient object at each step node; ends with a stop directive
    when the lookahead reaches the goal region.
    """
    if lookahead < 1:
        raise ConfigError("guide lookahead must be >= 1")
    if world.region_of[state.node] == goal_region:
        return ("stop", "here", "you", "reached", "the", "goal")
    path = oracle_path_to_region(world, state.node, goal_region)
    steps = path[1 : 1 + lookahead]
    first_heading, _ = bearing(world, state.node, steps[0])
    tokens = ["go", direction_word(state.heading, first_heading)]
    seen = set()
    landmarks = []
    for node in steps:
        obj = salient_object(world, node)
        if obj not in seen:
            seen.add(obj)
            landmarks.append(obj)
    if landmarks:
        tokens += ["past"]
        for obj in landmarks:
            tokens += ["the", obj]
    if len(path) - 1 <= lookahead:
        tokens += ["then", "stop"]
    return tuple(tokens)


def question_tokens(history, visible_tags=()):
    """Templated navigator question: the hint's target plus recent sights."""
    tokens = ["where", "is", "the", hint_target(history.hint)]
    if visible_tags:
        tokens += ["i", "see", "the", visible_tags[0]]
    return tuple(tokens)


# ---------------------------------------------------------------------------
# Episode simulation


def simulate_dialog_episode(world, seed, cfg=None):
    """Synthesize one dialog episode with a noisy scripted navigator.

    The navigator follows the oracle next hop toward the goal region but
    detours to a random other neighbor with probability cfg.detour_prob;
    questions fire at uniformly drawn step intervals; the guide answers
    from the shortest path at the exchange point. Deterministic per seed.
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, int(seed), 0xD1A7]))

    goal = world.goal_region
    non_goal = [n for n in world.node_ids() if world.region_of[n] != goal]
    if not non_goal:
        raise DataError("world has no start candidates outside the goal region")
    hops = {n: len(oracle_path_to_region(world, n, goal)) - 1 for n in non_goal}
    want = min(cfg.min_start_steps, max(hops.values()))
    candidates = [n for n in non_goal if hops[n] >= want]
    start = int(candidates[int(rng.integers(len(candidates)))])
    target_object = salient_object(world, world.regions[goal][0])
    hint = hint_tokens(target_object, goal)

    segments = []
    questions = []
    answers = []
    current_segment = [start]
    node = start
    heading = 0.0
    steps = 0
    next_ask_in = int(rng.integers(cfg.question_period[0], cfg.question_period[1] + 1))
    since_ask = 0
    forced = False

    while world.region_of[node] != goal:
        if since_ask == next_ask_in and not forced:
            state = AgentState(node=node, heading=heading)
            history = DialogHistory(hint, tuple(zip(map(tuple, questions), map(tuple, answers))))
            tags = [salient_object(world, node)]
            q = question_tokens(history, visible_tags=tags)
            a = guide_answer(world, state, goal, lookahead=cfg.lookahead)
            questions.append(q)
            answers.append(a)
            segments.append(tuple(current_segment))
            current_segment = [node]
            since_ask = 0
            next_ask_in = int(rng.integers(cfg.question_period[0], cfg.question_period[1] + 1))

        oracle_next = oracle_path_to_region(world, node, goal)[1]
        neighbors = world.neighbors[node]
        nxt = oracle_next
        if not forced and len(neighbors) > 1 and rng.random() < cfg.detour_prob:
            others = [n for n in neighbors if n != oracle_next]
            nxt = int(others[int(rng.integers(len(others)))])
        heading, _ = bearing(world, node, nxt)
        node = nxt
        current_segment.append(node)
        steps += 1
        since_ask += 1
        if steps >= cfg.max_steps:
            forced = True  # stop detouring and asking; run the oracle home

    segments.append(tuple(current_segment))
    episode = DialogEpisode(
        world_id=world.world_id,
        hint=hint,
        start=start,
        goal_region=goal,
        target_object=target_object,
        segments=tuple(segments),
        questions=tuple(tuple(q) for q in questions),
        answers=tuple(tuple(a) for a in answers),
    )
    episode.validate(world)
    return episode


# ---------------------------------------------------------------------------
# Supervision extraction


def oracle_segment(world, start, goal_region, lookahead):
    """First `lookahead` steps of the shortest path into the goal region."""
    path = oracle_path_to_region(world, start, goal_region)
    return tuple(path[: lookahead + 1])


def extract_nav_instances(world, episode, mode, lookahead=5):
    """One NavInstance per exchange index t in [0, m].

    navigator mode supervises with the human segment N_t; oracle mode with
    the planner steps O_t from the exchange point; mixed returns N_t
    exactly when the terminal node of O_t appears in N_t, else O_t.
    """
    if mode not in SUPERVISION_MODES:
        raise ConfigError(f"unknown supervision mode {mode!r}")
    instances = []
    for t, segment in enumerate(episode.segments):
        start = segment[0]
        o_t = oracle_segment(world, start, episode.goal_region, lookahead)
        if mode == "navigator":
            path = segment
        elif mode == "oracle":
            path = o_t
        else:
            path = segment if o_t[-1] in segment else o_t
        instances.append(
            NavInstance(
                world_id=episode.world_id,
                history=episode.history_at(t),
                start=start,
                path=tuple(path),
                mode=mode,
                goal_region=episode.goal_region,
            )
        )
    return instances


def episode_key_for(episode):
    """Stable unique key for grouping an episode's unrolled examples."""
    digest = hashlib.md5(
        repr((episode.segments, episode.questions)).encode()
    ).hexdigest()[:12]
    return f"{episode.world_id}/{episode.start}/{digest}"


def extract_ask_labels(episode, key=None):
    """Unroll an episode into per-time-step ask(1)/navigate(0) examples.

    Each navigation step and each exchange is one time-step, in episode
    order; positives land exactly on the exchanges, so an episode with m
    exchanges yields m positive labels.
    """
    examples = []
    prefix = [episode.segments[0][0]]
    steps_since_ask = 0
    key = key or episode_key_for(episode)
    for t, segment in enumerate(episode.segments):
        history = episode.history_at(t)
        if t > 0:
            examples.append(
                AskExample(
                    world_id=episode.world_id,
                    history=episode.history_at(t - 1),
                    prefix=tuple(prefix),
                    steps_since_ask=steps_since_ask,
                    label=1,
                    episode_key=key,
                )
            )
            steps_since_ask = 0
        for node in segment[1:]:
            examples.append(
                AskExample(
                    world_id=episode.world_id,
                    history=history,
                    prefix=tuple(prefix),
                    steps_since_ask=steps_since_ask,
                    label=0,
                    episode_key=key,
                )
            )
            prefix.append(node)
            steps_since_ask += 1
    return examples


def generate_instruction_instances(world, seed, count, path_steps=(2, 5), lookahead=None):
    """Instruction-only instances with oracle supervision paths.

    The templated instruction sits in the hint slot and there are no
    question/answer turns, so these mix directly with dialog instances.
    path_steps bounds the supervision path length; a long range emulates
    long-trajectory instruction datasets, a short range classic ones.
    """
    lo, hi = path_steps
    if lo < 1 or hi < lo:
        raise ConfigError("path_steps range must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, int(seed), 0x1257]))
    instances = []
    attempts = 0
    while len(instances) < count and attempts < 50 * count:
        attempts += 1
        start = int(rng.integers(world.num_nodes))
        steps = int(rng.integers(lo, hi + 1))
        path = [start]
        node = start
        for _ in range(steps):
            options = [n for n in world.neighbors[node] if n not in path]
            if not options:
                break
            node = int(options[int(rng.integers(len(options)))])
            path.append(node)
        if len(path) < lo + 1:
            continue
        goal = path[-1]
        supervision = shortest_path(world, start, goal)
        obj = salient_object(world, goal)
        instruction = (
            "walk", "to", "the", obj, "in", "the", world.region_of[goal],
        )
        instances.append(
            NavInstance(
                world_id=world.world_id,
                history=DialogHistory(hint=instruction),
                start=start,
                path=tuple(supervision),
                mode="instruction",
                goal_region=world.region_of[goal],
            )
        )
    if len(instances) < count:
        raise DataError("could not sample enough instruction paths; widen path_steps")
    return instances


# ---------------------------------------------------------------------------
# Serialization: line-delimited records, header line carries the schema.


def _history_to_json(history):
    return {
        "hint": " ".join(history.hint),
        "exchanges": [[" ".join(q), " ".join(a)] for q, a in history.exchanges],
    }


def _history_from_json(obj):
    return DialogHistory(
        hint=tuple(obj["hint"].split()),
        exchanges=tuple(
            (tuple(q.split()), tuple(a.split())) for q, a in obj["exchanges"]
        ),
    )


def _record_to_json(item):
    if isinstance(item, DialogEpisode):
        return {
            "kind": "episode",
            "world_id": item.world_id,
            "hint": " ".join(item.hint),
            "start": item.start,
            "goal_region": item.goal_region,
            "target_object": item.target_object,
            "segments": [list(s) for s in item.segments],
            "questions": [" ".join(q) for q in item.questions],
            "answers": [" ".join(a) for a in item.answers],
        }
    if isinstance(item, NavInstance):
        return {
            "kind": "nav",
            "world_id": item.world_id,
            "history": _history_to_json(item.history),
            "start": item.start,
            "path": list(item.path),
            "mode": item.mode,
            "goal_region": item.goal_region,
        }
    if isinstance(item, AskExample):
        return {
            "kind": "ask",
            "world_id": item.world_id,
            "history": _history_to_json(item.history),
            "prefix": list(item.prefix),
            "steps_since_ask": item.steps_since_ask,
            "label": item.label,
            "episode_key": item.episode_key,
        }
    raise DataError(f"cannot serialize {type(item).__name__}")


def _record_from_json(obj):
    kind = obj.get("kind")
    if kind == "episode":
        return DialogEpisode(
            world_id=obj["world_id"],
            hint=tuple(obj["hint"].split()),
            start=obj["start"],
            goal_region=obj["goal_region"],
            target_object=obj["target_object"],
            segments=tuple(tuple(s) for s in obj["segments"]),
            questions=tuple(tuple(q.split()) for q in obj["questions"]),
            answers=tuple(tuple(a.split()) for a in obj["answers"]),
        )
    if kind == "nav":
        return NavInstance(
            world_id=obj["world_id"],
            history=_history_from_json(obj["history"]),
            start=obj["start"],
            path=tuple(obj["path"]),
            mode=obj["mode"],
            goal_region=obj["goal_region"],
        )
    if kind == "ask":
        return AskExample(
            world_id=obj["world_id"],
            history=_history_from_json(obj["history"]),
            prefix=tuple(obj["prefix"]),
            steps_since_ask=obj["steps_since_ask"],
            label=obj["label"],
            episode_key=obj["episode_key"],
        )
    raise DataError(f"unknown record kind {kind!r}")


def save_dataset(items, path, meta=None):
    """Write one JSON record per line behind a versioned header line."""
    header = {"schema": DATASET_SCHEMA, "version": DATASET_VERSION}
    header.update(meta or {})
    with open(path, "w") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
        for item in items:
            json.dump(_record_to_json(item), f, sort_keys=True)
            f.write("\n")


def load_dataset(path):
    """Parse a dataset file; malformed lines raise DataError with the line number."""
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record ({e.msg})") from e
            if lineno == 1:
                if obj.get("schema") != DATASET_SCHEMA:
                    raise DataError(f"{path}:1: not a dataset file")
                if obj.get("version") != DATASET_VERSION:
                    raise DataError(f"{path}:1: unsupported version {obj.get('version')}")
                continue
            try:
                items.append(_record_from_json(obj))
            except (KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed record ({e})") from e
    return items
