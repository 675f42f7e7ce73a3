"""Run configuration: one nested dataclass tree, JSON files, dotted overrides.

A run is fully determined by (RunConfig, seed). Reports embed the resolved
config and its hash so any artifact can be traced back to the exact settings
that produced it.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

from .agent import AgentConfig
from .dialog import GenConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .pretrain import CurriculumFlags, PretrainConfig
from .world import WorldConfig

ACTION_SPACES = ("viewpoint", "turn-based")
SUPERVISION_MODES = ("navigator", "oracle", "mixed")
DECODING_MODES = ("greedy", "sample")


@dataclass(frozen=True)
class DataConfig:
    """How much dialog data to synthesize per world."""

    episodes_per_world: int = 12
    val_episodes_per_world: int = 4
    vln_paths_per_world: int = 8
    captions_per_world: int = 60
    gen: GenConfig = field(default_factory=GenConfig)

    def validate(self):
        if self.episodes_per_world < 1 or self.val_episodes_per_world < 1:
            raise ConfigError("episode counts per world must be >= 1")
        if self.vln_paths_per_world < 0 or self.captions_per_world < 0:
            raise ConfigError("auxiliary corpus sizes must be >= 0")
        self.gen.validate()


@dataclass(frozen=True)
class PretrainSection:
    flags: CurriculumFlags = field(default_factory=CurriculumFlags)
    train: PretrainConfig = field(default_factory=PretrainConfig)

    def validate(self):
        self.train.validate()


@dataclass(frozen=True)
class FinetuneSection:
    space: str = "viewpoint"
    supervision: str = "mixed"
    use_pretrained: bool = True
    train: AgentConfig = field(default_factory=AgentConfig)

    def validate(self):
        if self.space not in ACTION_SPACES:
            raise ConfigError(f"action space must be one of {ACTION_SPACES}, got {self.space!r}")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(
                f"supervision must be one of {SUPERVISION_MODES}, got {self.supervision!r}"
            )
        self.train.validate()


@dataclass(frozen=True)
class EvalSection:
    success_radius: float = 3.0
    dtw_threshold: float = 3.0
    decoding: str = "greedy"

    def validate(self):
        if self.success_radius <= 0 or self.dtw_threshold <= 0:
            raise ConfigError("metric thresholds must be positive")
        if self.decoding not in DECODING_MODES:
            raise ConfigError(f"decoding must be one of {DECODING_MODES}, got {self.decoding!r}")


@dataclass(frozen=True)
class GameplaySection:
    mode: str = "heuristic4"
    episodes: int = 10
    max_turns: int = 20
    lookahead: int = 5
    segment_cap: int = 10

    def validate(self):
        from .gameplay import GAME_MODES

        if self.mode not in GAME_MODES:
            raise ConfigError(f"gameplay mode must be one of {GAME_MODES}, got {self.mode!r}")
        if self.episodes < 1 or self.max_turns < 1 or self.segment_cap < 1:
            raise ConfigError("gameplay counts must be >= 1")
        if self.lookahead < 1:
            raise ConfigError("guide lookahead must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides the seed on the command line."""

    seed: int = 0
    train_seeds: tuple = (0, 1)
    unseen_seeds: tuple = (100, 101)
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    gameplay: GameplaySection = field(default_factory=GameplaySection)

    def validate(self):
        if not self.train_seeds or not self.unseen_seeds:
            raise ConfigError("both world-seed pools must be non-empty")
        overlap = set(self.train_seeds) & set(self.unseen_seeds)
        if overlap:
            raise ConfigError(f"train and unseen world seeds overlap: {sorted(overlap)}")
        if len(set(self.train_seeds)) != len(self.train_seeds):
            raise ConfigError("train_seeds contains duplicates")
        if len(set(self.unseen_seeds)) != len(self.unseen_seeds):
            raise ConfigError("unseen_seeds contains duplicates")
        self.world.validate()
        self.data.validate()
        self.encoder.validate()
        self.pretrain.validate()
        self.finetune.validate()
        self.eval.validate()
        self.gameplay.validate()
        if self.encoder.feature_dim != self.world.feature_dim:
            raise ConfigError(
                "encoder.feature_dim must match world.feature_dim "
                f"({self.encoder.feature_dim} vs {self.world.feature_dim})"
            )


# ---------------------------------------------------------------------------
# dict <-> dataclass plumbing


def to_dict(cfg):
    """Recursively convert a config dataclass to plain JSON-ready types."""
    if is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in fields(cfg)}
    if isinstance(cfg, (tuple, list)):
        return [to_dict(v) for v in cfg]
    return cfg


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or 'top level'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key {path}{sorted(unknown)[0]!r}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        if isinstance(f.type, type) and is_dataclass(f.type):
            kwargs[name] = _build(f.type, value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config section {path or 'top level'}: {e}") from e


def from_dict(data):
    return _build(RunConfig, data, "")


def load_config(path):
    """Read a JSON config file; absent keys keep their defaults."""
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e.msg}, line {e.lineno})")
    return from_dict(data)


def save_config(cfg, path):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings like viewpoint don't need quoting


def apply_overrides(cfg, overrides):
    """Apply dotted key=value strings, e.g. finetune.space=turn-based."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = _parse_value(raw)
    return from_dict(data)


def config_hash(cfg):
    """Stable short hash of the resolved config, embedded in every report."""
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
