"""Dialog-guided navigation in synthetic graph worlds.

Pipeline: generate a world, synthesize navigator/guide dialogs, pre-train a
cross-modal encoder on captions and dialog-path pairs, imitation-train an
LSTM navigator that also decides when to ask, then evaluate or play full
games. `python -m asknav.cli --help` lists the commands.
"""

from .errors import ConfigError, DataError
from .world import WorldConfig, generate_world, load_world, save_world
from .dialog import (
    GenConfig,
    extract_ask_labels,
    extract_nav_instances,
    simulate_dialog_episode,
)
from .encoder import CrossModalEncoder, EncoderConfig
from .pretrain import CurriculumFlags, PretrainConfig, run_pretraining
from .agent import (
    AgentConfig,
    Navigator,
    load_navigator,
    rollout,
    save_navigator,
    train_imitation,
    train_question_head,
)
from .metrics import evaluate_episodes, goal_progress, make_eval_episode, ndtw, spl, success
from .gameplay import make_game_task, replay_metrics, run_episode
from .config import RunConfig, config_hash, load_config

__version__ = "0.1.0"
