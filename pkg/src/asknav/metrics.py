"""Navigation and classification metrics, computed exactly.

All distances are graph shortest-path lengths in meters except inside DTW,
which compares node positions Euclideanly per the metric's definition.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .world import distance_to_region, path_distance, path_length_meters

SUCCESS_RADIUS = 3.0
DTW_THRESHOLD = 3.0


@dataclass(frozen=True)
class EvalEpisode:
    """One scored episode with every distance it needs precomputed."""

    executed: tuple  # node sequence actually walked
    reference: tuple  # supervision / reference node sequence
    goal: object  # node id or region name
    start_goal_dist: float  # meters, along graph shortest paths
    end_goal_dist: float
    shortest_len: float  # meters, start -> goal
    executed_len: float  # meters walked
    executed_pos: np.ndarray  # [len(executed), 3] node positions
    reference_pos: np.ndarray  # [len(reference), 3]


def _goal_distance(world, node, goal):
    if isinstance(goal, str):
        return distance_to_region(world, node, goal)
    return path_distance(world, node, int(goal))


def make_eval_episode(world, executed, reference, goal):
    """Bundle an executed/reference pair with precomputed distances."""
    executed = tuple(executed)
    reference = tuple(reference)
    if not executed or not reference:
        raise DataError("executed and reference paths must be nonempty")
    return EvalEpisode(
        executed=executed,
        reference=reference,
        goal=goal,
        start_goal_dist=_goal_distance(world, executed[0], goal),
        end_goal_dist=_goal_distance(world, executed[-1], goal),
        shortest_len=_goal_distance(world, executed[0], goal),
        executed_len=path_length_meters(world, executed),
        executed_pos=world.positions[list(executed)].copy(),
        reference_pos=world.positions[list(reference)].copy(),
    )


def goal_progress(ep):
    """Meters of shortest-path distance to the goal covered by the episode."""
    return ep.start_goal_dist - ep.end_goal_dist


def success(ep, radius=SUCCESS_RADIUS):
    """True when the agent ends within `radius` meters of the goal, inclusive."""
    return ep.end_goal_dist <= radius


def spl(episodes, radius=SUCCESS_RADIUS):
    """Mean success weighted by shortest/executed path length.

    Episodes whose shortest length is zero (the agent spawned at the goal)
    carry no signal for this metric and are excluded with a warning.
    """
    vals = []
    skipped = 0
    for ep in episodes:
        if ep.shortest_len <= 0.0:
            skipped += 1
            continue
        s = 1.0 if success(ep, radius) else 0.0
        vals.append(s * ep.shortest_len / max(ep.executed_len, ep.shortest_len))
    if skipped:
        warnings.warn(
            f"excluded {skipped} episode(s) with zero shortest-path length from SPL"
        )
    if not vals:
        raise DataError("no SPL-scorable episodes")
    return float(np.mean(vals))


def dtw_distance(executed_pos, reference_pos):
    """Classic dynamic-time-warping cost under Euclidean point distances."""
    n, m = len(executed_pos), len(reference_pos)
    if n == 0 or m == 0:
        raise DataError("DTW needs nonempty paths")
    d = np.linalg.norm(
        executed_pos[:, None, :] - reference_pos[None, :, :], axis=-1
    )
    acc = np.full((n, m), np.inf)
    acc[0, 0] = d[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = d[i, j] + best
    return float(acc[n - 1, m - 1])


def ndtw(ep, threshold=DTW_THRESHOLD):
    """exp(-DTW / (|reference| * threshold)), in (0, 1]."""
    cost = dtw_distance(ep.executed_pos, ep.reference_pos)
    return math.exp(-cost / (len(ep.reference) * threshold))


def classification_report(preds, labels):
    """accuracy and balanced accuracy (mean per-class recall) for binary
    labels; balanced accuracy is None when only one class is present."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.ndim != 1 or len(preds) == 0:
        raise DataError("predictions and labels must be equal-length 1-d arrays")
    accuracy = float((preds == labels).mean())
    recalls = []
    for cls in (0, 1):
        sel = labels == cls
        if not sel.any():
            return {"accuracy": accuracy, "balanced_accuracy": None}
        recalls.append(float((preds[sel] == cls).mean()))
    return {"accuracy": accuracy, "balanced_accuracy": float(np.mean(recalls))}


def evaluate_episodes(episodes, radius=SUCCESS_RADIUS, threshold=DTW_THRESHOLD):
    """Aggregate block: mean GP, SR, SPL, mean nDTW over an episode list."""
    if not episodes:
        raise DataError("no episodes to evaluate")
    return {
        "episodes": len(episodes),
        "goal_progress": float(np.mean([goal_progress(e) for e in episodes])),
        "success_rate": float(np.mean([success(e, radius) for e in episodes])),
        "spl": spl(episodes, radius),
        "ndtw": float(np.mean([ndtw(e, threshold) for e in episodes])),
    }
