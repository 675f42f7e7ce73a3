"""Procedural navigation-graph environments.

A World is a connected, undirected graph embedded in 3D. Nodes play the role
of panorama viewpoints; each node exposes 36 views (12 headings x 3 elevation
rows at -30/0/+30 degrees) populated with synthetic detection regions. Worlds
are deterministic functions of (seed, config) and immutable once built, so
they are safe to share across concurrent readers.

Heading convention: 0 points along +y and angles grow clockwise (east = +x is
pi/2), matching the usual panorama-simulator layout. Elevation is positive
upward. View index = elevation_row * 12 + heading_column.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError, InvalidActionError

NUM_VIEWS = 36
HEADING_STEP = math.pi / 6  # 30 degrees
FORWARD_CONE = math.pi / 4  # 45 degrees

GEOMETRY_DIM = 6

# Canonical name pools shared by every world so that vocabulary (and hence
# trained checkpoints) transfer across seeds; only the assignment of names
# to nodes/views varies with the seed.
OBJECT_NAMES = [
    "chair", "lamp", "sofa", "table", "plant", "mirror", "shelf", "vase",
    "rug", "clock", "piano", "desk", "stool", "bench", "cabinet", "painting",
    "curtain", "pillow", "blanket", "basket", "bottle", "bowl", "box",
    "candle", "crate", "cup", "drawer", "easel", "fan", "fireplace",
    "fountain", "frame", "globe", "guitar", "hammock", "heater", "jar",
    "kettle", "ladder", "lantern", "locker", "mat", "mug", "organ", "oven",
    "phone", "pot", "printer", "radio", "safe", "screen", "sign", "sink",
    "speaker", "statue", "stove", "suitcase", "telescope", "toaster",
    "trunk", "tv", "umbrella", "urn", "wardrobe",
]
REGION_NAMES = [
    "atrium", "attic", "balcony", "bedroom", "cellar", "closet", "corridor",
    "den", "foyer", "garage", "hall", "kitchen", "lab", "library", "lobby",
    "lounge", "nook", "office", "pantry", "parlor", "patio", "porch",
    "salon", "storeroom", "studio", "study", "suite", "terrace", "vault",
    "workshop",
]

WORLD_SCHEMA = "asknav.world"
WORLD_VERSION = 1


def wrap_angle(a):
    """Wrap an angle to [0, 2*pi)."""
    return a % (2.0 * math.pi)


def signed_delta(a, b):
    """Shortest signed difference a - b, in (-pi, pi]."""
    d = (a - b) % (2.0 * math.pi)
    if d > math.pi:
        d -= 2.0 * math.pi
    return d


def view_pose(view_index):
    """(heading, elevation) at the center of a view bin."""
    col = view_index % 12
    row = view_index // 12
    return wrap_angle(col * HEADING_STEP), (row - 1) * HEADING_STEP


def view_bin(heading, elevation):
    """Index of the 36-view bin containing a direction."""
    col = int(((heading + HEADING_STEP / 2) % (2.0 * math.pi)) // HEADING_STEP) % 12
    if elevation < -HEADING_STEP / 2:
        row = 0
    elif elevation > HEADING_STEP / 2:
        row = 2
    else:
        row = 1
    return row * 12 + col


@dataclass(frozen=True)
class WorldConfig:
    nodes: int = 48
    regions: int = 4
    objects: int = 24
    max_edge_len: float = 5.0
    box: tuple = (18.0, 18.0, 3.0)
    connect_radius: float = 4.0
    min_regions_per_view: int = 1
    max_regions_per_view: int = 3
    feature_dim: int = 64

    def validate(self):
        if self.nodes < 4:
            raise ConfigError(f"world needs at least 4 nodes, got {self.nodes}")
        if self.objects < 2:
            raise ConfigError(f"object vocab needs at least 2 entries, got {self.objects}")
        if self.regions < 2:
            raise ConfigError(f"world needs at least 2 regions, got {self.regions}")
        if not (1 <= self.min_regions_per_view <= self.max_regions_per_view <= 4):
            raise ConfigError("regions per view must satisfy 1 <= min <= max <= 4")
        if self.max_edge_len <= 0:
            raise ConfigError("max_edge_len must be positive")


@dataclass(frozen=True)
class World:
    """Immutable navigation graph with synthetic per-view object detections."""

    world_id: str
    seed: int
    config: WorldConfig
    positions: np.ndarray  # [n, 3] float64, meters
    edges: tuple  # sorted tuple of (u, v) with u < v
    neighbors: tuple  # neighbors[u] = sorted tuple of adjacent node ids
    regions: dict  # region name -> tuple of node ids
    region_of: tuple  # region_of[u] = region name
    goal_region: str
    object_vocab: tuple  # object-class names; tag ids index into this
    view_objects: dict  # (node, view) -> tuple of tag ids
    feature_seed: int
    _obs_cache: dict = field(default_factory=dict, compare=False, repr=False)
    _path_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def num_nodes(self):
        return self.positions.shape[0]

    def node_ids(self):
        return range(self.num_nodes)

    def edge_length(self, u, v):
        return float(np.linalg.norm(self.positions[u] - self.positions[v]))

    def goal_nodes(self):
        return self.regions[self.goal_region]


class TurnAction(Enum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    UP = 3
    DOWN = 4
    STOP = 5


# A viewpoint choice is either this sentinel or a neighbor node id.
STOP_CHOICE = "stop"


@dataclass(frozen=True)
class AgentState:
    node: int
    heading: float = 0.0  # radians in [0, 2*pi)
    elevation: float = 0.0  # radians in [-pi/2, pi/2]


@dataclass(frozen=True)
class Region:
    feature: np.ndarray  # [P]
    geometry: np.ndarray  # [6]: top-right xy, bottom-left xy, height, width
    tag: int
    tag_name: str


@dataclass(frozen=True)
class View:
    index: int
    pose: tuple  # (heading, elevation) of the view center
    regions: tuple  # Region detections, 1..4 per view


@dataclass(frozen=True)
class PanoramicObservation:
    node: int
    views: tuple  # exactly NUM_VIEWS entries

    def all_regions(self):
        for view in self.views:
            for region in view.regions:
                yield view, region

    def tags(self):
        return [r.tag for _, r in self.all_regions()]

    def view_pooled_features(self):
        """[36, P] mean region feature per view."""
        return np.stack([
            np.mean([r.feature for r in v.regions], axis=0) for v in self.views
        ])

    def pooled_feature(self):
        """[P] mean feature over every region in the panorama."""
        return np.mean([r.feature for _, r in self.all_regions()], axis=0)


def generate_world(seed, cfg=None, **overrides):
    """Build a connected world deterministically from (seed, cfg).

    Positions are sampled uniformly in a box; the edge set is the Euclidean
    minimum spanning tree (connectivity) plus every pair within
    connect_radius. If the longest edge exceeds max_edge_len, all positions
    are rescaled uniformly so it lands exactly on max_edge_len.
    """
    if cfg is None:
        cfg = WorldConfig(**overrides)
    elif overrides:
        raise ConfigError("pass either a WorldConfig or keyword overrides, not both")
    cfg.validate()

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    n = cfg.nodes
    box = np.asarray(cfg.box, dtype=np.float64)
    positions = rng.uniform(0.0, 1.0, size=(n, 3)) * box

    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    edges = set(_euclidean_mst(dist))
    iu, ju = np.triu_indices(n, k=1)
    for u, v in zip(iu, ju):
        if dist[u, v] <= cfg.connect_radius:
            edges.add((int(u), int(v)))
    edges = tuple(sorted(edges))

    longest = max(dist[u, v] for u, v in edges)
    if longest > cfg.max_edge_len:
        positions = positions * (cfg.max_edge_len / longest)

    neighbors = [[] for _ in range(n)]
    for u, v in edges:
        neighbors[u].append(v)
        neighbors[v].append(u)
    neighbors = tuple(tuple(sorted(ns)) for ns in neighbors)

    # Regions: Voronoi partition around randomly chosen anchor nodes.
    anchor_nodes = rng.choice(n, size=cfg.regions, replace=False)
    names = _region_names(cfg.regions, rng)
    assignment = np.argmin(
        np.linalg.norm(positions[:, None, :] - positions[anchor_nodes][None, :, :], axis=-1),
        axis=1,
    )
    # Voronoi cells can be empty if two anchors are close; reassign one node.
    for k in range(cfg.regions):
        if not np.any(assignment == k):
            donor = np.argmax(np.bincount(assignment, minlength=cfg.regions))
            assignment[np.where(assignment == donor)[0][0]] = k
    regions = {
        names[k]: tuple(int(i) for i in np.where(assignment == k)[0])
        for k in range(cfg.regions)
    }
    region_of = tuple(names[int(k)] for k in assignment)
    goal_region = names[int(rng.integers(cfg.regions))]

    object_vocab = tuple(_object_names(cfg.objects))
    view_objects = {}
    for node in range(n):
        for view in range(NUM_VIEWS):
            count = int(rng.integers(cfg.min_regions_per_view, cfg.max_regions_per_view + 1))
            tags = tuple(int(t) for t in rng.integers(0, cfg.objects, size=count))
            view_objects[(node, view)] = tags

    feature_seed = int(rng.integers(1, 2**31 - 1))
    return World(
        world_id=f"world-{seed}",
        seed=int(seed),
        config=cfg,
        positions=positions,
        edges=edges,
        neighbors=neighbors,
        regions=regions,
        region_of=region_of,
        goal_region=goal_region,
        object_vocab=object_vocab,
        view_objects=view_objects,
        feature_seed=feature_seed,
    )


def _euclidean_mst(dist):
    """Prim's algorithm on a dense distance matrix."""
    n = dist.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = dist[0].copy()
    best_from = np.zeros(n, dtype=int)
    edges = []
    for _ in range(n - 1):
        best_masked = np.where(in_tree, np.inf, best)
        v = int(np.argmin(best_masked))
        u = int(best_from[v])
        edges.append((min(u, v), max(u, v)))
        in_tree[v] = True
        closer = dist[v] < best
        best_from[closer] = v
        best = np.minimum(best, dist[v])
    return edges


def _region_names(count, rng):
    pool = list(REGION_NAMES)
    if count <= len(pool):
        picked = rng.choice(len(pool), size=count, replace=False)
        return [pool[int(i)] for i in picked]
    return pool + [f"room{i}" for i in range(count - len(pool))]


def _object_names(count):
    if count <= len(OBJECT_NAMES):
        return OBJECT_NAMES[:count]
    return OBJECT_NAMES + [f"object{i}" for i in range(count - len(OBJECT_NAMES))]


# ---------------------------------------------------------------------------
# Observations


def observe(world, state):
    """Panoramic observation at the agent's node.

    Features are a fixed pseudo-random function of (feature_seed, node,
    view, region slot, tag): a tag prototype plus location noise. The
    prototype depends only on the tag, so the same object class shares
    visual structure across places and across worlds; the noise is keyed
    by the world's feature_seed, so the same place always looks the same.
    """
    cached = world._obs_cache.get(state.node)
    if cached is not None:
        return cached

    P = world.config.feature_dim
    views = []
    for view in range(NUM_VIEWS):
        tags = world.view_objects[(state.node, view)]
        regions = []
        for slot, tag in enumerate(tags):
            proto_rng = np.random.default_rng(
                np.random.SeedSequence([0x0B1EC7, int(tag)])
            )
            local_rng = np.random.default_rng(
                np.random.SeedSequence(
                    [world.feature_seed, int(state.node), view, slot, int(tag)]
                )
            )
            feature = proto_rng.standard_normal(P) + 0.5 * local_rng.standard_normal(P)
            cx, cy = local_rng.uniform(0.2, 0.8, size=2)
            w, h = local_rng.uniform(0.1, 0.3, size=2)
            geometry = np.array(
                [cx + w / 2, cy + h / 2, cx - w / 2, cy - h / 2, h, w],
                dtype=np.float64,
            )
            regions.append(
                Region(
                    feature=feature,
                    geometry=geometry,
                    tag=int(tag),
                    tag_name=world.object_vocab[int(tag)],
                )
            )
        views.append(View(index=view, pose=view_pose(view), regions=tuple(regions)))

    obs = PanoramicObservation(node=state.node, views=tuple(views))
    world._obs_cache[state.node] = obs
    return obs


# ---------------------------------------------------------------------------
# Geometry and transitions


def bearing(world, u, v):
    """(heading, elevation) of the displacement u -> v."""
    d = world.positions[v] - world.positions[u]
    heading = wrap_angle(math.atan2(d[0], d[1]))
    elevation = math.atan2(d[2], math.hypot(d[0], d[1]))
    return heading, elevation


def next_node_direction(world, state, next_node):
    """Heading, elevation, and 36-view bin of a neighbor's direction."""
    if next_node not in world.neighbors[state.node]:
        raise InvalidActionError(
            f"node {next_node} is not adjacent to {state.node}"
        )
    heading, elevation = bearing(world, state.node, next_node)
    return heading, elevation, view_bin(heading, elevation)


def step_viewpoint(world, state, choice):
    """Relocate to an adjacent viewpoint; STOP leaves the state unchanged."""
    if choice == STOP_CHOICE:
        return state
    if choice not in world.neighbors[state.node]:
        raise InvalidActionError(
            f"viewpoint {choice} is not adjacent to {state.node}"
        )
    heading, _ = bearing(world, state.node, choice)
    return AgentState(node=int(choice), heading=heading, elevation=state.elevation)


def step_turn_based(world, state, action):
    """Low-level visuomotor transition.

    LEFT/RIGHT rotate heading by 30 degrees; UP/DOWN tilt by 30 degrees
    clamped to [-pi/2, pi/2]; FORWARD moves to the neighbor angularly
    closest to the heading if one lies within 45 degrees, else is a no-op
    (unchanged state signals blocked motion).
    """
    if action == TurnAction.STOP:
        raise InvalidActionError("STOP is handled by the episode loop, not step_turn_based")
    if action == TurnAction.LEFT:
        return AgentState(state.node, wrap_angle(state.heading - HEADING_STEP), state.elevation)
    if action == TurnAction.RIGHT:
        return AgentState(state.node, wrap_angle(state.heading + HEADING_STEP), state.elevation)
    if action == TurnAction.UP:
        return AgentState(state.node, state.heading,
                          min(state.elevation + HEADING_STEP, math.pi / 2))
    if action == TurnAction.DOWN:
        return AgentState(state.node, state.heading,
                          max(state.elevation - HEADING_STEP, -math.pi / 2))

    # FORWARD: nearest admissible neighbor, ties broken by smallest node id.
    best = None
    for nb in world.neighbors[state.node]:
        h, _ = bearing(world, state.node, nb)
        off = abs(signed_delta(h, state.heading))
        if off <= FORWARD_CONE and (best is None or off < best[0] - 1e-12):
            best = (off, nb)
    if best is None:
        return state
    return AgentState(node=best[1], heading=state.heading, elevation=state.elevation)


# ---------------------------------------------------------------------------
# Shortest paths


def shortest_path(world, src, dst):
    """Minimum-total-edge-length path from src to dst, both included.

    Among equal-length paths the lexicographically smallest node sequence
    wins, which in particular breaks single-node ties by smallest id.
    """
    paths = _lex_dijkstra(world, src)
    return list(paths[dst][1])


def path_distance(world, src, dst):
    """Length in meters of the shortest path src -> dst."""
    return _lex_dijkstra(world, src)[dst][0]


def distance_to_region(world, src, region):
    """Shortest-path distance from src to the nearest node of a region."""
    paths = _lex_dijkstra(world, src)
    return min(paths[g][0] for g in world.regions[region])


def oracle_path_to_region(world, src, region):
    """Shortest path from src into a region.

    Distance ties across candidate goal nodes resolve to the
    lexicographically smallest node sequence.
    """
    paths = _lex_dijkstra(world, src)
    best = min(paths[g] for g in world.regions[region])
    return list(best[1])


def _lex_dijkstra(world, src):
    """Single-source shortest paths carrying full path tuples.

    Heap entries are (distance, path). The first pop per node therefore has
    minimal distance, and among equal distances the lexicographically
    smallest path; the prefix property makes this globally consistent.
    """
    cached = world._path_cache.get(src)
    if cached is not None:
        return cached
    done = {}
    heap = [(0.0, (src,))]
    while heap:
        d, path = heapq.heappop(heap)
        node = path[-1]
        if node in done:
            continue
        done[node] = (d, path)
        for nb in world.neighbors[node]:
            if nb not in done:
                heapq.heappush(heap, (d + world.edge_length(node, nb), path + (nb,)))
    world._path_cache[src] = done
    return done


def path_length_meters(world, nodes):
    """Sum of consecutive-node Euclidean distances along a node list."""
    return float(sum(world.edge_length(u, v) for u, v in zip(nodes, nodes[1:])))


def is_edge_connected(world, nodes):
    return all(v in world.neighbors[u] for u, v in zip(nodes, nodes[1:]))


# ---------------------------------------------------------------------------
# Serialization


def save_world(world, path):
    """Write a self-contained, versioned world file (bit-exact round trip)."""
    payload = {
        "schema": WORLD_SCHEMA,
        "version": WORLD_VERSION,
        "world_id": world.world_id,
        "seed": world.seed,
        "config": {
            "nodes": world.config.nodes,
            "regions": world.config.regions,
            "objects": world.config.objects,
            "max_edge_len": world.config.max_edge_len,
            "box": list(world.config.box),
            "connect_radius": world.config.connect_radius,
            "min_regions_per_view": world.config.min_regions_per_view,
            "max_regions_per_view": world.config.max_regions_per_view,
            "feature_dim": world.config.feature_dim,
        },
        "positions": [[float(x) for x in row] for row in world.positions],
        "edges": [list(e) for e in world.edges],
        "regions": {name: list(nodes) for name, nodes in world.regions.items()},
        "goal_region": world.goal_region,
        "object_vocab": list(world.object_vocab),
        "view_objects": [
            [node, view, list(tags)]
            for (node, view), tags in sorted(world.view_objects.items())
        ],
        "feature_seed": world.feature_seed,
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_world(path):
    with open(path) as f:
        payload = json.load(f)
    if payload.get("schema") != WORLD_SCHEMA:
        raise DataError(f"{path}: not a world file")
    if payload.get("version") != WORLD_VERSION:
        raise DataError(f"{path}: unsupported world version {payload.get('version')}")
    cfg = WorldConfig(
        nodes=payload["config"]["nodes"],
        regions=payload["config"]["regions"],
        objects=payload["config"]["objects"],
        max_edge_len=payload["config"]["max_edge_len"],
        box=tuple(payload["config"]["box"]),
        connect_radius=payload["config"]["connect_radius"],
        min_regions_per_view=payload["config"]["min_regions_per_view"],
        max_regions_per_view=payload["config"]["max_regions_per_view"],
        feature_dim=payload["config"]["feature_dim"],
    )
    positions = np.array(payload["positions"], dtype=np.float64)
    edges = tuple(tuple(e) for e in payload["edges"])
    n = positions.shape[0]
    neighbors = [[] for _ in range(n)]
    for u, v in edges:
        neighbors[u].append(v)
        neighbors[v].append(u)
    regions = {name: tuple(nodes) for name, nodes in payload["regions"].items()}
    region_of = [None] * n
    for name, nodes in regions.items():
        for u in nodes:
            region_of[u] = name
    return World(
        world_id=payload["world_id"],
        seed=payload["seed"],
        config=cfg,
        positions=positions,
        edges=edges,
        neighbors=tuple(tuple(sorted(ns)) for ns in neighbors),
        regions=regions,
        region_of=tuple(region_of),
        goal_region=payload["goal_region"],
        object_vocab=tuple(payload["object_vocab"]),
        view_objects={
            (node, view): tuple(tags)
            for node, view, tags in payload["view_objects"]
        },
        feature_seed=payload["feature_seed"],
    )
