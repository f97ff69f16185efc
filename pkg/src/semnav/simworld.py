"""Synthetic navigation graphs, templated instructions and navigation metrics.

A world is a connected planar graph whose nodes carry a panorama of views.
Every node owns a *signature* landmark category; the view of node ``u``
that faces neighbor ``v`` shows an object of ``v``'s signature, and the
synthetic view features carry an additive per-category signal for each
visible object. Instructions name the signature of each waypoint, so they
are groundable from the features alone.
"""
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .semparser import tokenize

WORLD_FORMAT = "semnav-world/1"
TASK_FORMAT = "semnav-task/1"

BLOCKLIST = ("wall", "ceiling", "floor")
NON_OBJECT = ("room",)
SIGNATURE_SEED = 20231
VIEW_FOV = math.radians(30)


def wrap_angle(a):
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def angle_feature(heading, elevation):
    return np.array([math.sin(heading), math.cos(heading), math.sin(elevation), math.cos(elevation)])


@dataclass
class ViewRecord:
    heading: float
    elevation: float
    feature: np.ndarray
    navigable: int
    token_type: int = 1

    @property
    def angle(self):
        return angle_feature(self.heading, self.elevation)


@dataclass
class ObjectRecord:
    geometry: tuple  # (center_x, center_y, area), each in [0, 1]
    angle: np.ndarray
    label: int
    navigable: int
    raw_area: float


@dataclass
class Observation:
    node: int
    heading: float
    views: list
    objects: list  # per view, list of ObjectRecord
    candidates: list  # (neighbor node, view index), sorted by node id


def view_layout(n_views):
    """Absolute (heading, elevation) per view.

    Multiples of 12 that are at least 36 use three elevation rings
    (-30, 0, +30 degrees); anything else is a single horizontal ring.
    """
    if n_views >= 36 and n_views % 12 == 0:
        per = n_views // 3
        elevs = (-math.pi / 6, 0.0, math.pi / 6)
    else:
        per, elevs = n_views, (0.0,)
    out = []
    for e in elevs:
        for j in range(per):
            out.append((wrap_angle(2 * math.pi * j / per), e))
    return out


def _signature(cat, d_v):
    v = np.random.default_rng([SIGNATURE_SEED, cat]).normal(size=d_v)
    return v * (3.0 / np.linalg.norm(v))


@dataclass
class World:
    seed: int
    coords: np.ndarray
    adjacency: dict  # node -> sorted neighbor list
    n_views: int
    d_v: int
    category_names: list
    signatures: list  # node -> category id
    objects: list  # node -> view -> list of ObjectRecord (absolute angles)
    features: np.ndarray = field(repr=False, default=None)
    _dist: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.layout = view_layout(self.n_views)
        self.horizontal = [i for i, (_, e) in enumerate(self.layout) if e == 0.0]
        if self.features is None:
            self.features = synth_features(self.seed, self.objects, self.n_views, self.d_v)

    @property
    def n_nodes(self):
        return len(self.coords)

    def neighbors(self, u):
        return self.adjacency[u]

    def edges(self):
        return [(u, v) for u in range(self.n_nodes) for v in self.adjacency[u] if u < v]

    def edge_length(self, u, v):
        return float(np.linalg.norm(self.coords[v] - self.coords[u]))

    def bearing(self, u, v):
        d = self.coords[v] - self.coords[u]
        return math.atan2(d[1], d[0])

    def candidate_view(self, u, v):
        """Horizontal view of ``u`` angularly closest to the bearing of ``v``."""
        b = self.bearing(u, v)
        return min(self.horizontal, key=lambda i: (abs(wrap_angle(self.layout[i][0] - b)), i))

    def distance(self, a, b):
        if self._dist is None:
            self._dist = np.array([dijkstra(self, s)[0] for s in range(self.n_nodes)])
        return float(self._dist[a, b])

    def observe(self, u, heading):
        """Panorama at ``u`` with angles relative to the agent ``heading``."""
        cands = sorted((v, self.candidate_view(u, v)) for v in self.adjacency[u])
        nav_views = {i for _, i in cands}
        views, objects = [], []
        for i, (h, e) in enumerate(self.layout):
            views.append(ViewRecord(wrap_angle(h - heading), e, self.features[u, i], int(i in nav_views)))
            rel = []
            for o in self.objects[u][i]:
                oh = math.atan2(o.angle[0], o.angle[1])
                oe = math.atan2(o.angle[2], o.angle[3])
                rel.append(ObjectRecord(o.geometry, angle_feature(wrap_angle(oh - heading), oe),
                                        o.label, o.navigable, o.raw_area))
            objects.append(rel)
        return Observation(u, heading, views, objects, cands)

    # -- serialization ------------------------------------------------------
    def to_json(self):
        return {
            "format": WORLD_FORMAT,
            "seed": self.seed,
            "n_views": self.n_views,
            "d_v": self.d_v,
            "category_names": list(self.category_names),
            "coords": self.coords.tolist(),
            "edges": [[u, v] for u, v in self.edges()],
            "signatures": list(self.signatures),
            "objects": [
                [[[list(o.geometry), o.angle.tolist(), o.label, o.navigable, o.raw_area] for o in view]
                 for view in node]
                for node in self.objects
            ],
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != WORLD_FORMAT:
            raise ContractViolation(f"expected {WORLD_FORMAT}, got {obj.get('format')!r}")
        n = len(obj["coords"])
        adj = {u: [] for u in range(n)}
        for u, v in obj["edges"]:
            adj[u].append(v)
            adj[v].append(u)
        objects = [
            [[ObjectRecord(tuple(g), np.array(a), lab, nav, area) for g, a, lab, nav, area in view]
             for view in node]
            for node in obj["objects"]
        ]
        return cls(obj["seed"], np.array(obj["coords"]), {u: sorted(vs) for u, vs in adj.items()},
                   obj["n_views"], obj["d_v"], list(obj["category_names"]),
                   list(obj["signatures"]), objects)


def synth_features(seed, objects, n_views, d_v):
    """Hash-seeded base noise per (node, view) plus category signatures."""
    feats = np.empty((len(objects), n_views, d_v))
    sigs = {}
    for u, node in enumerate(objects):
        for i, view in enumerate(node):
            f = 0.5 * np.random.default_rng([seed, u, i]).normal(size=d_v)
            for o in view:
                if o.label not in sigs:
                    sigs[o.label] = _signature(o.label, d_v)
                f = f + o.raw_area * sigs[o.label]
            feats[u, i] = f
    return feats


# ------------------------------------------------------------------ graph search

def dijkstra(world, src):
    """Distances from ``src`` and lexicographically smallest shortest paths."""
    n = world.n_nodes
    dist = np.full(n, np.inf)
    paths = [None] * n
    heap = [(0.0, (src,))]
    while heap:
        d, path = heapq.heappop(heap)
        u = path[-1]
        if paths[u] is not None:
            continue
        dist[u], paths[u] = d, list(path)
        for v in world.adjacency[u]:
            if paths[v] is None:
                heapq.heappush(heap, (d + world.edge_length(u, v), path + (v,)))
    return dist, paths


def shortest_path(world, a, b):
    """Minimum-length path from ``a`` to ``b``; equal lengths break to the
    lexicographically smaller node sequence."""
    if a == b:
        return [a], 0.0
    dist, paths = dijkstra(world, a)
    return paths[b], float(dist[b])


def path_length(world, path):
    return float(sum(world.edge_length(u, v) for u, v in zip(path, path[1:])))


# ------------------------------------------------------------------ generation

def _mst(coords):
    n = len(coords)
    d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    in_tree = [0]
    best = d[0].copy()
    parent = np.zeros(n, dtype=int)
    edges = []
    remaining = set(range(1, n))
    while remaining:
        v = min(remaining, key=lambda j: (best[j], j))
        edges.append((int(min(parent[v], v)), int(max(parent[v], v))))
        remaining.discard(v)
        in_tree.append(v)
        for j in remaining:
            if d[v, j] < best[j]:
                best[j], parent[j] = d[v, j], v
    return edges, d


def object_categories(category_names):
    return [i for i, n in enumerate(category_names) if n not in NON_OBJECT]


def landmark_categories(category_names, blocklist=BLOCKLIST):
    return [i for i, n in enumerate(category_names) if n not in NON_OBJECT and n not in blocklist]


def generate_world(seed, n_nodes, avg_degree, category_names, n_views=36, d_v=32):
    """Build a connected world deterministically from ``seed``."""
    if n_nodes < 2:
        raise ConfigurationError("n_nodes must be at least 2")
    lo, hi = 2 * (n_nodes - 1) / n_nodes, n_nodes - 1
    if not lo - 1e-9 <= avg_degree <= hi + 1e-9:
        raise ConfigurationError(
            f"avg_degree {avg_degree} infeasible for {n_nodes} nodes (need {lo:.3f}..{hi})"
        )
    rng = np.random.default_rng([seed, 0])
    layout = view_layout(n_views)
    horizontal = [i for i, (_, e) in enumerate(layout) if e == 0.0]
    if len(horizontal) < 4:
        raise ConfigurationError("need at least 4 horizontal views")

    side = math.sqrt(n_nodes) * 1.6
    for _attempt in range(1000):
        pts = []
        while len(pts) < n_nodes:
            p = rng.uniform(0, side, size=2)
            if all(np.linalg.norm(p - q) >= 0.6 for q in pts):
                pts.append(p)
        coords = np.array(pts)
        tree, dmat = _mst(coords)
        # slots[u] = set of horizontal views already facing a neighbor
        shell = World(seed, coords, {u: [] for u in range(n_nodes)}, n_views, d_v,
                      list(category_names), [0] * n_nodes, None, features=np.zeros(0))
        slots = {u: set() for u in range(n_nodes)}

        def try_add(u, v):
            su, sv = shell.candidate_view(u, v), shell.candidate_view(v, u)
            if su in slots[u] or sv in slots[v]:
                return False
            slots[u].add(su)
            slots[v].add(sv)
            shell.adjacency[u].append(v)
            shell.adjacency[v].append(u)
            return True

        if all(try_add(u, v) for u, v in tree):
            break
    else:  # pragma: no cover - geometric degeneracy only
        raise ConfigurationError("could not place a conflict-free spanning tree")

    target = int(round(avg_degree * n_nodes / 2))
    pairs = sorted((dmat[u, v], u, v) for u, v in itertools.combinations(range(n_nodes), 2)
                   if v not in shell.adjacency[u])
    n_edges = len(tree)
    for _, u, v in pairs:
        if n_edges >= target:
            break
        if try_add(u, v):
            n_edges += 1
    adjacency = {u: sorted(vs) for u, vs in shell.adjacency.items()}
    mean_edge = np.mean([np.linalg.norm(coords[u] - coords[v]) for u in adjacency for v in adjacency[u]])
    coords = coords / mean_edge

    lms = landmark_categories(category_names)
    objs = object_categories(category_names)
    structural = [c for c in objs if c not in lms]
    signatures = _assign_signatures(rng, adjacency, lms)

    shell = World(seed, coords, adjacency, n_views, d_v, list(category_names), signatures, None,
                  features=np.zeros(0))
    objects = []
    for u in range(n_nodes):
        per_view = [[] for _ in range(n_views)]

        def put(i, cat, area, nav):
            h, e = layout[i]
            cx, cy = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
            ang = angle_feature(wrap_angle(h + (cx - 0.5) * VIEW_FOV), e + (0.5 - cy) * VIEW_FOV)
            per_view[i].append(ObjectRecord((cx, cy, area), ang, cat, nav, area))

        for i in range(n_views):
            for cat in structural:
                if rng.random() < 0.7:
                    put(i, cat, float(rng.uniform(0.3, 0.6)), 0)
            for _ in range(int(rng.integers(0, 3))):
                put(i, int(rng.choice(lms)), float(rng.uniform(0.02, 0.12)), 0)
        for i in rng.choice(horizontal, size=2, replace=False):
            put(int(i), signatures[u], float(rng.uniform(0.2, 0.4)), 0)
        for v in adjacency[u]:
            put(shell.candidate_view(u, v), signatures[v], float(rng.uniform(0.15, 0.35)), 1)
        objects.append(per_view)
    return World(seed, coords, adjacency, n_views, d_v, list(category_names), signatures, objects)


def _assign_signatures(rng, adjacency, lms):
    """Distinct categories within distance two where the vocabulary allows."""
    sig = {}
    for u in sorted(adjacency):
        near = set(adjacency[u])
        for v in adjacency[u]:
            near.update(adjacency[v])
        taken = {sig[w] for w in near if w in sig}
        free = [c for c in lms if c not in taken]
        sig[u] = int(rng.choice(free if free else lms))
    return [sig[u] for u in sorted(adjacency)]


# ------------------------------------------------------------------ tasks

@dataclass
class Task:
    world_seed: int
    task_seed: int
    start: int
    goal: int
    start_heading: float
    instruction: str
    gold_path: list
    gold_length: float
    direction_spans: list  # (start, end, pattern id)
    landmark_spans: list  # (start, end, category id)
    goal_object: int = None

    def to_json(self):
        return {
            "format": TASK_FORMAT,
            "world_seed": self.world_seed,
            "task_seed": self.task_seed,
            "start": self.start,
            "goal": self.goal,
            "start_heading": self.start_heading,
            "instruction": self.instruction,
            "gold_path": list(self.gold_path),
            "gold_length": self.gold_length,
            "direction_spans": [list(s) for s in self.direction_spans],
            "landmark_spans": [list(s) for s in self.landmark_spans],
            "goal_object": self.goal_object,
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != TASK_FORMAT:
            raise ContractViolation(f"expected {TASK_FORMAT}, got {obj.get('format')!r}")
        return cls(obj["world_seed"], obj["task_seed"], obj["start"], obj["goal"], obj["start_heading"],
                   obj["instruction"], list(obj["gold_path"]), obj["gold_length"],
                   [tuple(s) for s in obj["direction_spans"]], [tuple(s) for s in obj["landmark_spans"]],
                   obj["goal_object"])


def turn_phrase(delta):
    """Direction phrase for a relative heading change in radians (left positive)."""
    deg = math.degrees(delta)
    if abs(deg) < 30:
        return "go straight"
    if abs(deg) > 150:
        return "turn around"
    return "turn left" if deg > 0 else "turn right"


_STRAIGHT = ("{turn} to the {lm}", "{turn} toward the {lm}")
_TURN = ("{turn} and walk to the {lm}", "{turn} and head to the {lm}", "{turn} , then walk toward the {lm}")
_FINISH = ("and stop", "and wait there")


def generate_task(world, seed, lexicon, min_hops=2, max_hops=4):
    """Sample a start/goal pair and a templated instruction for its gold path."""
    rng = np.random.default_rng([world.seed, seed, 1])
    n = world.n_nodes
    start = int(rng.integers(n))
    options = []
    for g in range(n):
        if g == start:
            continue
        path, _ = shortest_path(world, start, g)
        options.append((len(path) - 1, g))
    hops_ok = [g for h, g in options if min_hops <= h <= max_hops]
    goal = int(rng.choice(hops_ok if hops_ok else [g for _, g in options]))
    path, length = shortest_path(world, start, goal)
    heading = float(rng.uniform(-math.pi, math.pi))
    start_heading = heading

    tokens, dspans, lspans = [], [], []
    dir_index = {p: i for i, p in reversed(list(enumerate(lexicon.direction_patterns)))}

    def emit(words, role=None, ident=None):
        a = len(tokens)
        tokens.extend(words)
        if role == "d":
            dspans.append((a, len(tokens), ident))
        elif role == "l":
            lspans.append((a, len(tokens), ident))

    for k, (u, v) in enumerate(zip(path, path[1:])):
        b = world.bearing(u, v)
        turn = turn_phrase(wrap_angle(b - heading))
        heading = b
        cat = world.signatures[v]
        surface = str(rng.choice(lexicon.surfaces(cat)))
        template = str(rng.choice(_STRAIGHT if turn == "go straight" else _TURN))
        if k:
            emit([","] if rng.random() < 0.5 else [",", "then"])
        for part in template.split():
            if part == "{turn}":
                emit(turn.split(), "d", dir_index[turn])
            elif part == "{lm}":
                emit(surface.split(), "l", cat)
            else:
                emit([part])
    finish = str(rng.choice(_FINISH)).split()
    emit([finish[0]])
    emit([finish[1]], "d", dir_index[finish[1]])
    emit(finish[2:] + ["."])
    text = " ".join(tokens)
    text = text[0].upper() + text[1:]
    assert tokenize(text) == tokens
    return Task(world.seed, seed, start, goal, start_heading, text, path, length,
                dspans, lspans, world.signatures[goal])


# ------------------------------------------------------------------ metrics

@dataclass
class Episode:
    world_seed: int
    task_seed: int
    start: int
    goal: int
    trajectory: list  # every node passed through, start first
    traversed_length: float
    gold_length: float
    goal_distances: list  # graph distance to goal for each trajectory node
    goal_object: int = None
    predicted_object: int = None
    actions: list = field(default_factory=list)  # chosen node ids, "STOP" last if stopped
    steps: list = field(default_factory=list)  # per-step decision records

    def to_json(self):
        return {
            "world_seed": self.world_seed,
            "task_seed": self.task_seed,
            "start": self.start,
            "goal": self.goal,
            "trajectory": list(self.trajectory),
            "actions": list(self.actions),
            "traversed_length": self.traversed_length,
            "gold_length": self.gold_length,
            "goal_distances": list(self.goal_distances),
            "goal_object": self.goal_object,
            "predicted_object": self.predicted_object,
            "steps": self.steps,
        }


METRIC_NAMES = ("NE", "SR", "OSR", "SPL", "RGS", "RGSPL")


def episode_metrics(ep, threshold):
    ne = ep.goal_distances[-1]
    sr = float(ne <= threshold)
    osr = float(min(ep.goal_distances) <= threshold)
    l, p = ep.gold_length, ep.traversed_length
    weight = l / max(l, p) if max(l, p) > 0 else 1.0
    out = {"NE": ne, "SR": sr, "OSR": osr, "SPL": sr * weight}
    if ep.goal_object is not None:
        # no object choice (episode never stopped) counts as a grounding miss
        rgs = sr * float(ep.predicted_object == ep.goal_object)
        out["RGS"], out["RGSPL"] = rgs, rgs * weight
    return out


def evaluate(episodes, threshold=1.0):
    """Mean NE/SR/OSR/SPL over episodes; RGS/RGSPL when every task has a goal object."""
    if not episodes:
        raise ContractViolation("evaluate needs at least one episode")
    per = [episode_metrics(ep, threshold) for ep in episodes]
    out = {}
    for name in METRIC_NAMES:
        vals = [m[name] for m in per if name in m]
        out[name] = float(sum(vals) / len(vals)) if len(vals) == len(per) else None
    out["episodes"] = len(per)
    return out


def dumps_json(obj):
    """Canonical JSON text used for every file the package writes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
