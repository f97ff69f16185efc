"""Topological memory: node pooling, sequence assembly and the recurrent memory token."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .numkernel import LayerNorm, Linear, Module, Parameter
from .numkernel import tensor as T
from .numkernel.nn import xavier_uniform

VISITED, CANDIDATE, CURRENT = "visited", "candidate", "current"


def gaa_aggregate(S_f, weight, bias):
    """Pool N view rows into one: ``softmax(tanh(S_f W + b))``-weighted sum.

    Returns the (1, d) pooled row and the (N, 1) weights. The weighted sum is
    an elementwise product followed by a sum over rows, so with zero
    parameters the result equals ``sum(S_f * (1/N), axis=0)`` bit for bit.
    """
    if S_f.shape[0] == 0:
        raise ContractViolation("gaa_aggregate needs at least one row")
    scores = T.tanh(S_f @ weight + bias)
    w = T.softmax(scores, axis=0)
    return (w * S_f).sum(axis=0, keepdims=True), w


def mean_aggregate(S_f):
    n = S_f.shape[0]
    if n == 0:
        raise ContractViolation("mean_aggregate needs at least one row")
    w = T.Tensor(np.full((n, 1), 1.0 / n))
    return (w * S_f).sum(axis=0, keepdims=True), w


@dataclass
class NodeState:
    status: str
    pooled: T.Tensor = None
    last_visit_step: int = -1


@dataclass
class MemoryGraph:
    nodes: dict = field(default_factory=dict)  # insertion order = first-seen order
    edges: set = field(default_factory=set)  # (observer, observed)
    step: int = 0
    current: int = None
    # candidate -> observer -> (weight (1,), row (1, d)) of the view that faced it
    _views: dict = field(default_factory=dict)

    def neighbors(self, u):
        out = {b for a, b in self.edges if a == u} | {a for a, b in self.edges if b == u}
        return sorted(out)

    def status_of(self, u):
        return self.nodes[u].status

    def candidates(self):
        return [u for u, s in self.nodes.items() if s.status == CANDIDATE]

    def visited(self):
        return [u for u, s in self.nodes.items() if s.status in (VISITED, CURRENT)]

    def observe(self, node_id, S_f, candidates, pool):
        """Record an observation taken at ``node_id``.

        ``candidates`` lists (neighbor, view index); ``pool`` maps S_f to
        (pooled row, per-view weights).
        """
        if self.nodes and node_id not in self.nodes:
            raise ContractViolation(f"node {node_id} is not adjacent to anything observed")
        if S_f.ndim != 2:
            raise ContractViolation(f"panorama features must be 2-d, got {S_f.shape}")
        if self.current is not None and self.current != node_id:
            self.nodes[self.current].status = VISITED
        pooled, weights = pool(S_f)
        state = self.nodes.setdefault(node_id, NodeState(CURRENT))
        state.status, state.pooled, state.last_visit_step = CURRENT, pooled, self.step
        self.current = node_id
        self._views.pop(node_id, None)
        for v, view in candidates:
            if not 0 <= view < S_f.shape[0]:
                raise ContractViolation(f"candidate view {view} outside panorama of {S_f.shape[0]}")
            self.edges.add((node_id, v))
            if v not in self.nodes:
                self.nodes[v] = NodeState(CANDIDATE)
            if self.nodes[v].status == CANDIDATE:
                self._views.setdefault(v, {})[node_id] = (weights[view], S_f[view:view + 1])
                self._refresh_candidate(v)
        self.step += 1
        return weights

    def _refresh_candidate(self, v):
        seen = [self._views[v][o] for o in sorted(self._views[v])]
        total = seen[0][0]
        acc = seen[0][0] * seen[0][1]
        for w, row in seen[1:]:
            total = total + w
            acc = acc + w * row
        self.nodes[v].pooled = acc / total

    def step_positions(self):
        """0 for unvisited candidates, last visit step + 1 otherwise."""
        return [0 if s.status == CANDIDATE else s.last_visit_step + 1 for s in self.nodes.values()]

    def snapshot(self):
        return {
            "step": self.step,
            "current": self.current,
            "nodes": [
                {"id": u, "status": s.status, "last_visit_step": s.last_visit_step}
                for u, s in self.nodes.items()
            ],
            "edges": sorted([list(e) for e in self.edges]),
        }


class MemoryEncoder(Module):
    """Parameters of pooling, sequence tokens and the recurrent memory update."""

    def __init__(self, d_model, max_steps, rng, use_gaa=True):
        super().__init__()
        self.use_gaa = use_gaa
        self.gaa_weight = Parameter(xavier_uniform(rng, (d_model, 1)))
        self.gaa_bias = Parameter(np.zeros(1))
        self.cls_global = Parameter(np.zeros((1, d_model)))
        self.cls_local = Parameter(np.zeros((1, d_model)))
        self.step_embedding = Parameter(xavier_uniform(rng, (max_steps + 2, d_model)))
        self.local_position = Linear(4, d_model, rng)
        self.rmf_proj = Linear(3 * d_model, d_model, rng)
        self.rmf_ln = LayerNorm(d_model)

    def pool(self, S_f):
        if self.use_gaa:
            return gaa_aggregate(S_f, self.gaa_weight, self.gaa_bias)
        return mean_aggregate(S_f)

    def global_sequence(self, graph, mem):
        """([CLS], node rows + step embedding, [MEM]) and the node id per row."""
        if not graph.nodes:
            raise ContractViolation("global sequence of an empty graph")
        ids = list(graph.nodes)
        rows = T.concat([graph.nodes[u].pooled for u in ids], axis=0)
        pos = np.minimum(graph.step_positions(), self.step_embedding.shape[0] - 1)
        rows = rows + self.step_embedding[pos]
        return T.concat([self.cls_global, rows, mem], axis=0), ids

    def local_sequence(self, S_f, view_angles, mem):
        """([CLS], view rows + projected relative angle, [MEM])."""
        rows = S_f + self.local_position(T.Tensor(view_angles))
        return T.concat([self.cls_local, rows, mem], axis=0)

    def rmf_update(self, C_g, C_l, C_k):
        return self.rmf_ln(self.rmf_proj(T.concat([C_g, C_l, C_k], axis=1)))
