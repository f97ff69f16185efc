"""Full navigation agent: cross-modal fusion, global-local decision, training and rollout."""
import heapq
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .asv import VisualEncoder
from .errors import ConfigurationError, ContractViolation, DiagnosticError
from .igl import InstructionEncoder, Vocab, prepare_instruction
from .memgraph import CANDIDATE, MemoryEncoder, MemoryGraph
from .numkernel import FeedForward, LayerNorm, Module, ModuleList, MultiHeadAttention
from .numkernel import tensor as T
from .simworld import BLOCKLIST, Episode, path_length, shortest_path

STOP = "STOP"
RMF_DROPS = ("none", "global", "local", "text")


@dataclass
class ModelConfig:
    d_model: int = 64
    d_obj: int = 16
    heads: int = 4
    obj_heads: int = 4
    lang_layers: int = 2
    asv_layers: int = 1
    xmodal_layers: int = 2
    n_views: int = 36
    d_v: int = 32
    max_objects: int = 3
    max_len: int = 80
    max_steps: int = 15
    no_igl: bool = False
    no_asv_objects: bool = False
    mean_instead_of_gaa: bool = False
    no_rmf: bool = False
    rmf_drop: str = "none"

    def __post_init__(self):
        if self.rmf_drop not in RMF_DROPS:
            raise ConfigurationError(f"rmf_drop must be one of {RMF_DROPS}, got {self.rmf_drop!r}")
        if self.d_model % self.heads or self.d_obj % self.obj_heads:
            raise ConfigurationError("model widths must be divisible by their head counts")
        if self.max_objects < 1:
            raise ConfigurationError("max_objects must be at least 1")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


FULL_SCALE_DIMS = dict(d_model=768, d_obj=128, heads=12, obj_heads=8, lang_layers=9, asv_layers=2, xmodal_layers=4)


class CrossModalLayer(Module):
    """Visual tokens attend to language (keys/values only), then to each other, then FFN."""

    def __init__(self, d_model, heads, rng):
        super().__init__()
        self.cross = MultiHeadAttention(d_model, heads, rng)
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, 4 * d_model, d_model, rng)
        self.ln3 = LayerNorm(d_model)

    def __call__(self, x, lang):
        x = self.ln1(x + self.cross(x, lang, lang))
        x = self.ln2(x + self.self_attn(x, x, x))
        return self.ln3(x + self.ffn(x))


class CrossModalEncoder(Module):
    def __init__(self, d_model, heads, layers, rng):
        super().__init__()
        self.layers = ModuleList(CrossModalLayer(d_model, heads, rng) for _ in range(layers))

    def __call__(self, visual_seq, K_f):
        x = visual_seq
        for layer in self.layers:
            x = layer(x, K_f)
        return x


def cross_modal_fuse(encoder, visual_seq, K_f):
    return encoder(visual_seq, K_f)


@dataclass
class StepOutput:
    F_g: T.Tensor
    F_l: T.Tensor
    C_g: T.Tensor
    C_l: T.Tensor
    C_k: T.Tensor
    sigma: T.Tensor  # (1, 1)
    global_scores: T.Tensor  # (K+1,) stop first, then graph nodes
    local_scores: T.Tensor  # (V+1,) stop first, then views
    local_mapped: T.Tensor  # (K+1,) local scores in the global action space
    action_logits: T.Tensor  # (K+1,)
    action_probs: T.Tensor  # (K+1,)
    action_mask: np.ndarray  # (K+1,) bool
    node_ids: list  # node id per action index 1..K
    new_mem: T.Tensor = None
    visual: object = None

    def action_of(self, index):
        return STOP if index == 0 else self.node_ids[index - 1]

    def index_of(self, action):
        return 0 if action == STOP else 1 + self.node_ids.index(action)


def local_to_global_index(node_ids, local_views):
    """Index into the local score vector for each global action.

    Stop reads the local stop score. A node visible from the current
    position reads the score of the view facing it; every other node reads
    the local stop score.
    """
    return np.array([0] + [1 + local_views[u] if u in local_views else 0 for u in node_ids], dtype=int)


def blend_scores(global_scores, local_scores, sigma, index):
    mapped = local_scores[index]
    return sigma * global_scores + (1.0 - sigma) * mapped, mapped


class NavigationAgent(Module):
    def __init__(self, config, vocab, category_names, rng):
        super().__init__()
        c = self.config = config
        self.vocab = vocab
        self.category_names = list(category_names)
        self.blocked = {i for i, n in enumerate(category_names) if n in BLOCKLIST}
        n_labels = len(category_names)
        self.language = InstructionEncoder(len(vocab), c.d_model, c.heads, c.lang_layers, c.max_len, rng)
        self.vision = VisualEncoder(c.d_v, c.d_model, c.d_obj, c.heads, c.obj_heads, c.asv_layers,
                                    n_labels, c.n_views, rng)
        self.memory = MemoryEncoder(c.d_model, c.max_steps, rng, use_gaa=not c.mean_instead_of_gaa)
        self.fuse_global = CrossModalEncoder(c.d_model, c.heads, c.xmodal_layers, rng)
        self.fuse_local = CrossModalEncoder(c.d_model, c.heads, c.xmodal_layers, rng)
        self.sigma_head = FeedForward(2 * c.d_model, 4 * c.d_model, 1, rng)
        self.global_head = FeedForward(c.d_model, 4 * c.d_model, 1, rng)
        self.local_head = FeedForward(c.d_model, 4 * c.d_model, 1, rng)

    @classmethod
    def build(cls, config, lexicon, seed):
        rng = np.random.default_rng([seed, 7])
        return cls(config, Vocab.from_lexicon(lexicon), lexicon.category_names, rng)

    def encode_instruction(self, ids):
        return self.language(ids, use_guidance=not self.config.no_igl)

    def zero_mem(self):
        return T.Tensor(np.zeros((1, self.config.d_model)))

    def decide(self, F_g, F_l, graph, node_ids, local_views, sigma_override=None):
        K, V = len(node_ids), F_l.shape[0] - 2
        C_g, C_l = F_g[0:1], F_l[0:1]
        pre = self.sigma_head(T.concat([C_g, C_l], axis=1))
        if sigma_override is not None:
            pre = T.Tensor(np.full((1, 1), float(sigma_override)))
        sigma = T.sigmoid(pre)
        g_scores = self.global_head(F_g[0:K + 1]).reshape(K + 1)
        l_scores = self.local_head(F_l[0:V + 1]).reshape(V + 1)
        index = local_to_global_index(node_ids, local_views)
        logits, mapped = blend_scores(g_scores, l_scores, sigma.reshape(1), index)
        mask = np.array([True] + [graph.nodes[u].status == CANDIDATE for u in node_ids])
        probs = T.softmax(logits, mask=mask)
        return StepOutput(F_g, F_l, C_g, C_l, None, sigma, g_scores, l_scores, mapped,
                          logits, probs, mask, node_ids)

    def step(self, observation, encoding, graph, mem, sigma_override=None):
        c = self.config
        visual = self.vision(observation, c.max_objects, self.blocked, use_objects=not c.no_asv_objects)
        graph.observe(observation.node, visual.S_f, observation.candidates, self.memory.pool)
        U_g, node_ids = self.memory.global_sequence(graph, mem)
        angles = np.stack([v.angle for v in observation.views])
        U_l = self.memory.local_sequence(visual.S_f, angles, mem)
        F_g = self.fuse_global(U_g, encoding.K_f)
        F_l = self.fuse_local(U_l, encoding.K_f)
        out = self.decide(F_g, F_l, graph, node_ids, dict(observation.candidates), sigma_override)
        out.C_k = encoding.K_f[0:1]
        out.visual = visual
        if c.no_rmf:
            out.new_mem = self.zero_mem()
        else:
            parts = [out.C_g, out.C_l, out.C_k]
            drop = {"global": 0, "local": 1, "text": 2}.get(c.rmf_drop)
            if drop is not None:
                parts[drop] = self.zero_mem()
            out.new_mem = self.memory.rmf_update(*parts)
        return out


# ---------------------------------------------------------------- episodes

@dataclass
class EpisodeState:
    node: int
    heading: float
    graph: MemoryGraph = field(default_factory=MemoryGraph)
    mem: T.Tensor = None


def gold_action(world, node, goal):
    """Next node on the shortest path to the goal, or STOP at the goal."""
    if node == goal:
        return STOP
    return shortest_path(world, node, goal)[0][1]


def move(world, state, target):
    """Walk to ``target`` through known nodes; return the nodes passed."""
    if target in world.neighbors(state.node):
        hops = [state.node, target]
    else:
        hops = _known_path(world, state.graph, state.node, target)
    state.heading = world.bearing(hops[-2], hops[-1])
    state.node = target
    return hops[1:]


def _known_path(world, graph, a, b):
    allowed = set(graph.visited()) | {b}
    heap, done = [(0.0, (a,))], set()
    while heap:
        d, path = heapq.heappop(heap)
        u = path[-1]
        if u == b:
            return list(path)
        if u in done:
            continue
        done.add(u)
        for v in world.neighbors(u):
            if v in allowed and v not in done:
                heapq.heappush(heap, (d + world.edge_length(u, v), path + (v,)))
    raise ContractViolation(f"no known route from {a} to {b}")


def episode_loss(agent, world, task, lexicon):
    """Teacher-forced sum of -log p(gold action) and the number of steps."""
    enc = agent.encode_instruction(prepare_instruction(task.instruction, lexicon, agent.vocab))
    state = EpisodeState(task.start, task.start_heading, mem=agent.zero_mem())
    total, steps = None, 0
    for _ in range(agent.config.max_steps + 1):
        out = agent.step(world.observe(state.node, state.heading), enc, state.graph, state.mem)
        gold = gold_action(world, state.node, task.goal)
        k = out.index_of(gold)
        if not out.action_mask[k]:
            raise DiagnosticError(f"gold action {gold} is masked at node {state.node}")
        nll = -T.log(out.action_probs[k])
        total = nll if total is None else total + nll
        steps += 1
        state.mem = out.new_mem
        if gold == STOP:
            break
        move(world, state, gold)
    return total, steps


def clip_gradients(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def sgd_update(params, lr):
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad


def batch_loss(agent, batch, worlds, lexicon):
    total, steps = None, 0
    for task in batch:
        loss, n = episode_loss(agent, worlds[task.world_seed], task, lexicon)
        total = loss if total is None else total + loss
        steps += n
    return total * (1.0 / steps), steps


def train_step(agent, batch, worlds, lexicon, lr=1e-3, clip=5.0):
    """One SGD update on the mean per-step cross-entropy of a teacher-forced batch."""
    params = agent.parameters()
    agent.zero_grad()
    loss, _ = batch_loss(agent, batch, worlds, lexicon)
    T.backward(loss)
    clip_gradients(params, clip)
    sgd_update(params, lr)
    return loss.item()


# ---------------------------------------------------------------- rollout

def ground_object(agent, out):
    """Object label at the stop node whose projected feature best matches the
    instruction summary row."""
    vis = out.visual
    if vis is None or vis.object_tokens is None or not vis.grid.mask.any():
        return None
    d_m = agent.config.d_model
    proj = agent.vision.fuse_proj.weight.data[d_m:]
    scores = vis.object_tokens.data @ proj @ out.C_k.data[0]
    scores = np.where(vis.grid.mask, scores, -np.inf)
    v, m = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return int(vis.grid.label[v, m])


def _record(out, choice, mem):
    return {
        "node_ids": list(out.node_ids),
        "candidates": [out.action_of(i) for i in np.flatnonzero(out.action_mask)],
        "sigma": float(out.sigma.data[0, 0]),
        "global_scores": out.global_scores.data.tolist(),
        "local_scores": out.local_mapped.data.tolist(),
        "probs": out.action_probs.data.tolist(),
        "action": choice,
        "mem_norm": float(np.linalg.norm(mem.data)),
    }


def rollout(agent, world, task, lexicon, policy="greedy", max_steps=None, rng=None):
    """Run one episode without gradient tracking.

    ``policy`` is ``greedy`` (argmax), ``sample`` (draw from the action
    distribution), ``random`` (uniform over unmasked actions) or ``oracle``
    (the gold action). Reaching ``max_steps`` ends the episode in place.
    """
    max_steps = agent.config.max_steps if max_steps is None else max_steps
    if policy in ("sample", "random") and rng is None:
        raise ContractViolation(f"policy {policy!r} needs an rng")
    state = EpisodeState(task.start, task.start_heading, mem=agent.zero_mem())
    trajectory, actions, records = [task.start], [], []
    predicted = None
    with T.no_grad():
        enc = agent.encode_instruction(prepare_instruction(task.instruction, lexicon, agent.vocab))
        for _ in range(max_steps):
            out = agent.step(world.observe(state.node, state.heading), enc, state.graph, state.mem)
            allowed = np.flatnonzero(out.action_mask)
            if policy == "greedy":
                k = int(np.argmax(out.action_probs.data))
            elif policy == "sample":
                k = int(rng.choice(len(out.node_ids) + 1, p=out.action_probs.data))
            elif policy == "random":
                k = int(rng.choice(allowed))
            elif policy == "oracle":
                k = out.index_of(gold_action(world, state.node, task.goal))
            else:
                raise ContractViolation(f"unknown policy {policy!r}")
            choice = out.action_of(k)
            records.append(_record(out, choice, state.mem))
            actions.append(choice)
            state.mem = out.new_mem
            if choice == STOP:
                predicted = ground_object(agent, out)
                break
            trajectory.extend(move(world, state, choice))
    return Episode(
        world_seed=world.seed,
        task_seed=task.task_seed,
        start=task.start,
        goal=task.goal,
        trajectory=trajectory,
        traversed_length=path_length(world, trajectory),
        gold_length=task.gold_length,
        goal_distances=[world.distance(u, task.goal) for u in trajectory],
        goal_object=task.goal_object,
        predicted_object=predicted,
        actions=actions,
        steps=records,
    )
