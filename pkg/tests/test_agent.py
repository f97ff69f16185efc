import math

import numpy as np
import pytest

from semnav import agent as agent_mod
from semnav.agent import (
    STOP,
    CrossModalEncoder,
    ModelConfig,
    FULL_SCALE_DIMS,
    cross_modal_fuse,
    episode_loss,
    rollout,
    train_step,
)
from semnav.asv import select_objects, view_arrays
from semnav.errors import ConfigurationError, DiagnosticError
from semnav.igl import prepare_instruction
from semnav.memgraph import CANDIDATE, CURRENT, VISITED, MemoryGraph, NodeState
from semnav.numkernel import Tensor
from semnav.numkernel import tensor as T

from . import builders as B
from . import oracle


# ---------------------------------------------------------------- config

def test_model_config_validation_and_round_trip():
    cfg = ModelConfig()
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert (cfg.d_model, cfg.d_obj, cfg.heads, cfg.lang_layers, cfg.asv_layers, cfg.xmodal_layers) == (64, 16, 4, 2, 1, 2)
    with pytest.raises(ConfigurationError):
        ModelConfig(rmf_drop="vision")
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(max_objects=0)
    full = ModelConfig(**FULL_SCALE_DIMS)
    assert (full.d_model, full.d_obj, full.lang_layers) == (768, 128, 9)


# ---------------------------------------------------------------- cross-modal fusion

def test_cross_modal_zero_layers_identity(rng):
    enc = CrossModalEncoder(8, 2, 0, rng)
    x = Tensor(rng.normal(size=(5, 8)))
    assert cross_modal_fuse(enc, x, Tensor(rng.normal(size=(3, 8)))) is x


def test_cross_modal_single_language_row_gets_all_weight(rng):
    enc = CrossModalEncoder(8, 2, 1, rng)
    x, K = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(1, 8)))
    enc.layers[0].cross(x, K, K, keep_weights=True)
    np.testing.assert_array_equal(enc.layers[0].cross.last_weights, np.ones((2, 5, 1)))


def test_cross_modal_recomputation_and_language_untouched(rng):
    enc = CrossModalEncoder(8, 2, 2, rng)
    x, K = rng.normal(size=(6, 8)), rng.normal(size=(4, 8))
    K_before = K.copy()
    got = cross_modal_fuse(enc, Tensor(x), Tensor(K)).data
    np.testing.assert_allclose(got, oracle.cross_modal(enc, x, K), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(K, K_before)


# ---------------------------------------------------------------- decide

def graph_with(statuses):
    g = MemoryGraph()
    for u, s in statuses.items():
        g.nodes[u] = NodeState(s)
    return g


def random_decision(agent, rng, sigma_override=None):
    K = int(rng.integers(1, 7))
    V = agent.config.n_views
    node_ids = [int(u) for u in rng.permutation(20)[:K]]
    statuses = {u: rng.choice([VISITED, CANDIDATE]) for u in node_ids}
    statuses[node_ids[int(rng.integers(K))]] = CURRENT
    local = {u: int(rng.integers(V)) for u in node_ids if rng.random() < 0.5}
    F_g = Tensor(rng.normal(scale=2, size=(K + 2, agent.config.d_model)))
    F_l = Tensor(rng.normal(scale=2, size=(V + 2, agent.config.d_model)))
    out = agent.decide(F_g, F_l, graph_with(statuses), node_ids, local, sigma_override)
    return out, statuses, local


def test_masking_and_normalization_1000_configurations():
    agent = B.tiny_agent(3)
    rng = np.random.default_rng(11)
    for _ in range(1000):
        out, statuses, _ = random_decision(agent, rng)
        p, mask = out.action_probs.data, out.action_mask
        assert mask[0]
        assert mask[1:].tolist() == [statuses[u] == CANDIDATE for u in out.node_ids]
        assert (p[~mask] == 0.0).all()
        assert abs(p[mask].sum() - 1.0) <= 1e-9
        s = float(out.sigma.data[0, 0])
        assert 0.0 < s < 1.0


def test_blend_within_branch_envelope_1000_draws():
    agent = B.tiny_agent(4)
    rng = np.random.default_rng(12)
    for _ in range(1000):
        out, _, _ = random_decision(agent, rng)
        g, l = out.global_scores.data, out.local_mapped.data
        G = out.action_logits.data
        assert (G >= np.minimum(g, l) - 1e-12).all() and (G <= np.maximum(g, l) + 1e-12).all()


def test_sigma_endpoints_select_single_branch():
    agent = B.tiny_agent(5)
    rng = np.random.default_rng(13)
    for _ in range(50):
        state = rng.bit_generator.state
        hi, _, _ = random_decision(agent, rng, sigma_override=20.0)
        rng.bit_generator.state = state
        lo, _, _ = random_decision(agent, rng, sigma_override=-20.0)
        np.testing.assert_allclose(hi.action_logits.data, hi.global_scores.data, rtol=0, atol=1e-6)
        np.testing.assert_allclose(lo.action_logits.data, lo.local_mapped.data, rtol=0, atol=1e-6)
        only_g = T.softmax(Tensor(hi.global_scores.data), mask=hi.action_mask).data
        np.testing.assert_allclose(hi.action_probs.data, only_g, rtol=0, atol=1e-6)


def test_shift_invariance():
    agent = B.tiny_agent(6)
    rng = np.random.default_rng(14)
    for _ in range(200):
        out, _, _ = random_decision(agent, rng)
        c = float(rng.normal(scale=10))
        shifted = out.action_logits.data + np.where(out.action_mask, c, 0.0)
        p = T.softmax(Tensor(shifted), mask=out.action_mask).data
        np.testing.assert_allclose(p, out.action_probs.data, rtol=0, atol=1e-12)
        assert int(np.argmax(p)) == int(np.argmax(out.action_probs.data))


def zero_heads(agent):
    for head in (agent.global_head, agent.local_head):
        head.fc2.weight.data[:] = 0.0
        head.fc2.bias.data[:] = 0.0


def test_single_candidate_equal_logits_is_half_half(rng):
    agent = B.tiny_agent()
    zero_heads(agent)
    g = graph_with({0: CURRENT, 1: CANDIDATE})
    out = agent.decide(Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(10, 8))), g, [0, 1], {1: 2})
    np.testing.assert_array_equal(out.action_probs.data, [0.5, 0.0, 0.5])


def test_decide_hand_computed_backfill(rng):
    agent = B.tiny_agent(8)
    node_ids = [0, 5, 7, 9]  # 0 current, three candidates
    g = graph_with({0: CURRENT, 5: CANDIDATE, 7: CANDIDATE, 9: CANDIDATE})
    local = {5: 3}  # only node 5 is visible from here
    F_g, F_l = rng.normal(size=(6, 8)), rng.normal(size=(10, 8))
    out = agent.decide(Tensor(F_g), Tensor(F_l), g, node_ids, local)
    gs = oracle.ffn(agent.global_head, F_g[:5])[:, 0]
    ls = oracle.ffn(agent.local_head, F_l[:9])[:, 0]
    sigma = oracle.sigmoid(oracle.ffn(agent.sigma_head, np.concatenate([F_g[:1], F_l[:1]], axis=1)))[0, 0]
    mapped = np.array([ls[0], ls[0], ls[1 + 3], ls[0], ls[0]])
    G = sigma * gs + (1 - sigma) * mapped
    np.testing.assert_allclose(out.action_logits.data, G, rtol=0, atol=1e-12)
    keep = np.array([True, False, True, True, True])
    np.testing.assert_allclose(out.action_probs.data, oracle.softmax(G, keep), rtol=0, atol=1e-12)
    assert out.action_of(0) == STOP and out.action_of(2) == 5 and out.index_of(9) == 4


# ---------------------------------------------------------------- step

def monolithic_first_step(agent, w, t):
    """Straight-line numpy recomputation of the first decision of an episode."""
    c, L, Vn, M = agent.config, agent.language, agent.vision, agent.memory
    ids = prepare_instruction(t.instruction, B.LEXICON, agent.vocab)

    def emb(seq, role):
        if not seq:
            return L.null_token.data
        return (L.token_embedding.data[seq] + L.position_embedding.data[np.arange(len(seq))]
                + L.role_embedding.data[role])

    E_c = oracle.encoder(L.context, emb(ids.instruction, 0))
    guide = np.concatenate([emb(ids.directions, 1), emb(ids.landmarks, 2)])
    E_g = oracle.mha(L.guide, E_c, guide, guide)
    om = oracle.sigmoid(E_g @ L.gate_g.data + E_c @ L.gate_c.data + L.gate_b.data)
    K_f = om * E_g + (1 - om) * E_c

    obs = w.observe(t.start, t.start_heading)
    feats, scal = view_arrays(obs.views)
    E_V = oracle.layernorm(Vn.view_ln, feats @ Vn.view_proj.weight.data + oracle.linear(Vn.view_scalar_proj, scal))
    grid = select_objects(obs.objects, c.max_objects, agent.blocked, Vn.null_label)
    s_o = np.concatenate([grid.geometry, grid.angle, grid.navigable[..., None]], axis=-1)
    E_O = oracle.layernorm(Vn.obj_ln, oracle.linear(Vn.obj_scalar_proj, s_o) + Vn.label_embedding.data[grid.label])
    S_f, _ = oracle.asv_encode(Vn, E_V, E_O, grid.mask)

    r = np.tanh(S_f @ M.gaa_weight.data + M.gaa_bias.data)[:, 0]
    wts = np.exp(r - r.max()) / np.exp(r - r.max()).sum()
    pooled = (wts[:, None] * S_f).sum(axis=0)
    node_ids = [t.start] + [v for v, _ in obs.candidates]
    rows = np.stack([pooled] + [S_f[i] for _, i in obs.candidates])
    pos = [1] + [0] * len(obs.candidates)
    mem = np.zeros((1, c.d_model))
    U_g = np.concatenate([M.cls_global.data, rows + M.step_embedding.data[pos], mem])
    angles = np.stack([v.angle for v in obs.views])
    U_l = np.concatenate([M.cls_local.data, S_f + oracle.linear(M.local_position, angles), mem])
    F_g = oracle.cross_modal(agent.fuse_global, U_g, K_f)
    F_l = oracle.cross_modal(agent.fuse_local, U_l, K_f)

    sigma = oracle.sigmoid(oracle.ffn(agent.sigma_head, np.concatenate([F_g[:1], F_l[:1]], axis=1)))[0, 0]
    K, V = len(node_ids), c.n_views
    gs = oracle.ffn(agent.global_head, F_g[:K + 1])[:, 0]
    ls = oracle.ffn(agent.local_head, F_l[:V + 1])[:, 0]
    local = dict(obs.candidates)
    mapped = np.array([ls[0]] + [ls[1 + local[u]] if u in local else ls[0] for u in node_ids])
    G = sigma * gs + (1 - sigma) * mapped
    keep = np.array([True, False] + [True] * len(obs.candidates))
    probs = oracle.softmax(G, keep)
    new_mem = oracle.layernorm(M.rmf_ln, oracle.linear(M.rmf_proj, np.concatenate([F_g[:1], F_l[:1], K_f[:1]], 1)))
    return probs, new_mem, sigma


@pytest.mark.parametrize("seed", [0, 1])
def test_first_step_matches_monolithic_recomputation(seed):
    agent = B.tiny_agent(seed)
    w = B.world(seed, n=3)
    t = B.task(w, 0, min_hops=1)
    enc = agent.encode_instruction(prepare_instruction(t.instruction, B.LEXICON, agent.vocab))
    out = agent.step(w.observe(t.start, t.start_heading), enc, MemoryGraph(), agent.zero_mem())
    probs, new_mem, sigma = monolithic_first_step(agent, w, t)
    np.testing.assert_allclose(out.action_probs.data, probs, rtol=0, atol=1e-10)
    np.testing.assert_allclose(out.new_mem.data, new_mem, rtol=0, atol=1e-10)
    assert out.sigma.data[0, 0] == pytest.approx(sigma, abs=1e-12)
    np.testing.assert_array_equal(out.C_k.data, enc.K_f.data[:1])


class SequenceSpy:
    """Wraps a sequence builder and records the [MEM] row it was given."""

    def __init__(self, fn):
        self.fn, self.mem_rows = fn, []

    def __call__(self, *args):
        seq = self.fn(*args)
        out = seq[0] if isinstance(seq, tuple) else seq
        self.mem_rows.append(out.data[-1].copy())
        return seq


def scripted_steps(agent, w, t, n_steps):
    spies = SequenceSpy(agent.memory.global_sequence), SequenceSpy(agent.memory.local_sequence)
    agent.memory.global_sequence, agent.memory.local_sequence = spies
    enc = agent.encode_instruction(prepare_instruction(t.instruction, B.LEXICON, agent.vocab))
    state = agent_mod.EpisodeState(t.start, t.start_heading, mem=agent.zero_mem())
    produced = []
    for k in range(n_steps):
        out = agent.step(w.observe(state.node, state.heading), enc, state.graph, state.mem)
        produced.append(out.new_mem.data.copy())
        state.mem = out.new_mem
        target = t.gold_path[min(k + 1, len(t.gold_path) - 1)]
        if target != state.node:
            agent_mod.move(w, state, target)
    return spies, produced


def test_mem_recurrence_wiring_three_steps():
    agent = B.tiny_agent(2)
    w = B.world(2, n=6, degree=2.0)
    t = B.task(w, 1)
    (g, l), produced = scripted_steps(agent, w, t, 3)
    np.testing.assert_array_equal(g.mem_rows[0], 0.0)
    np.testing.assert_array_equal(l.mem_rows[0], 0.0)
    for k in range(2):
        np.testing.assert_array_equal(g.mem_rows[k + 1], produced[k][0])
        np.testing.assert_array_equal(l.mem_rows[k + 1], produced[k][0])


def test_no_rmf_keeps_mem_zero():
    agent = B.tiny_agent(2, no_rmf=True)
    w = B.world(2, n=6, degree=2.0)
    (g, _), produced = scripted_steps(agent, w, B.task(w, 1), 3)
    for row in g.mem_rows + [p[0] for p in produced]:
        np.testing.assert_array_equal(row, 0.0)


# ---------------------------------------------------------------- training

def test_uniform_predictions_give_log_k():
    agent = B.tiny_agent(1)
    zero_heads(agent)
    w = B.world(1, n=5, degree=2.0)
    t = B.forced_task(w, 2, 2)  # already at the goal: one STOP step
    loss, steps = episode_loss(agent, w, t, B.LEXICON)
    k = 1 + len(w.neighbors(2))
    assert steps == 1
    assert loss.item() == pytest.approx(math.log(k), abs=1e-12)


class GoldForcingAgent(agent_mod.NavigationAgent):
    """Puts all probability mass on the gold action."""

    world = goal = None

    def decide(self, F_g, F_l, graph, node_ids, local_views, sigma_override=None):
        out = super().decide(F_g, F_l, graph, node_ids, local_views, sigma_override)
        gold = agent_mod.gold_action(self.world, graph.current, self.goal)
        logits = np.zeros(len(node_ids) + 1)
        logits[out.index_of(gold)] = 1000.0
        out.action_probs = T.softmax(Tensor(logits), mask=out.action_mask)
        return out


def test_probability_one_on_gold_gives_zero_loss():
    w = B.world(4, n=6, degree=2.0)
    t = B.task(w, 0)
    agent = GoldForcingAgent.build(B.tiny_config(), B.LEXICON, 0)
    agent.world, agent.goal = w, t.goal
    loss, steps = episode_loss(agent, w, t, B.LEXICON)
    assert steps == len(t.gold_path)
    assert loss.item() == 0.0


def test_masked_gold_action_is_diagnostic(monkeypatch):
    agent = B.tiny_agent()
    w = B.world(4, n=6, degree=2.0)
    t = B.task(w, 0)
    calls = []

    def looping_gold(world, node, goal):
        calls.append(node)
        return world.neighbors(node)[0] if len(calls) == 1 else t.start

    monkeypatch.setattr(agent_mod, "gold_action", looping_gold)
    with pytest.raises(DiagnosticError):
        episode_loss(agent, w, t, B.LEXICON)


def small_batch(n_tasks=5, seed=0):
    w = B.world(seed, n=8, degree=2.5)
    return [B.task(w, s) for s in range(n_tasks)], {w.seed: w}


def test_loss_decreases_over_50_updates():
    agent = B.tiny_agent(0)
    batch, worlds = small_batch()
    before = agent_mod.batch_loss(agent, batch, worlds, B.LEXICON)[0].item()
    for _ in range(50):
        train_step(agent, batch, worlds, B.LEXICON, lr=1e-3)
    after = agent_mod.batch_loss(agent, batch, worlds, B.LEXICON)[0].item()
    assert after < before


def test_gradient_clipping_caps_global_norm(rng):
    from semnav.numkernel import Parameter

    ps = [Parameter(np.zeros(3)), Parameter(np.zeros(2))]
    ps[0].grad, ps[1].grad = np.array([3.0, 4.0, 0.0]), np.array([12.0, 0.0])
    norm = agent_mod.clip_gradients(ps, 5.0)
    assert norm == 13.0
    assert math.sqrt(sum((p.grad ** 2).sum() for p in ps)) == pytest.approx(5.0, abs=1e-12)


ABLATIONS = [dict(no_igl=True), dict(no_asv_objects=True), dict(mean_instead_of_gaa=True), dict(no_rmf=True),
             dict(rmf_drop="global"), dict(rmf_drop="local"), dict(rmf_drop="text")]


def loss_trajectory(steps=10, **overrides):
    agent = B.tiny_agent(0, **overrides)
    batch, worlds = small_batch(3)
    return [train_step(agent, batch, worlds, B.LEXICON, lr=1e-2) for _ in range(steps)]


@pytest.mark.parametrize("overrides", ABLATIONS, ids=lambda d: ",".join(f"{k}={v}" for k, v in d.items()))
def test_ablation_trains_and_changes_trajectory(overrides):
    full = loss_trajectory()
    ablated = loss_trajectory(**overrides)
    assert all(np.isfinite(ablated))
    assert ablated != full


# ---------------------------------------------------------------- rollout

def test_rollout_zero_steps_stays_at_start():
    agent = B.tiny_agent()
    w = B.world(0, n=4, degree=2.0)
    t = B.task(w, 0)
    ep = rollout(agent, w, t, B.LEXICON, max_steps=0)
    assert ep.trajectory == [t.start] and ep.actions == []


def test_greedy_rollout_deterministic():
    w = B.world(3, n=8, degree=2.5)
    t = B.task(w, 2)
    a = rollout(B.tiny_agent(9), w, t, B.LEXICON)
    b = rollout(B.tiny_agent(9), w, t, B.LEXICON)
    assert a.to_json() == b.to_json()


def test_oracle_policy_on_two_node_world():
    w = B.world(0, n=2, degree=1.0)
    t = B.forced_task(w, 0, 1)
    ep = rollout(B.tiny_agent(), w, t, B.LEXICON, policy="oracle")
    assert ep.trajectory == [0, 1] and ep.actions == [1, STOP]
    assert ep.goal_distances[-1] == 0.0


def test_rollout_records_are_normalized_and_sample_policy_reproducible():
    w = B.world(3, n=8, degree=2.5)
    t = B.task(w, 2)
    agent = B.tiny_agent(9)
    a = rollout(agent, w, t, B.LEXICON, policy="sample", rng=np.random.default_rng(1))
    b = rollout(agent, w, t, B.LEXICON, policy="sample", rng=np.random.default_rng(1))
    assert a.to_json() == b.to_json()
    for rec in a.steps:
        assert abs(sum(rec["probs"]) - 1.0) <= 1e-9
        assert 0.0 < rec["sigma"] < 1.0
        assert rec["action"] in rec["candidates"]


def test_grounding_only_on_stop():
    w = B.world(3, n=8, degree=2.5)
    t = B.task(w, 2)
    agent = B.tiny_agent(9)
    ep = rollout(agent, w, t, B.LEXICON, policy="oracle")
    assert ep.actions[-1] == STOP and ep.predicted_object is not None
    assert 0 <= ep.predicted_object < len(B.LEXICON.category_names)
    ep = rollout(agent, w, t, B.LEXICON, policy="oracle", max_steps=1)
    assert STOP not in ep.actions and ep.predicted_object is None
