import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semnav.errors import ConfigurationError, ContractViolation
from semnav.semparser import load_lexicon, parse, tokenize
from semnav.simworld import (
    BLOCKLIST,
    Episode,
    Task,
    World,
    episode_metrics,
    evaluate,
    generate_task,
    generate_world,
    path_length,
    shortest_path,
    turn_phrase,
    view_layout,
    wrap_angle,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def lex():
    return load_lexicon()


@pytest.fixture(scope="module")
def world(lex):
    return generate_world(11, 20, 3.0, lex.category_names, n_views=12, d_v=8)


def bfs_component(world, src=0):
    seen, todo = {src}, [src]
    while todo:
        u = todo.pop()
        for v in world.neighbors(u):
            if v not in seen:
                seen.add(v), todo.append(v)
    return seen


def brute_force_shortest(world, a, b):
    """Enumerate every simple path; return the minimal length."""
    best = math.inf
    others = [u for u in range(world.n_nodes) if u not in (a, b)]
    for k in range(len(others) + 1):
        for mid in itertools.permutations(others, k):
            path = (a,) + mid + (b,)
            if all(v in world.neighbors(u) for u, v in zip(path, path[1:])):
                best = min(best, path_length(world, path))
    return best


# ---------------------------------------------------------------- worlds

def test_two_node_world(lex):
    w = generate_world(0, 2, 1.0, lex.category_names, n_views=12, d_v=8)
    assert w.edges() == [(0, 1)]
    for u in range(2):
        assert any(w.objects[u])
        assert w.features[u].shape == (12, 8)
    assert shortest_path(w, 0, 1) == ([0, 1], pytest.approx(w.edge_length(0, 1)))


def test_same_seed_is_bitwise_identical(lex):
    a = generate_world(5, 12, 2.5, lex.category_names, n_views=12, d_v=8)
    b = generate_world(5, 12, 2.5, lex.category_names, n_views=12, d_v=8)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert a.features.tobytes() == b.features.tobytes()


def test_connected_positive_weights_and_candidate_views(world):
    assert bfs_component(world) == set(range(world.n_nodes))
    assert len(world.edges()) == round(3.0 * 20 / 2)
    for u, v in world.edges():
        assert world.edge_length(u, v) > 0
    for u in range(world.n_nodes):
        for v in world.neighbors(u):
            b = world.bearing(u, v)
            i = world.candidate_view(u, v)
            gap = abs(wrap_angle(world.layout[i][0] - b))
            assert all(gap <= abs(wrap_angle(world.layout[j][0] - b)) for j in world.horizontal)


@pytest.mark.parametrize("seed", range(5))
def test_connectivity_many_seeds(lex, seed):
    w = generate_world(seed, 20, 3.0, lex.category_names, n_views=12, d_v=4)
    assert bfs_component(w) == set(range(20))


def test_infeasible_degree(lex):
    with pytest.raises(ConfigurationError):
        generate_world(0, 5, 4.5, lex.category_names)
    with pytest.raises(ConfigurationError):
        generate_world(0, 5, 0.5, lex.category_names)
    with pytest.raises(ConfigurationError):
        generate_world(0, 1, 1.0, lex.category_names)


def test_view_layouts():
    lay = view_layout(36)
    assert len(lay) == 36 and sorted({e for _, e in lay}) == [-math.pi / 6, 0.0, math.pi / 6]
    assert {e for _, e in view_layout(8)} == {0.0}


def test_observation_is_relative_and_flags_candidates(world):
    obs = world.observe(3, 0.7)
    assert len(obs.views) == 12
    for v, i in obs.candidates:
        assert obs.views[i].navigable == 1
        assert i == world.candidate_view(3, v)
    h0 = world.layout[0][0]
    assert obs.views[0].heading == pytest.approx(wrap_angle(h0 - 0.7))


def test_signature_object_visible_toward_each_neighbor(world):
    for u in range(world.n_nodes):
        for v in world.neighbors(u):
            view = world.objects[u][world.candidate_view(u, v)]
            assert any(o.label == world.signatures[v] and o.navigable for o in view)
    blocked = {world.category_names.index(b) for b in BLOCKLIST}
    assert not blocked & set(world.signatures)


def test_object_geometry_in_unit_range(world):
    for node in world.objects:
        for view in node:
            for o in view:
                assert all(0.0 <= g <= 1.0 for g in o.geometry)
                assert 0 <= o.label < len(world.category_names)


def test_world_json_round_trip(world):
    back = World.from_json(json.loads(json.dumps(world.to_json())))
    assert back.to_json() == world.to_json()
    assert back.features.tobytes() == world.features.tobytes()


# ---------------------------------------------------------------- paths

def test_shortest_path_trivial(world):
    assert shortest_path(world, 4, 4) == ([4], 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_shortest_path_matches_enumeration(lex, seed):
    w = generate_world(seed, 8, 2.5, lex.category_names, n_views=12, d_v=4)
    for a, b in itertools.combinations(range(8), 2):
        path, length = shortest_path(w, a, b)
        assert path[0] == a and path[-1] == b
        assert length == pytest.approx(path_length(w, path), abs=1e-12)
        assert length == pytest.approx(brute_force_shortest(w, a, b), abs=1e-12)


def test_shortest_path_symmetric(world):
    for a, b in itertools.combinations(range(world.n_nodes), 2):
        assert shortest_path(world, a, b)[1] == pytest.approx(shortest_path(world, b, a)[1], abs=1e-12)
        assert world.distance(a, b) == pytest.approx(shortest_path(world, a, b)[1], abs=1e-12)


# ---------------------------------------------------------------- tasks

def test_turn_phrase_rule():
    assert turn_phrase(math.radians(10)) == "go straight"
    assert turn_phrase(math.radians(-29)) == "go straight"
    assert turn_phrase(math.radians(45)) == "turn left"
    assert turn_phrase(math.radians(-90)) == "turn right"
    assert turn_phrase(math.radians(170)) == "turn around"


def test_task_invariants(world, lex):
    for s in range(40):
        t = generate_task(world, s, lex)
        assert t.start != t.goal
        assert t.gold_path == shortest_path(world, t.start, t.goal)[0]
        assert t.gold_length == pytest.approx(brute_force_shortest(world, t.start, t.goal)
                                              if world.n_nodes <= 8 else world.distance(t.start, t.goal))
        mentioned = {c for _, _, c in t.landmark_spans}
        assert mentioned & {world.signatures[u] for u in t.gold_path}
        assert t.goal_object == world.signatures[t.goal]
        tokens = tokenize(t.instruction)
        first_turn = turn_phrase(wrap_angle(world.bearing(t.gold_path[0], t.gold_path[1]) - t.start_heading))
        assert tokens[:len(first_turn.split())] == first_turn.split()


def test_one_hop_straight_template(lex):
    w = generate_world(0, 2, 1.0, lex.category_names, n_views=12, d_v=4)
    for s in range(30):
        t = generate_task(w, s, lex)
        delta = wrap_angle(w.bearing(t.start, t.goal) - t.start_heading)
        tokens = tokenize(t.instruction)
        if abs(math.degrees(delta)) < 30:
            assert tokens[:4] == ["go", "straight", "to", "the"] or tokens[:4] == ["go", "straight", "toward", "the"]
        elif 30 < math.degrees(delta) < 150:
            assert tokens[:2] == ["turn", "left"]


def test_gold_spans_match_parser(world, lex):
    for s in range(200):
        t = generate_task(world, s, lex)
        p = parse(tokenize(t.instruction), lex)
        assert list(p.direction_spans) == [tuple(x) for x in t.direction_spans]
        assert list(p.landmark_spans) == [tuple(x) for x in t.landmark_spans]


def test_task_json_round_trip(world, lex):
    t = generate_task(world, 3, lex)
    assert Task.from_json(json.loads(json.dumps(t.to_json()))) == t
    assert generate_task(world, 3, lex) == t


# ---------------------------------------------------------------- metrics

def make_episode(gold_length, traversed_length, goal_distances, goal_object=None, predicted_object=None):
    n = len(goal_distances)
    return Episode(0, 0, 0, 1, list(range(n)), traversed_length, gold_length, list(goal_distances),
                   goal_object, predicted_object)


def test_metrics_perfect_episode():
    m = evaluate([make_episode(2.0, 2.0, [2.0, 1.0, 0.0])])
    assert (m["NE"], m["SR"], m["OSR"], m["SPL"]) == (0.0, 1.0, 1.0, 1.0)
    assert m["RGS"] is None and m["RGSPL"] is None


def test_metrics_spl_half_for_double_length():
    assert episode_metrics(make_episode(1.5, 3.0, [1.5, 0.2]), 1.0)["SPL"] == 0.5


def test_metrics_three_episode_fixture():
    fx = json.loads((FIXTURES / "metrics_three_episodes.json").read_text())
    eps = [make_episode(e["gold_length"], e["traversed_length"], e["goal_distances"], e["goal_object"],
                        e["predicted_object"]) for e in fx["episodes"]]
    for ep, want in zip(eps, fx["per_episode"]):
        got = episode_metrics(ep, fx["threshold"])
        for k, v in want.items():
            assert got[k] == pytest.approx(v, abs=1e-12)
    got = evaluate(eps, fx["threshold"])
    for k, v in fx["expected"].items():
        assert abs(got[k] - v) <= 1e-12, k
    assert got["episodes"] == 3


def test_metrics_empty_is_contract_violation():
    with pytest.raises(ContractViolation):
        evaluate([])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.floats(0.01, 10), st.floats(0, 20),
       st.floats(0.1, 3))
def test_metric_invariants(dists, gold, walked, threshold):
    m = episode_metrics(make_episode(gold, walked, dists), threshold)
    assert m["SPL"] <= m["SR"]
    assert m["OSR"] >= m["SR"]
    assert (m["NE"] <= threshold) == (m["SR"] == 1.0)
