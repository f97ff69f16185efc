import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semnav.asv import VisualEncoder, select_objects, view_arrays
from semnav.errors import ContractViolation
from semnav.numkernel import Tensor, grad_check
from semnav.simworld import ObjectRecord, ViewRecord, angle_feature

from . import oracle

WALL = 0
BLOCK = {WALL}
NULL = 9


def obj(label, area, nav=0):
    return ObjectRecord((0.5, 0.5, min(area, 1.0)), angle_feature(0.1, 0.0), label, nav, area)


def views(rng, n, d_v=6):
    return [ViewRecord(2 * math.pi * i / n, 0.0, rng.normal(size=d_v), int(i % 2)) for i in range(n)]


@pytest.fixture
def enc(rng):
    return VisualEncoder(d_v=6, d_model=8, d_obj=4, heads=2, obj_heads=2, layers=1, n_labels=NULL,
                         n_views=8, rng=rng)


def grid_for(rng, n_views=8, M=3):
    per_view = [[obj(int(rng.integers(1, NULL)), float(rng.uniform(0.01, 0.5)), int(rng.integers(2)))
                 for _ in range(int(rng.integers(0, 5)))] for _ in range(n_views)]
    return select_objects(per_view, M, BLOCK, NULL)


def test_angle_feature_examples():
    np.testing.assert_array_equal(angle_feature(0.0, 0.0), [0.0, 1.0, 0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-2, 2))
def test_angle_feature_pythagorean(h, e):
    r = angle_feature(h, e)
    assert abs(r[0] ** 2 + r[1] ** 2 - 1) <= 1e-12 and abs(r[2] ** 2 + r[3] ** 2 - 1) <= 1e-12


def test_select_objects_drops_blocklist_and_keeps_largest():
    objs = [obj(1, 0.2), obj(WALL, 0.9), obj(2, 0.05), obj(3, 0.4), obj(4, 0.3)]
    g = select_objects([objs], 3, BLOCK, NULL)
    oracle_order = sorted([o for o in objs if o.label not in BLOCK], key=lambda o: -o.raw_area)[:3]
    assert list(g.label[0]) == [o.label for o in oracle_order] == [3, 4, 1]
    assert g.mask.all()


def test_select_objects_pads_with_null():
    g = select_objects([[obj(2, 0.3, nav=1)]], 3, BLOCK, NULL)
    assert g.mask[0].tolist() == [True, False, False]
    assert g.label[0].tolist() == [2, NULL, NULL]
    np.testing.assert_array_equal(g.geometry[0, 1:], 0.0)
    np.testing.assert_array_equal(g.navigable[0, 1:], 0.0)


def test_select_objects_area_tie_prefers_lower_index():
    g = select_objects([[obj(5, 0.2), obj(6, 0.2), obj(7, 0.2)]], 2, BLOCK, NULL)
    assert g.label[0].tolist() == [5, 6]


def test_select_objects_requires_positive_m():
    with pytest.raises(ContractViolation):
        select_objects([[]], 0, BLOCK, NULL)


def test_embed_views_recomputation(enc, rng):
    vs = views(rng, 8)
    feats, scal = view_arrays(vs)
    assert scal[0].tolist() == [0.0, 1.0, 0.0, 1.0, 1.0, 0.0]
    want = oracle.layernorm(enc.view_ln, feats @ enc.view_proj.weight.data + oracle.linear(enc.view_scalar_proj, scal))
    np.testing.assert_allclose(enc.embed_views(vs).data, want, rtol=0, atol=1e-12)


def test_embed_views_zero_features_linearity(enc, rng):
    vs = [ViewRecord(v.heading, v.elevation, np.zeros(6), v.navigable) for v in views(rng, 8)]
    _, scal = view_arrays(vs)
    want = oracle.layernorm(enc.view_ln, oracle.linear(enc.view_scalar_proj, scal))
    np.testing.assert_allclose(enc.embed_views(vs).data, want, rtol=0, atol=1e-12)


def test_embed_views_wrong_count(enc, rng):
    with pytest.raises(ContractViolation):
        enc.embed_views(views(rng, 7))


def test_embed_objects_recomputation_and_null_row(enc, rng):
    g = grid_for(rng)
    got = enc.embed_objects(g).data
    scal = np.concatenate([g.geometry, g.angle, g.navigable[..., None]], axis=-1)
    want = oracle.layernorm(enc.obj_ln, oracle.linear(enc.obj_scalar_proj, scal) + enc.label_embedding.data[g.label])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    assert got.shape == (8, 3, 4)
    pads = got[~g.mask]
    if len(pads) > 1:
        np.testing.assert_array_equal(pads, np.broadcast_to(pads[0], pads.shape))


def test_embed_objects_m1_shape(enc, rng):
    assert enc.embed_objects(grid_for(rng, M=1)).shape == (8, 1, 4)


def test_asv_forward_recomputation(enc, rng):
    g = grid_for(rng)
    g.mask[3] = False  # one fully padded view
    E_V, E_O = rng.normal(size=(8, 8)), rng.normal(size=(8, 3, 4))
    out = enc.encode(Tensor(E_V), Tensor(E_O), g.mask, g)
    want, mean = oracle.asv_encode(enc, E_V, E_O, g.mask)
    np.testing.assert_allclose(out.S_f.data, want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.S_fO_mean.data, mean, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out.S_fO_mean.data[3], 0.0)
    assert out.S_f.shape[0] == 8


def test_asv_single_object_mean_is_the_row(rng):
    enc = VisualEncoder(6, 8, 4, 2, 2, 0, NULL, 8, rng)
    E_O = rng.normal(size=(8, 1, 4))
    mask = np.ones((8, 1), dtype=bool)
    out = enc.encode(Tensor(rng.normal(size=(8, 8))), Tensor(E_O), mask)
    np.testing.assert_allclose(out.S_fO_mean.data, E_O[:, 0], rtol=0, atol=1e-15)


def test_asv_zero_layers_fuses_raw_embeddings(rng):
    enc = VisualEncoder(6, 8, 4, 2, 2, 0, NULL, 8, rng)
    E_V, E_O = rng.normal(size=(8, 8)), rng.normal(size=(8, 2, 4))
    mask = np.ones((8, 2), dtype=bool)
    want = oracle.layernorm(enc.fuse_ln, oracle.linear(enc.fuse_proj, np.concatenate([E_V, E_O.mean(axis=1)], 1)))
    np.testing.assert_allclose(enc.encode(Tensor(E_V), Tensor(E_O), mask).S_f.data, want, rtol=0, atol=1e-12)


def test_object_attention_permutation_equivariance(enc, rng):
    g = grid_for(rng)
    E_O = rng.normal(size=(24, 4))
    mask = g.mask.reshape(-1)
    base = enc.trans_o(Tensor(E_O), mask).data
    perm = rng.permutation(24)
    permuted = enc.trans_o(Tensor(E_O[perm]), mask[perm]).data
    np.testing.assert_allclose(permuted[mask[perm]], base[perm][mask[perm]], rtol=0, atol=1e-12)


def test_object_branch_off_zeroes_object_half(enc, rng):
    E_V = rng.normal(size=(8, 8))
    out = enc.encode(Tensor(E_V))
    S_V = oracle.encoder(enc.trans_v, E_V)
    want = oracle.layernorm(enc.fuse_ln, oracle.linear(enc.fuse_proj, np.concatenate([S_V, np.zeros((8, 4))], 1)))
    np.testing.assert_allclose(out.S_f.data, want, rtol=0, atol=1e-12)
    assert out.S_fO_mean is None


def test_asv_gradcheck(rng):
    enc = VisualEncoder(3, 4, 4, 2, 2, 1, 4, 4, rng)
    vs = views(rng, 4, d_v=3)
    probe = Tensor(rng.normal(size=(4, 4)))
    per_view = [[obj(1, 0.3), obj(2, 0.1)], [], [obj(3, 0.2)], [obj(WALL, 0.5), obj(2, 0.25)]]

    def loss():
        g = select_objects(per_view, 2, BLOCK, 4)
        out = enc.encode(enc.embed_views(vs), enc.embed_objects(g), g.mask, g)
        return (out.S_f * probe).mean()

    report = grad_check(enc.named_parameters(), loss, tol=1e-4)
    assert report.passed, report.summary()
