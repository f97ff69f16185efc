"""Panorama encoder: per-view appearance features plus cross-image object features."""
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numkernel import LayerNorm, Linear, Module, Parameter, TransformerEncoder
from .numkernel import tensor as T
from .numkernel.nn import xavier_uniform


@dataclass
class ObjectGrid:
    geometry: np.ndarray  # (V, M, 3)
    angle: np.ndarray  # (V, M, 4)
    label: np.ndarray  # (V, M) int; null label for padding
    navigable: np.ndarray  # (V, M)
    mask: np.ndarray  # (V, M) bool, True for real objects

    @property
    def shape(self):
        return self.mask.shape


def select_objects(per_view, M, blocklist, null_label):
    """Drop blocklisted labels, keep the ``M`` largest objects per view.

    Ties on area keep the lower original index first. Short views are padded
    with null objects (zero geometry and angle, ``null_label``, not navigable).
    """
    if M < 1:
        raise ContractViolation("M must be at least 1")
    V = len(per_view)
    grid = ObjectGrid(np.zeros((V, M, 3)), np.zeros((V, M, 4)), np.full((V, M), null_label, dtype=int),
                      np.zeros((V, M)), np.zeros((V, M), dtype=bool))
    for v, objs in enumerate(per_view):
        keep = [(i, o) for i, o in enumerate(objs) if o.label not in blocklist]
        keep.sort(key=lambda io: (-io[1].raw_area, io[0]))
        for m, (_, o) in enumerate(keep[:M]):
            grid.geometry[v, m] = o.geometry
            grid.angle[v, m] = o.angle
            grid.label[v, m] = o.label
            grid.navigable[v, m] = o.navigable
            grid.mask[v, m] = True
    return grid


def view_arrays(views):
    feats = np.stack([v.feature for v in views])
    scalars = np.stack([np.concatenate([v.angle, [v.token_type, v.navigable]]) for v in views])
    return feats, scalars


@dataclass
class VisualEncoding:
    S_f: T.Tensor  # (V, d_m)
    S_fV: T.Tensor  # (V, d_m)
    S_fO_mean: T.Tensor  # (V, d_o), None when the object branch is off
    object_tokens: T.Tensor = None  # (V, M, d_o) after the object transformer
    grid: ObjectGrid = None


class VisualEncoder(Module):
    def __init__(self, d_v, d_model, d_obj, heads, obj_heads, layers, n_labels, n_views, rng):
        super().__init__()
        self.n_views, self.d_obj = n_views, d_obj
        self.null_label = n_labels
        # view embedding
        self.view_proj = Linear(d_v, d_model, rng, bias=False)
        self.view_scalar_proj = Linear(6, d_model, rng)
        self.view_ln = LayerNorm(d_model)
        # object embedding: 3 geometry + 4 angle + 1 navigable scalars, plus a label table
        self.obj_scalar_proj = Linear(8, d_obj, rng)
        self.label_embedding = Parameter(xavier_uniform(rng, (n_labels + 1, d_obj)))
        self.obj_ln = LayerNorm(d_obj)
        self.trans_v = TransformerEncoder(d_model, heads, layers, rng)
        self.trans_o = TransformerEncoder(d_obj, obj_heads, layers, rng)
        self.fuse_proj = Linear(d_model + d_obj, d_model, rng)
        self.fuse_ln = LayerNorm(d_model)

    def embed_views(self, views):
        if len(views) != self.n_views:
            raise ContractViolation(f"expected {self.n_views} views, got {len(views)}")
        feats, scalars = view_arrays(views)
        e = self.view_proj(T.Tensor(feats)) + self.view_scalar_proj(T.Tensor(scalars))
        return self.view_ln(e)

    def embed_objects(self, grid):
        scal = np.concatenate([grid.geometry, grid.angle, grid.navigable[..., None]], axis=-1)
        e = self.obj_scalar_proj(T.Tensor(scal)) + self.label_embedding[grid.label]
        return self.obj_ln(e)

    def encode(self, E_V, E_O=None, mask=None, grid=None):
        S_V = self.trans_v(E_V)
        if E_O is None:
            fused = T.concat([S_V, T.Tensor(np.zeros((S_V.shape[0], self.d_obj)))], axis=1)
            return VisualEncoding(self.fuse_ln(self.fuse_proj(fused)), S_V, None)
        V, M, d_o = E_O.shape
        flat_mask = mask.reshape(-1)
        S_O = self.trans_o(E_O.reshape(V * M, d_o), flat_mask).reshape(V, M, d_o)
        count = mask.sum(axis=1, keepdims=True)
        w = np.where(mask, 1.0 / np.maximum(count, 1), 0.0)[..., None]
        S_O_mean = (S_O * T.Tensor(w)).sum(axis=1)
        S_f = self.fuse_ln(self.fuse_proj(T.concat([S_V, S_O_mean], axis=1)))
        return VisualEncoding(S_f, S_V, S_O_mean, S_O, grid)

    def __call__(self, observation, M, blocklist, use_objects=True):
        E_V = self.embed_views(observation.views)
        if not use_objects:
            return self.encode(E_V)
        grid = select_objects(observation.objects, M, blocklist, self.null_label)
        return self.encode(E_V, self.embed_objects(grid), grid.mask, grid)
