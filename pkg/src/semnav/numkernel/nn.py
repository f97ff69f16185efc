"""Parameters, modules and the transformer building blocks."""
import logging
import math

import numpy as np

from ..errors import ConfigurationError, ContractViolation
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

LN_EPS = 1e-5


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


def xavier_uniform(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Module:
    """Container that records child modules and parameters in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ContractViolation(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractViolation(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(xavier_uniform(rng, (d_in, d_out)))
        if bias:
            self.bias = Parameter(np.zeros(d_out))
        else:
            self.bias = None

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ContractViolation(f"Linear expects last axis {self.d_in}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=LN_EPS):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x):
        return T.layernorm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, d_in, d_hidden, d_out, rng):
        super().__init__()
        self.d_in = d_in
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ContractViolation(f"FFN expects last axis {self.d_in}, got {x.shape}")
        return self.fc2(T.relu(self.fc1(x)))


_warned_all_masked = False


def _note_all_masked(mask):
    global _warned_all_masked
    if not _warned_all_masked and not mask.any(axis=-1).all():
        _warned_all_masked = True
        log.warning("attention row with every key masked; using uniform weights over all keys")


class MultiHeadAttention(Module):
    """Scaled dot-product attention split over ``heads``.

    ``mask`` is boolean, True where a key may be attended, shaped ``(Lk,)`` or
    ``(Lq, Lk)``.
    """

    def __init__(self, d_model, heads, rng, d_kv=None):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ConfigurationError(f"d_model={d_model} not divisible by heads={heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.d_model, self.heads, self.d_head = d_model, heads, d_model // heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_kv, d_model, rng)
        self.v = Linear(d_kv, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.last_weights = None

    def _split(self, x):
        n = x.shape[0]
        return T.transpose(x.reshape(n, self.heads, self.d_head), (1, 0, 2))

    def __call__(self, query, key, value, mask=None, keep_weights=False):
        if key.shape[0] != value.shape[0]:
            raise ContractViolation(f"key/value lengths differ: {key.shape[0]} vs {value.shape[0]}")
        lq, lk = query.shape[0], key.shape[0]
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = (q @ T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.d_head))
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), (lq, lk))
            _note_all_masked(mask)
        attn = T.softmax(scores, axis=-1, mask=mask)
        if keep_weights:
            self.last_weights = attn.data
        ctx = T.transpose(attn @ v, (1, 0, 2)).reshape(lq, self.d_model)
        return self.o(ctx)


class TransformerLayer(Module):
    """Post-norm encoder block: self-attention and FFN, each with residual + LN."""

    def __init__(self, d_model, heads, rng, ffn_mult=4):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_mult * d_model, d_model, rng)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x, mask=None):
        x = self.ln1(x + self.attn(x, x, x, mask))
        return self.ln2(x + self.ffn(x))


class TransformerEncoder(Module):
    def __init__(self, d_model, heads, layers, rng):
        super().__init__()
        self.layers = ModuleList(TransformerLayer(d_model, heads, rng) for _ in range(layers))

    def __call__(self, x, mask=None):
        for layer in self.layers:
            x = layer(x, mask)
        return x
