"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Inputs are 2-D float64 arrays; reductions run along the last axis.
"""
import numpy as np

BACKEND = "python"


def softmax_forward(x, mask=None):
    """Row softmax. ``mask`` is a boolean array, True where a key is allowed.

    Masked entries come out as exactly 0. A row with no allowed entry falls
    back to uniform weights over the whole row.
    """
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    any_allowed = mask.any(axis=1, keepdims=True)
    m = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
    m = np.where(any_allowed, m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    y = e / np.where(any_allowed, e.sum(axis=1, keepdims=True), 1.0)
    n = x.shape[1]
    return np.where(any_allowed, y, 1.0 / n)


def softmax_backward(y, gy, mask=None):
    gx = y * (gy - (gy * y).sum(axis=1, keepdims=True))
    if mask is not None:
        # uniform fallback rows do not depend on the logits
        gx = np.where(mask.any(axis=1, keepdims=True), gx, 0.0)
    return gx


def layernorm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_backward(gy, xhat, rstd, gain):
    n = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    g = gy * gain
    gx = (rstd[:, None] / n) * (
        n * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True)
    )
    return gx, ggain, gbias
