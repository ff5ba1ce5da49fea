"""Forward/backward pairs for the transformer building blocks.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache and returns the input gradient plus a
dict of parameter gradients keyed by full parameter name.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import softmax

LN_EPS = 1e-5
MASK_FILL = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


def linear_forward(x, p, name):
    w = p[name + ".w"]
    out = (x.reshape(-1, w.shape[0]) @ w).reshape(*x.shape[:-1], w.shape[1]) + p[name + ".b"]
    return out, (x, name, w)


def linear_backward(dout, cache):
    x, name, w = cache
    d_in, d_out = w.shape
    grads = {
        name + ".w": x.reshape(-1, d_in).T @ dout.reshape(-1, d_out),
        name + ".b": dout.reshape(-1, d_out).sum(axis=0),
    }
    dx = (dout.reshape(-1, d_out) @ w.T).reshape(*dout.shape[:-1], d_in)
    return dx, grads


def layernorm_forward(x, p, name):
    g = p[name + ".g"]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + p[name + ".b"], (xhat, inv, g, name)


def layernorm_backward(dout, cache):
    xhat, inv, g, name = cache
    d = xhat.shape[-1]
    grads = {
        name + ".g": (dout * xhat).reshape(-1, d).sum(axis=0),
        name + ".b": dout.reshape(-1, d).sum(axis=0),
    }
    dxhat = dout * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, grads


def gelu_forward(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def gelu_backward(dout, cache):
    x, x2, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dout * (0.5 * (1.0 + t + x * (1.0 - t * t) * du))


def tanh_forward(x):
    t = np.tanh(x)
    return t, t


def tanh_backward(dout, t):
    return dout * (1.0 - t * t)


def ffn_forward(x, p, name):
    h, c1 = linear_forward(x, p, name + ".fc1")
    a, cg = gelu_forward(h)
    out, c2 = linear_forward(a, p, name + ".fc2")
    return out, (c1, cg, c2)


def ffn_backward(dout, cache):
    c1, cg, c2 = cache
    da, grads = linear_backward(dout, c2)
    dh = gelu_backward(da, cg)
    dx, g1 = linear_backward(dh, c1)
    grads.update(g1)
    return dx, grads


def padding_bias(key_mask):
    """Additive attention bias (B,1,1,Lk) that blocks padded keys."""
    return np.where(key_mask[:, None, None, :], 0.0, MASK_FILL)


def causal_bias(key_mask):
    """Padding bias combined with a causal mask, shape (B,1,L,L)."""
    L = key_mask.shape[1]
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    allowed = key_mask[:, None, None, :] & ~future[None, None]
    return np.where(allowed, 0.0, MASK_FILL)


def attention_forward(xq, xkv, p, name, n_heads, bias):
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads
    q, cq = linear_forward(xq, p, name + ".q")
    k, ck = linear_forward(xkv, p, name + ".k")
    v, cv = linear_forward(xkv, p, name + ".v")
    qh = q.reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / math.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + bias
    attn = softmax(scores, axis=-1)
    oh = attn @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(B, Lq, d)
    out, co = linear_forward(o, p, name + ".o")
    return out, (cq, ck, cv, co, qh, kh, vh, attn, scale, n_heads)


def attention_backward(dout, cache):
    """Returns ``(d_xq, d_xkv, grads)``; self-attention callers add the two."""
    cq, ck, cv, co, qh, kh, vh, attn, scale, n_heads = cache
    B, Lq, d = dout.shape
    Lk = kh.shape[2]
    dh = d // n_heads
    do, grads = linear_backward(dout, co)
    doh = do.reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(B, Lq, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(B, Lk, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(B, Lk, d)
    dxq, gq = linear_backward(dq, cq)
    dxk, gk = linear_backward(dk, ck)
    dxv, gv = linear_backward(dv, cv)
    grads.update(gq)
    grads.update(gk)
    grads.update(gv)
    return dxq, dxk + dxv, grads


def embed_backward(dx, tokens, vocab_size):
    d = dx.shape[-1]
    g = np.zeros((vocab_size, d))
    np.add.at(g, tokens.reshape(-1), dx.reshape(-1, d))
    return g


def add_grads(total: dict, new: dict) -> dict:
    for k, v in new.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = v
    return total
