import logging
from typing import Dict, Optional, Tuple

import numpy as np

from utils.params import ParamStore

logger = logging.getLogger(__name__)

NEG_INF = -np.inf
LN_EPS = 1e-5


class LayerError(ValueError):
    """Raised for shape mismatches inside the transformer layers"""
    pass


def _add(grads: Dict[str, np.ndarray], name: str, value: np.ndarray):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# ---------------------------------------------------------------- elementwise

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax_backward(g: np.ndarray, logp: np.ndarray, axis: int = -1) -> np.ndarray:
    return g - np.exp(logp) * np.sum(g, axis=axis, keepdims=True)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal encodings, [length, dim]; even columns sin, odd columns cos."""
    position = np.arange(length)[:, np.newaxis]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(position * rates)
    table[:, 1::2] = np.cos(position * rates[:dim // 2])
    return table


def causal_mask(length: int) -> np.ndarray:
    """Additive mask, -inf above the diagonal."""
    return np.triu(np.full((length, length), NEG_INF), k=1)


# ---------------------------------------------------------------- affine / norm

def linear(x: np.ndarray, params: ParamStore, prefix: str) -> np.ndarray:
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


def linear_backward(g: np.ndarray, x: np.ndarray, params: ParamStore, prefix: str,
                    grads: Dict[str, np.ndarray]) -> np.ndarray:
    _add(grads, f"{prefix}.W", x.T @ g)
    _add(grads, f"{prefix}.b", g.sum(axis=0))
    return g @ params[f"{prefix}.W"].T


def layer_norm(x: np.ndarray, params: ParamStore, prefix: str) -> Tuple[np.ndarray, Dict]:
    mean = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * params[f"{prefix}.gamma"] + params[f"{prefix}.beta"], {'xhat': xhat, 'inv_std': inv_std}


def layer_norm_backward(g: np.ndarray, cache: Dict, params: ParamStore, prefix: str,
                        grads: Dict[str, np.ndarray]) -> np.ndarray:
    xhat, inv_std = cache['xhat'], cache['inv_std']
    _add(grads, f"{prefix}.gamma", np.sum(g * xhat, axis=0))
    _add(grads, f"{prefix}.beta", g.sum(axis=0))
    gxhat = g * params[f"{prefix}.gamma"]
    return inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                      - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))


# ---------------------------------------------------------------- attention

def scaled_dot_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                         mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    softmax(Q K^T / sqrt(d_k) + mask) V over the last two axes.

    Returns the context and the attention weights.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise LayerError(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(Q.shape[-1])
    if mask is not None:
        if mask.shape != scores.shape[-mask.ndim:]:
            raise LayerError(f"shape mismatch: mask {mask.shape} vs scores {scores.shape}")
        scores = scores + mask
    weights = softmax(scores, axis=-1)
    return weights @ V, weights


def scaled_dot_attention_backward(g: np.ndarray, Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                                  weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt(Q.shape[-1])
    gV = np.swapaxes(weights, -1, -2) @ g
    gW = g @ np.swapaxes(V, -1, -2)
    gS = weights * (gW - np.sum(weights * gW, axis=-1, keepdims=True))
    return gS @ K * scale, np.swapaxes(gS, -1, -2) @ Q * scale, gV


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def multi_head_attention(xq: np.ndarray, xkv: np.ndarray, params: ParamStore, prefix: str, heads: int,
                         mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Dict]:
    q = _split_heads(linear(xq, params, f"{prefix}.q"), heads)
    k = _split_heads(linear(xkv, params, f"{prefix}.k"), heads)
    v = _split_heads(linear(xkv, params, f"{prefix}.v"), heads)
    context, weights = scaled_dot_attention(q, k, v, mask)
    merged = _merge_heads(context)
    out = linear(merged, params, f"{prefix}.o")
    return out, {'xq': xq, 'xkv': xkv, 'q': q, 'k': k, 'v': v, 'weights': weights, 'merged': merged}


def multi_head_attention_backward(g: np.ndarray, cache: Dict, params: ParamStore, prefix: str, heads: int,
                                  grads: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (gradient to the query input, gradient to the key/value input)."""
    g_merged = linear_backward(g, cache['merged'], params, f"{prefix}.o", grads)
    g_context = _split_heads(g_merged, heads)
    gq, gk, gv = scaled_dot_attention_backward(g_context, cache['q'], cache['k'], cache['v'], cache['weights'])
    g_xq = linear_backward(_merge_heads(gq), cache['xq'], params, f"{prefix}.q", grads)
    g_xkv = linear_backward(_merge_heads(gk), cache['xkv'], params, f"{prefix}.k", grads)
    g_xkv = g_xkv + linear_backward(_merge_heads(gv), cache['xkv'], params, f"{prefix}.v", grads)
    return g_xq, g_xkv


def feed_forward(x: np.ndarray, params: ParamStore, prefix: str) -> Tuple[np.ndarray, Dict]:
    hidden = linear(x, params, f"{prefix}.fc1")
    active = np.maximum(hidden, 0.0)
    return linear(active, params, f"{prefix}.fc2"), {'x': x, 'hidden': hidden, 'active': active}


def feed_forward_backward(g: np.ndarray, cache: Dict, params: ParamStore, prefix: str,
                          grads: Dict[str, np.ndarray]) -> np.ndarray:
    g_active = linear_backward(g, cache['active'], params, f"{prefix}.fc2", grads)
    g_hidden = g_active * (cache['hidden'] > 0)
    return linear_backward(g_hidden, cache['x'], params, f"{prefix}.fc1", grads)


# ---------------------------------------------------------------- initialization

def add_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, rng: np.random.Generator):
    limit = np.sqrt(6.0 / (n_in + n_out))
    store.add(f"{prefix}.W", rng.uniform(-limit, limit, size=(n_in, n_out)))
    store.add(f"{prefix}.b", np.zeros(n_out))


def add_layer_norm(store: ParamStore, prefix: str, dim: int):
    store.add(f"{prefix}.gamma", np.ones(dim))
    store.add(f"{prefix}.beta", np.zeros(dim))


def add_attention(store: ParamStore, prefix: str, d_model: int, rng: np.random.Generator):
    for part in ('q', 'k', 'v', 'o'):
        add_linear(store, f"{prefix}.{part}", d_model, d_model, rng)


def add_feed_forward(store: ParamStore, prefix: str, d_model: int, d_ff: int, rng: np.random.Generator):
    add_linear(store, f"{prefix}.fc1", d_model, d_ff, rng)
    add_linear(store, f"{prefix}.fc2", d_ff, d_model, rng)
