"""Inference kernels for the cached decoder step.

The kernels are plain numpy code that numba can compile.  They are
compiled with ``numba.njit`` unless numba is missing or the environment
variable ``RESETOX_DISABLE_NUMBA`` is set to a truthy value, in which case
the identical source runs under CPython/numpy.  Only the no-gradient decode
path uses them; everything that needs derivatives goes through the tape.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("RESETOX_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:  # pragma: no cover - exercised implicitly by whichever path is active
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


@jit
def layer_norm_vec(x, gain, bias, eps):
    mu = x.mean()
    xc = x - mu
    var = (xc * xc).mean()
    return xc / np.sqrt(var + eps) * gain + bias


@jit
def softmax_vec(z):
    e = np.exp(z - z.max())
    return e / e.sum()


@jit
def cached_attention(q, keys, values, n_heads):
    """Attend one query row over ``keys``/``values`` of shape (T, D), per head."""
    d_model = q.shape[0]
    d_k = d_model // n_heads
    out = np.empty(d_model)
    scale = 1.0 / np.sqrt(d_k)
    for h in range(n_heads):
        lo = h * d_k
        hi = lo + d_k
        scores = np.dot(np.ascontiguousarray(keys[:, lo:hi]), q[lo:hi]) * scale
        w = softmax_vec(scores)
        out[lo:hi] = np.dot(w, np.ascontiguousarray(values[:, lo:hi]))
    return out


@jit
def decoder_layer_step(
    x, self_k, self_v, cross_k, cross_v, n_heads,
    ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
    ln2_g, ln2_b, cwq, cbq, cwo, cbo,
    ln3_g, ln3_b, w1, b1, w2, b2,
):
    """One pre-LN decoder block for a single new position.

    Returns the block output and the self-attention caches extended by the
    new position's key and value rows.
    """
    eps = 1e-5
    h = layer_norm_vec(x, ln1_g, ln1_b, eps)
    q = np.dot(h, wq) + bq
    k = np.dot(h, wk) + bk
    v = np.dot(h, wv) + bv
    t = self_k.shape[0]
    d = x.shape[0]
    new_k = np.empty((t + 1, d))
    new_v = np.empty((t + 1, d))
    new_k[:t] = self_k
    new_v[:t] = self_v
    new_k[t] = k
    new_v[t] = v
    x = x + np.dot(cached_attention(q, new_k, new_v, n_heads), wo) + bo

    h = layer_norm_vec(x, ln2_g, ln2_b, eps)
    q = np.dot(h, cwq) + cbq
    x = x + np.dot(cached_attention(q, cross_k, cross_v, n_heads), cwo) + cbo

    h = layer_norm_vec(x, ln3_g, ln3_b, eps)
    f = np.maximum(np.dot(h, w1) + b1, 0.0)
    x = x + np.dot(f, w2) + b2
    return x, new_k, new_v


@jit
def output_distribution(x, ln_g, ln_b, w_out, b_out):
    h = layer_norm_vec(x, ln_g, ln_b, 1e-5)
    logits = np.dot(h, w_out) + b_out
    return logits, softmax_vec(logits)
