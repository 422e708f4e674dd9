"""Forward and backward passes for the encoder building blocks.

Activations are (..., n, d) arrays; any leading batch shape is allowed.
Per-head projections are stored column-stacked: head ``h`` of ``w_q`` owns
columns ``h*d_head:(h+1)*d_head``. Score stacks are (..., heads, n, n).
"""

import math

import numpy as np

from .. import _kernels
from ..numerics import ShapeError



def _split_heads(x, d_head):
    # (..., n, h*dh) -> (..., h, n, dh)
    *lead, n, width = x.shape
    return np.moveaxis(x.reshape(*lead, n, width // d_head, d_head), -2, -3)


def _merge_heads(x):
    # (..., h, n, dh) -> (..., n, h*dh)
    x = np.moveaxis(x, -3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _check_proj(z, w, name):
    if w.shape[0] != z.shape[-1]:
        raise ShapeError(f"{name} has {w.shape[0]} rows but the input width is {z.shape[-1]}")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def multihead_scores(z, w_q, w_k, d_head):
    """Row-stochastic scores for every head stacked in ``w_q``/``w_k``."""
    _check_proj(z, w_q, "w_q")
    _check_proj(z, w_k, "w_k")
    if w_q.shape != w_k.shape or w_q.shape[1] % d_head:
        raise ShapeError(f"w_q {w_q.shape} and w_k {w_k.shape} do not split into heads of width {d_head}")
    q = _split_heads(z @ w_q, d_head)
    k = _split_heads(z @ w_k, d_head)
    scale = 1.0 / math.sqrt(d_head)
    return _kernels.softmax_last((q @ np.swapaxes(k, -1, -2)) * scale), q, k


def attention_scores(z, w_q, w_k, d_head):
    """Scores of a single head: softmax over keys of (z w_q)(z w_k)^T / sqrt(d_head)."""
    if w_q.shape[1] != d_head:
        raise ShapeError(f"single-head w_q must have {d_head} columns, got {w_q.shape[1]}")
    return multihead_scores(z, w_q, w_k, d_head)[0][..., 0, :, :]


def attention_apply(a, z, w_v, w_o):
    """Combine per-head values with scores ``a`` (..., H, n, n), then project by ``w_o``."""
    _check_proj(z, w_v, "w_v")
    heads = a.shape[-3]
    if w_v.shape[1] % heads:
        raise ShapeError(f"w_v width {w_v.shape[1]} does not split over {heads} heads")
    if w_o.shape[0] != w_v.shape[1]:
        raise ShapeError(f"w_o has {w_o.shape[0]} rows, expected {w_v.shape[1]}")
    v = _split_heads(z @ w_v, w_v.shape[1] // heads)
    return _merge_heads(a @ v) @ w_o


# ---------------------------------------------------------------------------
# layer norm / activations
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps):
    return _kernels.layer_norm_forward(x, gamma, beta, eps)


def layer_norm_backward(dy, cache, gamma):
    return _kernels.layer_norm_backward(dy, cache, gamma)


def activate(u, kind):
    if kind == "relu":
        return np.maximum(u, 0.0)
    return _kernels.gelu(u)


def activate_grad(u, kind):
    if kind == "relu":
        return (u > 0).astype(np.float64)
    return _kernels.gelu_grad(u)


def feedforward(y, w1, w2, activation):
    """Tokenwise ``act(y w1) w2`` with no residual."""
    _check_proj(y, w1, "w1")
    if w2.shape[0] != w1.shape[1]:
        raise ShapeError(f"w2 has {w2.shape[0]} rows, expected {w1.shape[1]}")
    return activate(y @ w1, activation) @ w2


# ---------------------------------------------------------------------------
# pre-norm blocks with caches
# ---------------------------------------------------------------------------

def attention_block_forward(x, p, prefix, exact, r_prev, d_head, eps):
    """x + MHA(LN(x)) where heads ``exact:`` copy ``r_prev[:H-exact]`` verbatim.

    Returns ``(out, scores, cache)``; ``scores`` (..., H, n, n) doubles as the
    reuse buffer handed to the next layer.
    """
    w_v = p[prefix + "attn.wv"]
    w_o = p[prefix + "attn.wo"]
    heads = w_v.shape[1] // d_head
    gamma = p[prefix + "ln1.g"]
    z, ln_cache = layer_norm(x, gamma, p[prefix + "ln1.b"], eps)
    n = x.shape[-2]
    scores = np.empty(x.shape[:-2] + (heads, n, n))
    q = k = None
    if exact:
        a_exact, q, k = multihead_scores(z, p[prefix + "attn.wq"], p[prefix + "attn.wk"], d_head)
        scores[..., :exact, :, :] = a_exact
    if exact < heads:
        if r_prev is None:
            raise ShapeError("reuse heads need the previous layer's score buffer")
        if r_prev.shape != scores.shape:
            raise ShapeError(f"reuse buffer shape {r_prev.shape} does not match {scores.shape}")
        scores[..., exact:, :, :] = r_prev[..., : heads - exact, :, :]
    v = _split_heads(z @ w_v, d_head)
    o = _merge_heads(scores @ v)
    out = x + o @ w_o
    cache = dict(z=z, ln=ln_cache, q=q, k=k, v=v, o=o, scores=scores, exact=exact)
    return out, scores, cache


def attention_block_backward(dout, dscores_ext, cache, p, prefix, d_head, detach_reused, grads):
    """Backprop through :func:`attention_block_forward`.

    ``dscores_ext`` is the gradient reaching this layer's score buffer from
    later reuse layers (or ``None``). Returns ``(dx, dr_prev)``.
    """
    z, v, o, scores, exact = cache["z"], cache["v"], cache["o"], cache["scores"], cache["exact"]
    w_v = p[prefix + "attn.wv"]
    w_o = p[prefix + "attn.wo"]
    heads = scores.shape[-3]

    grads[prefix + "attn.wo"] = _flat(o).T @ _flat(dout)
    do = _split_heads(dout @ w_o.T, d_head)
    dscores = do @ np.swapaxes(v, -1, -2)
    if dscores_ext is not None:
        dscores = dscores + dscores_ext
    dv = _merge_heads(np.swapaxes(scores, -1, -2) @ do)
    grads[prefix + "attn.wv"] = _flat(z).T @ _flat(dv)
    dz = dv @ w_v.T

    if exact:
        q, k = cache["q"], cache["k"]
        w_q, w_k = p[prefix + "attn.wq"], p[prefix + "attn.wk"]
        dlogits = _kernels.softmax_last_backward(scores[..., :exact, :, :], dscores[..., :exact, :, :])
        dlogits *= 1.0 / math.sqrt(d_head)
        dq = _merge_heads(dlogits @ k)
        dk = _merge_heads(np.swapaxes(dlogits, -1, -2) @ q)
        grads[prefix + "attn.wq"] = _flat(z).T @ _flat(dq)
        grads[prefix + "attn.wk"] = _flat(z).T @ _flat(dk)
        dz = dz + dq @ w_q.T + dk @ w_k.T

    dr_prev = None
    if exact < heads and not detach_reused:
        dr_prev = np.zeros_like(scores)
        dr_prev[..., : heads - exact, :, :] = dscores[..., exact:, :, :]

    dx, dg, db = layer_norm_backward(dz, cache["ln"], p[prefix + "ln1.g"])
    grads[prefix + "ln1.g"] = dg.reshape(1, -1)
    grads[prefix + "ln1.b"] = db.reshape(1, -1)
    return dout + dx, dr_prev


def ff_block_forward(x, p, prefix, activation, eps):
    """x + FF(LN(x))."""
    z, ln_cache = layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"], eps)
    u = z @ p[prefix + "ff.w1"]
    h = activate(u, activation)
    out = x + h @ p[prefix + "ff.w2"]
    return out, dict(z=z, ln=ln_cache, u=u, h=h)


def ff_block_backward(dout, cache, p, prefix, activation, grads):
    w1, w2 = p[prefix + "ff.w1"], p[prefix + "ff.w2"]
    grads[prefix + "ff.w2"] = _flat(cache["h"]).T @ _flat(dout)
    du = (dout @ w2.T) * activate_grad(cache["u"], activation)
    grads[prefix + "ff.w1"] = _flat(cache["z"]).T @ _flat(du)
    dz = du @ w1.T
    dx, dg, db = layer_norm_backward(dz, cache["ln"], p[prefix + "ln2.g"])
    grads[prefix + "ln2.g"] = dg.reshape(1, -1)
    grads[prefix + "ln2.b"] = db.reshape(1, -1)
    return dout + dx
