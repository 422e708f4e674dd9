"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked from the ``REUSELAB_KERNELS`` environment variable
(``numba`` or ``numpy``). When unset, numba is used if it imports cleanly.
Both paths compute the same quantities; they agree to ~1e-15 but are not
bitwise identical, so the active backend is recorded in run manifests.

All kernels take C-contiguous float64 arrays. Batched inputs are flattened
to 2-D (rows, cols) by the public wrappers before dispatch.
"""

import os

import numpy as np

try:
    import numba as nb

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _softmax_rows_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_bwd_np(a, da):
    return a * (da - (da * a).sum(axis=1, keepdims=True))


def _layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].copy()


def _layer_norm_bwd_np(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return dx, dgamma, dbeta


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _gelu_np(u):
    # explicit products: u ** 3 goes through pow() and is ~50x slower
    t = np.tanh(_GELU_C * (u + _GELU_A * u * u * u))
    return 0.5 * u * (1.0 + t)


def _gelu_grad_np(u):
    u2 = u * u
    t = np.tanh(_GELU_C * (u + _GELU_A * u2 * u))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * u2)


def _tv_similarity_matrix_np(mats):
    # mats: (M, n, n). Returns (M, M) of 1 - mean_p TV(row_p, row_p').
    m, n, _ = mats.shape
    out = np.empty((m, m))
    for i in range(m):
        d = np.abs(mats[i][None, :, :] - mats[i:]).sum(axis=2)
        sim = 1.0 - 0.5 * d.sum(axis=1) / n
        out[i, i:] = sim
        out[i:, i] = sim
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @nb.njit(cache=True)
    def _softmax_rows_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(cols):
                out[i, j] *= inv
        return out

    @nb.njit(cache=True)
    def _softmax_rows_bwd_nb(a, da):
        rows, cols = a.shape
        out = np.empty_like(a)
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += da[i, j] * a[i, j]
            for j in range(cols):
                out[i, j] = a[i, j] * (da[i, j] - dot)
        return out

    @nb.njit(cache=True)
    def _layer_norm_fwd_nb(x, gamma, beta, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                c = x[i, j] - mu
                var += c * c
            var /= cols
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(cols):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @nb.njit(cache=True)
    def _layer_norm_bwd_nb(dy, xhat, rstd, gamma):
        rows, cols = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(cols)
        dbeta = np.zeros(cols)
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                dx[i, j] = (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
        return dx, dgamma, dbeta

    @nb.njit(cache=True)
    def _tanh_nb(z):
        # scalar libm tanh is several times slower than this; exp overflow gives +-1
        return 1.0 - 2.0 / (np.exp(2.0 * z) + 1.0)

    @nb.njit(cache=True)
    def _gelu_nb(u):
        out = np.empty_like(u)
        for i in range(u.size):
            x = u[i]
            t = _tanh_nb(_GELU_C * (x + _GELU_A * x * x * x))
            out[i] = 0.5 * x * (1.0 + t)
        return out

    @nb.njit(cache=True)
    def _gelu_grad_nb(u):
        out = np.empty_like(u)
        for i in range(u.size):
            x = u[i]
            x2 = x * x
            t = _tanh_nb(_GELU_C * (x + _GELU_A * x2 * x))
            out[i] = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return out

    @nb.njit(cache=True)
    def _tv_similarity_matrix_nb(mats):
        m, n, _ = mats.shape
        out = np.empty((m, m))
        for a in range(m):
            out[a, a] = 1.0
            for b in range(a + 1, m):
                tot = 0.0
                for p in range(n):
                    for q in range(n):
                        tot += abs(mats[a, p, q] - mats[b, p, q])
                sim = 1.0 - 0.5 * tot / n
                out[a, b] = sim
                out[b, a] = sim
        return out


_NUMPY = {
    "softmax_rows": _softmax_rows_np,
    "softmax_rows_bwd": _softmax_rows_bwd_np,
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "tv_similarity_matrix": _tv_similarity_matrix_np,
    "gelu": _gelu_np,
    "gelu_grad": _gelu_grad_np,
}

if NUMBA_AVAILABLE:
    _NUMBA = {
        "softmax_rows": _softmax_rows_nb,
        "softmax_rows_bwd": _softmax_rows_bwd_nb,
        "layer_norm_fwd": _layer_norm_fwd_nb,
        "layer_norm_bwd": _layer_norm_bwd_nb,
        "tv_similarity_matrix": _tv_similarity_matrix_nb,
        "gelu": _gelu_nb,
        "gelu_grad": _gelu_grad_nb,
    }
else:  # pragma: no cover
    _NUMBA = None

_active = None


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for the current process."""
    global _active
    if name == "numba":
        if _NUMBA is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        _active = _NUMBA
    elif name == "numpy":
        _active = _NUMPY
    else:
        raise ValueError(f"unknown kernel backend {name!r} (expected 'numba' or 'numpy')")


def get_backend():
    return "numba" if _active is _NUMBA else "numpy"


def _init_from_env():
    choice = os.environ.get("REUSELAB_KERNELS", "").strip().lower()
    if not choice:
        choice = "numba" if NUMBA_AVAILABLE else "numpy"
    set_backend(choice)


_init_from_env()


# ---------------------------------------------------------------------------
# public wrappers (accept any leading batch shape)
# ---------------------------------------------------------------------------

def softmax_last(x):
    """Stable softmax along the last axis."""
    shape = x.shape
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, shape[-1])
    return _active["softmax_rows"](flat).reshape(shape)


def softmax_last_backward(a, da):
    shape = a.shape
    a2 = np.ascontiguousarray(a).reshape(-1, shape[-1])
    d2 = np.ascontiguousarray(da, dtype=np.float64).reshape(-1, shape[-1])
    return _active["softmax_rows_bwd"](a2, d2).reshape(shape)


def layer_norm_forward(x, gamma, beta, eps):
    shape = x.shape
    flat = np.ascontiguousarray(x).reshape(-1, shape[-1])
    y, xhat, rstd = _active["layer_norm_fwd"](
        flat, np.ascontiguousarray(gamma).ravel(), np.ascontiguousarray(beta).ravel(), float(eps)
    )
    return y.reshape(shape), (xhat, rstd, shape)


def layer_norm_backward(dy, cache, gamma):
    xhat, rstd, shape = cache
    d2 = np.ascontiguousarray(dy).reshape(-1, shape[-1])
    dx, dgamma, dbeta = _active["layer_norm_bwd"](d2, xhat, rstd, np.ascontiguousarray(gamma).ravel())
    return dx.reshape(shape), dgamma, dbeta


def gelu(u):
    """Tanh-approximate GELU, elementwise."""
    flat = np.ascontiguousarray(u, dtype=np.float64).ravel()
    return _active["gelu"](flat).reshape(np.shape(u))


def gelu_grad(u):
    flat = np.ascontiguousarray(u, dtype=np.float64).ravel()
    return _active["gelu_grad"](flat).reshape(np.shape(u))


def tv_similarity_matrix(mats):
    """Pairwise ``1 - mean-row TV`` between a stack of (M, n, n) matrices."""
    return _active["tv_similarity_matrix"](np.ascontiguousarray(mats, dtype=np.float64))
