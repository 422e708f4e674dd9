"""Dense linear-algebra helpers and numeric oracles.

Matrices are plain 2-D float64 ``numpy`` arrays; sequences are laid out
token-major (n x d) and attention matrices are row-stochastic with rows
indexing queries.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when an input contains NaN or Inf."""


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    return m


def make_rng(seed):
    """Seeded generator; identical seeds give identical streams."""
    if seed is None:
        raise ValueError("an explicit integer seed is required")
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def row_softmax(logits, scale=1.0):
    """Row-wise softmax of ``scale * logits``, stabilised by the row max."""
    x = as_matrix(logits, "logits")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("row_softmax received non-finite logits")
    return _kernels.softmax_last(x * scale)


@dataclass(frozen=True)
class SpectralNormResult:
    value: float
    iterations: int
    converged: bool
    degenerate: bool


def spectral_norm(m, max_iters=20000, tol=1e-13, seed=0, full_output=False):
    """Largest singular value by power iteration on ``m.T @ m``.

    The start vector comes from a fixed seed so the result is deterministic.
    Iteration stops once the relative change of the estimate drops below
    ``tol``. A zero matrix returns 0.0 with ``degenerate=True``.
    """
    m = as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("spectral_norm received non-finite entries")
    if not np.any(m):
        res = SpectralNormResult(0.0, 0, True, True)
        return res if full_output else res.value

    gram = m.T @ m
    v = make_rng(seed).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w = gram @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            # start vector landed in the null space; restart deterministically
            v = np.ones(m.shape[1]) / np.sqrt(m.shape[1])
            continue
        v = w / nrm
        new = float(v @ gram @ v)
        if abs(new - est) <= tol * abs(new):
            est = new
            converged = True
            break
        est = new
    res = SpectralNormResult(float(np.sqrt(max(est, 0.0))), it, converged, False)
    return res if full_output else res.value


def finite_diff_grad(loss_fn, theta, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = float(loss_fn(theta))
        theta[i] = old - h
        fm = float(loss_fn(theta))
        theta[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
