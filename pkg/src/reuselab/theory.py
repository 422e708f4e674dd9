"""Numerical checks of two attention-reuse results.

``lemma1_mc`` estimates, for two heads with independent zero-mean random
query/key projections, the mean squared difference of their pre-softmax
scores against twice the mean squared score of one head. The two agree in
expectation, so the ratio should approach 1.

``lemma2_check`` evaluates a two-layer, one-head linear Transformer (no
nonlinearity, no layer norm; the layer-2 scores are a free stochastic
matrix rather than recomputed from the layer-1 output) against its reuse
counterpart built with ``W3 = W1``, ``W4 = W2`` and shared scores
``(A1 + A2) / 2``, and compares the spectral-norm output error with
``2*eps + eps**2 / 2`` where ``eps = ||A1 - A2||_2``.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, make_rng, spectral_norm

DISTRIBUTIONS = ("gaussian", "rademacher")
HOLD_SLACK = 1e-9
NORM_SLACK = 1e-9
MAX_EPSILON = 2.0


class HypothesisError(ValueError):
    """An instance violates the norm hypotheses of the reuse-error bound."""


def _draw(rng, distribution, size):
    if distribution == "gaussian":
        return rng.standard_normal(size)
    if distribution == "rademacher":
        return rng.integers(0, 2, size=size) * 2.0 - 1.0
    raise ValueError(f"distribution must be one of {DISTRIBUTIONS}, got {distribution!r}")


@dataclass(frozen=True)
class Lemma1Estimate:
    lhs: float
    rhs: float
    ratio: float
    samples: int


def lemma1_mc(d, n, samples, distribution="gaussian", seed=0, tied=False, batch=5000):
    """Monte-Carlo estimate of E[(S1 - S2)^2] and 2 E[S1^2] averaged over entries.

    ``S = X Wq^T Wk X^T`` with ``X`` (n x d) drawn once per run and square
    ``d x d`` projections drawn fresh per sample. ``tied=True`` makes the
    second head reuse the first head's weights (a negative control).
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    rng = make_rng(seed)
    x = rng.standard_normal((n, d))
    if not np.any(x):
        raise ValueError("X must be nonzero")
    diff_sq = 0.0
    one_sq = 0.0
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        wq1 = _draw(rng, distribution, (b, d, d))
        wk1 = _draw(rng, distribution, (b, d, d))
        if tied:
            wq2, wk2 = wq1, wk1
        else:
            wq2 = _draw(rng, distribution, (b, d, d))
            wk2 = _draw(rng, distribution, (b, d, d))
        s1 = (x @ np.swapaxes(wq1, 1, 2)) @ (wk1 @ x.T)
        s2 = (x @ np.swapaxes(wq2, 1, 2)) @ (wk2 @ x.T)
        diff_sq += float(((s1 - s2) ** 2).sum())
        one_sq += float((s1 ** 2).sum())
        done += b
    count = samples * n * n
    lhs = diff_sq / count
    rhs = 2.0 * one_sq / count
    return Lemma1Estimate(lhs, rhs, lhs / rhs, samples)


def linear_two_layer_forward(x, a1, a2, w1, w2):
    """``X + A1 X W1 + A2 X W2 + A2 A1 X W1 W2``."""
    x, a1, a2, w1, w2 = (np.asarray(m, dtype=np.float64) for m in (x, a1, a2, w1, w2))
    n, d = x.shape
    if a1.shape != (n, n) or a2.shape != (n, n):
        raise ShapeError(f"attention must be {n}x{n}, got {a1.shape} and {a2.shape}")
    if w1.shape != (d, d) or w2.shape != (d, d):
        raise ShapeError(f"weights must be {d}x{d}, got {w1.shape} and {w2.shape}")
    return x + a1 @ x @ w1 + a2 @ x @ w2 + a2 @ a1 @ x @ w1 @ w2


@dataclass
class LinearTwoLayerInstance:
    x: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    a1: np.ndarray
    a2: np.ndarray

    @property
    def a_hat(self):
        return 0.5 * (self.a1 + self.a2)

    @property
    def epsilon(self):
        return spectral_norm(self.a1 - self.a2)

    def check_hypotheses(self):
        for name in ("x", "w1", "w2"):
            s = spectral_norm(getattr(self, name))
            if s > 1.0 + NORM_SLACK:
                raise HypothesisError(f"||{name}||_2 = {s:.6g} exceeds 1")


@dataclass(frozen=True)
class Lemma2Result:
    err: float
    bound: float
    epsilon: float
    holds: bool


def reuse_bound(eps):
    return 2.0 * eps + 0.5 * eps * eps


def lemma2_check(inst, enforce_hypotheses=True):
    """Compare the reuse construction's output error with ``2 eps + eps^2/2``."""
    if enforce_hypotheses:
        inst.check_hypotheses()
    y = linear_two_layer_forward(inst.x, inst.a1, inst.a2, inst.w1, inst.w2)
    a_hat = inst.a_hat
    y_hat = linear_two_layer_forward(inst.x, a_hat, a_hat, inst.w1, inst.w2)
    delta = y_hat - y
    err = spectral_norm(delta) if np.any(delta) else 0.0
    eps = inst.epsilon
    bound = reuse_bound(eps)
    return Lemma2Result(err, bound, eps, err <= bound + HOLD_SLACK)


def _random_stochastic(rng, n, temperature):
    logits = rng.standard_normal((n, n)) * temperature
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sharp_stochastic(rng, n):
    if rng.random() < 0.5:
        return _random_stochastic(rng, n, rng.uniform(2.0, 8.0))
    cols = rng.permutation(n)[: rng.integers(1, n + 1)]
    b = np.zeros((n, n))
    b[np.arange(n), rng.choice(cols, size=n)] = 1.0
    return b


def _unit_norm_scaled(rng, shape, lo=0.5):
    m = rng.standard_normal(shape)
    return m * (rng.uniform(lo, 1.0) / spectral_norm(m))


def sample_lemma2_instance(n, d, seed, epsilon_target, max_tries=200):
    """Random instance with ``||A1 - A2||_2`` within 10% of ``epsilon_target``.

    ``A2 = (1 - t) A1 + t B`` for a random stochastic ``B`` (alternately a
    peaked softmax and one-hot rows concentrated on a few columns), with
    ``t`` solved so the gap hits the target. ``B`` is redrawn until the
    target is reachable with ``t <= 1``. Targets above 2 are rejected.
    """
    if epsilon_target < 0:
        raise ValueError("epsilon_target must be non-negative")
    if epsilon_target > MAX_EPSILON:
        raise ValueError(f"epsilon_target {epsilon_target} is outside the reachable range [0, {MAX_EPSILON}]")
    rng = make_rng(seed)
    x = _unit_norm_scaled(rng, (n, d))
    w1 = _unit_norm_scaled(rng, (d, d))
    w2 = _unit_norm_scaled(rng, (d, d))
    a1 = _random_stochastic(rng, n, rng.uniform(0.5, 3.0))
    if epsilon_target == 0:
        return LinearTwoLayerInstance(x, w1, w2, a1, a1.copy())
    for _ in range(max_tries):
        b = _sharp_stochastic(rng, n)
        gap = spectral_norm(a1 - b)
        t = epsilon_target / gap
        if t > 1.0:
            continue
        a2 = (1.0 - t) * a1 + t * b
        a2 /= a2.sum(axis=1, keepdims=True)
        inst = LinearTwoLayerInstance(x, w1, w2, a1, a2)
        if abs(inst.epsilon - epsilon_target) <= 0.1 * epsilon_target:
            return inst
    raise ValueError(f"could not reach epsilon_target={epsilon_target} with n={n} after {max_tries} draws")


def lemma2_trials(trials, n, d, seed, epsilons):
    """Run ``trials`` instances per epsilon target; returns a list of row dicts."""
    rows = []
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(trials * len(epsilons))
    k = 0
    for eps_t in epsilons:
        for trial in range(trials):
            child_seed = int(children[k].generate_state(1, dtype=np.uint64)[0])
            k += 1
            inst = sample_lemma2_instance(n, d, child_seed, eps_t)
            r = lemma2_check(inst)
            rows.append({
                "epsilon_target": eps_t,
                "trial": trial,
                "seed": child_seed,
                "epsilon": r.epsilon,
                "err": r.err,
                "bound": r.bound,
                "ratio": r.err / r.bound if r.bound > 0 else 0.0,
                "holds": r.holds,
            })
    return rows
