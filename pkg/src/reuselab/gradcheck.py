"""Analytic-vs-finite-difference gradient checks on a tiny model."""

import numpy as np

from .model import ModelConfig, ReuseSchedule, ReuseTransformer
from .numerics import finite_diff_grad, make_rng

TOLERANCE = 1e-4
# Entries whose true gradient is below this are compared in absolute terms;
# central differences at h=1e-5 carry ~1e-11 of rounding noise.
REL_FLOOR = 1e-6

TINY = dict(n_layers=3, n_heads=2, d_model=8, d_ff=16, vocab_size=11, max_len=5)
TINY_SEQ = 5
TINY_BATCH = 2
TINY_INIT_STD = 0.5

SCHEDULES = {
    "baseline": ReuseSchedule(),
    "partial": ReuseSchedule("partial", K=1),
    "full": ReuseSchedule("full", P=2),
    "alternate": ReuseSchedule("alternate", P=1),
    "allend": ReuseSchedule("allend", P=1),
    "skip": ReuseSchedule("skip", P=1),
}


def tiny_config(schedule, activation="gelu"):
    """The tiny gradient-check model. Weights use a large init so attention is far from uniform."""
    return ModelConfig(**TINY, schedule=schedule, activation=activation, init_std=TINY_INIT_STD)


def relative_error(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic)
    f = np.asarray(numeric)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def check_model(model, tokens, targets, weights=None, h=1e-5, corrupt=False):
    """Max relative error per parameter tensor between backprop and central differences."""
    names = list(model.params)
    _, grads = model.loss_and_grads(tokens, targets, weights)
    if corrupt:
        grads[names[-1]] = grads[names[-1]] * 1.5 + 1e-3
    saved = {k: v.copy() for k, v in model.params.items()}
    sizes = [model.params[k].size for k in names]
    theta0 = np.concatenate([model.params[k].ravel() for k in names])

    def loss_at(theta):
        off = 0
        for k, sz in zip(names, sizes):
            model.params[k][...] = theta[off:off + sz].reshape(model.params[k].shape)
            off += sz
        return model.loss(tokens, targets, weights)

    try:
        fd = finite_diff_grad(loss_at, theta0, h)
    finally:
        for k in names:
            model.params[k][...] = saved[k]
    out = {}
    off = 0
    for k, sz in zip(names, sizes):
        out[k] = float(relative_error(grads[k].ravel(), fd[off:off + sz]).max())
        off += sz
    return out


def run(schedules=None, seed=0, h=1e-5, corrupt=False):
    """Check every named schedule on the tiny model; returns ``{name: summary}``."""
    schedules = schedules or list(SCHEDULES)
    rng = make_rng(seed)
    tokens = rng.integers(0, TINY["vocab_size"], size=(TINY_BATCH, TINY_SEQ))
    targets = rng.integers(0, TINY["vocab_size"], size=(TINY_BATCH, TINY_SEQ))
    results = {}
    for name in schedules:
        model = ReuseTransformer(tiny_config(SCHEDULES[name]), seed=seed)
        per_param = check_model(model, tokens, targets, h=h, corrupt=corrupt)
        worst = max(per_param, key=per_param.get)
        results[name] = {
            "max_rel_error": per_param[worst],
            "worst_param": worst,
            "passed": per_param[worst] < TOLERANCE,
            "per_param": per_param,
        }
    return results
