"""Time each hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--train-steps 20]

Prints one row per kernel with milliseconds per call for both backends and
the speedup, then the same comparison for whole training steps of the
4-layer masked-token model.
"""

import argparse
import time

import numpy as np

from reuselab import _kernels
from reuselab.model import AdamState, ReuseTransformer, train_step
from reuselab.numerics import make_rng
from reuselab.tasks import TaskSampler
from reuselab.training import compare_random_config


def _cases(rng):
    # shapes match the 4L/4H/d64 model at batch 32, sequence length 32
    logits = rng.standard_normal((32, 4, 32, 32))
    probs = _kernels.softmax_last(logits)
    x = rng.standard_normal((32, 32, 64))
    g, b = rng.standard_normal(64), rng.standard_normal(64)
    _, ln_cache = _kernels.layer_norm_forward(x, g, b, 1e-5)
    u = rng.standard_normal((32, 32, 128))
    mats = _kernels.softmax_last(rng.standard_normal((16, 32, 32)))
    return {
        "softmax": lambda: _kernels.softmax_last(logits),
        "softmax_backward": lambda: _kernels.softmax_last_backward(probs, logits),
        "layer_norm": lambda: _kernels.layer_norm_forward(x, g, b, 1e-5),
        "layer_norm_backward": lambda: _kernels.layer_norm_backward(x, ln_cache, g),
        "gelu": lambda: _kernels.gelu(u),
        "gelu_grad": lambda: _kernels.gelu_grad(u),
        "tv_similarity_matrix(16x32x32)": lambda: _kernels.tv_similarity_matrix(mats),
    }


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best * 1e3


def _train_fn():
    cfg = compare_random_config(0, 1)
    model = ReuseTransformer(cfg.model, seed=0)
    state = AdamState.zeros_like(model.params)
    batch = TaskSampler(cfg.task, 0).batch(cfg.batch_size)
    return lambda: train_step(model, batch, state, cfg.adam)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=10)
    args = ap.parse_args()

    before = _kernels.get_backend()
    rows = {}
    for backend in ("numpy", "numba"):
        _kernels.set_backend(backend)
        for name, fn in _cases(make_rng(0)).items():
            rows.setdefault(name, {})[backend] = _time(fn, args.repeat)
        rows.setdefault("train_step", {})[backend] = _time(_train_fn(), args.train_steps)
    _kernels.set_backend(before)

    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, r in rows.items():
        print(f"{name:34s} {r['numpy']:10.3f} {r['numba']:10.3f} {r['numpy'] / r['numba']:7.2f}x")


if __name__ == "__main__":
    main()
