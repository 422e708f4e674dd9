"""Training loop, evaluation and the desk-scale experiment drivers."""

import csv
import io
import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import similarity
from .model import (
    AdamConfig,
    AdamState,
    Checkpoint,
    ModelConfig,
    ReuseSchedule,
    ReuseTransformer,
    train_step,
)
from .model.schedule import ConfigError
from .tasks import CorpusSource, TaskKind, TaskSampler, TaskSpec, gen_random_corpus, gen_structured_corpus

PROBE_SIZE = 256


@dataclass(frozen=True)
class TrainRunConfig:
    model: ModelConfig
    task: TaskSpec
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 100
    capture_every: int = 0  # 0 disables periodic attention capture
    eval_size: int = 512
    probe_size: int = PROBE_SIZE

    def __post_init__(self):
        for name in ("steps", "batch_size", "log_every", "eval_size", "probe_size", "capture_every", "warmup"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {val!r}")
        if self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("batch_size and log_every must be positive")
        if self.task.seq_len > self.model.max_len:
            raise ConfigError(f"task seq_len={self.task.seq_len} exceeds model max_len={self.model.max_len}")
        if self.task.model_vocab != self.model.vocab_size:
            raise ConfigError(
                f"task needs a model vocabulary of {self.task.model_vocab}, config has {self.model.vocab_size}"
            )

    @property
    def adam(self):
        return AdamConfig(lr=self.lr, warmup=self.warmup, grad_clip=self.grad_clip)

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return TrainRunConfig(**d)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["task"] = self.task.to_dict()
        return d


def _eval_seed(seed):
    return seed + 1_000_003


def _probe_seed(seed):
    return seed + 2_000_003


def eval_batch(cfg):
    return TaskSampler(cfg.task, _eval_seed(cfg.seed)).batch(cfg.eval_size)


def token_accuracy(model, batch, chunk=256):
    tokens, targets, weights = batch
    correct = 0.0
    for i in range(0, len(tokens), chunk):
        logits, _ = model.forward(tokens[i:i + chunk])
        hit = logits.argmax(axis=-1) == targets[i:i + chunk]
        correct += float((hit * weights[i:i + chunk]).sum())
    return correct / float(weights.sum())


def capture_attention(model, tokens, chunk=64):
    """Forward ``tokens`` and stack per-example scores into an AttentionCapture."""
    parts = []
    layer_ids = None
    for i in range(0, len(tokens), chunk):
        _, cache = model.forward(tokens[i:i + chunk])
        cap = similarity.AttentionCapture.from_model_scores(cache.scores)
        parts.append(cap.scores)
        layer_ids = cap.layer_ids
    return similarity.AttentionCapture(np.concatenate(parts), layer_ids=layer_ids)


def probe_tokens(cfg, source=None, seed=None):
    """Held-out probe inputs for similarity capture."""
    t = cfg.task
    seed = _probe_seed(cfg.seed) if seed is None else seed
    if t.kind is TaskKind.MASKED:
        src = t.corpus_source if source is None else CorpusSource(source)
        if src is CorpusSource.STRUCTURED:
            return gen_structured_corpus(seed, t.vocab, t.seq_len, cfg.probe_size, table_seed=t.corpus_seed)
        return gen_random_corpus(seed, t.vocab, t.seq_len, cfg.probe_size)
    return TaskSampler(t, seed).batch(cfg.probe_size)[0]


@dataclass
class RunResult:
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)
    final_accuracy: float = None

    @property
    def model(self):
        return ReuseTransformer(self.checkpoint.config, self.checkpoint.params)


def run_training(cfg, log=None):
    """Train per ``cfg``; returns the final checkpoint and per-interval metrics.

    ``log`` is an optional callable receiving each metrics record.
    """
    model = ReuseTransformer(cfg.model, seed=cfg.seed)
    state = AdamState.zeros_like(model.params)
    sampler = TaskSampler(cfg.task, cfg.seed)
    evb = eval_batch(cfg)
    probe = probe_tokens(cfg) if cfg.capture_every else None
    adam = cfg.adam
    metrics = []
    t0 = time.perf_counter()
    running = []
    for step in range(1, cfg.steps + 1):
        loss = train_step(model, sampler.batch(cfg.batch_size), state, adam)
        running.append(loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = {
                "step": step,
                "loss": float(np.mean(running)),
                "accuracy": token_accuracy(model, evb),
                "wall_time": time.perf_counter() - t0,
            }
            running = []
            if cfg.capture_every and step % cfg.capture_every == 0:
                cap = capture_attention(model, probe)
                rec["mean_adjacent_similarity"] = (
                    similarity.mean_adjacent_similarity(similarity.all_pairs_best(cap)) if cap.L >= 2 else None
                )
            metrics.append(rec)
            if log is not None:
                log(rec)
    acc = metrics[-1]["accuracy"] if metrics else token_accuracy(model, evb)
    return RunResult(Checkpoint(cfg.model, model.params, state, cfg.seed), metrics, acc)


def metrics_jsonl(metrics):
    return "".join(json.dumps(r) + "\n" for r in metrics)


def ablation_sweep(cfg, k_values, log=None):
    """Train one model per K (partial reuse, P = L - 2) with shared seeds and budget."""
    from .cost import sweep_config

    rows = []
    for K in sorted(k_values):
        if not 0 <= K <= cfg.model.n_heads:
            raise ConfigError(f"K={K} outside [0, {cfg.model.n_heads}]")
        model_cfg = sweep_config(cfg.model, K) if K else cfg.model.replace(schedule=ReuseSchedule())
        res = run_training(cfg.replace(model=model_cfg), log=log)
        rows.append({"K": K, "final_accuracy": res.final_accuracy,
                     "final_loss": res.metrics[-1]["loss"] if res.metrics else None})
    return rows


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# trained vs. random similarity
# ---------------------------------------------------------------------------

def compare_random_config(seed, steps=3000):
    """4-layer, 4-head, width-64 masked-token model on the structured corpus.

    Weights start at std 0.25 so that untrained heads are sharp and
    layer-specific. At std 0.02 every untrained head is nearly uniform and
    trivially similar to every other, which makes the comparison meaningless.
    """
    task = TaskSpec(TaskKind.MASKED, vocab=32, seq_len=32, mask_rate=0.15,
                    corpus_source=CorpusSource.STRUCTURED, corpus_seed=seed)
    model = ModelConfig(4, 4, 64, 128, task.model_vocab, task.seq_len, init_std=0.25)
    return TrainRunConfig(model=model, task=task, steps=steps, batch_size=32, lr=1e-3,
                          warmup=200, seed=seed, log_every=250, eval_size=256)


def _mean_adjacent(model, tokens):
    cap = capture_attention(model, tokens)
    return similarity.mean_adjacent_similarity(similarity.all_pairs_best(cap))


def trained_vs_random_similarity(seed, steps=3000, cfg=None, include_random_data_model=True, log=None):
    """Mean adjacent-layer best-head similarity of trained vs untrained models.

    Reports (a) the model trained on structured data, (b) the same
    architecture at random initialisation, probed on two independent
    structured probe sets and on uniform-random tokens, and optionally
    (c) a model trained on uniform-random tokens.
    """
    cfg = cfg or compare_random_config(seed, steps)
    probe = probe_tokens(cfg)
    probe_b = probe_tokens(cfg, seed=_probe_seed(cfg.seed) + 17)
    probe_random = probe_tokens(cfg, source="random")

    res = run_training(cfg, log=log)
    trained = res.model
    init = ReuseTransformer(cfg.model, seed=cfg.seed)

    report = {
        "seed": cfg.seed,
        "steps": cfg.steps,
        "probe_size": cfg.probe_size,
        "trained_accuracy": res.final_accuracy,
        "trained_structured": _mean_adjacent(trained, probe),
        "trained_on_random_probe": _mean_adjacent(trained, probe_random),
        "random_init_structured": _mean_adjacent(init, probe),
        "random_init_structured_b": _mean_adjacent(init, probe_b),
        "random_init_random_probe": _mean_adjacent(init, probe_random),
    }
    report["gap"] = report["trained_structured"] - report["random_init_structured"]
    report["random_init_probe_swap"] = abs(report["random_init_structured"] - report["random_init_structured_b"])
    if include_random_data_model:
        rcfg = cfg.replace(task=TaskSpec(**{**cfg.task.to_dict(), "corpus_source": "random"}))
        rres = run_training(rcfg, log=log)
        report["random_data_model_structured"] = _mean_adjacent(rres.model, probe)
        report["random_data_model_random_probe"] = _mean_adjacent(rres.model, probe_random)
    return report
