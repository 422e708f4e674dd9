"""Closed-form parameter and FLOP accounting.

Attention costs follow the per-layer closed forms

    flops  = (1 - K/2H) * (4 d^2 n + 2 d n^2)
    params = (1 - K/2H) * 4 d^2

which count one multiply-add as one operation. ``model_cost`` scales every
matmul term by ``flops_per_mac`` (default 2) so that attention and
feed-forward use the same convention; ratios against a baseline do not
depend on that choice. Embedding lookups cost no FLOPs, the output head is
excluded from FLOPs unless asked for, and biases / layer norms are not
counted.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

from .model.config import ModelConfig
from .model.schedule import ConfigError


def _exact_int(x, what):
    x = Fraction(x)
    if x.denominator != 1:
        raise ArithmeticError(f"{what} is not integral: {x}")
    return int(x)


def attention_layer_cost(d, n, H, K):
    """``(flops, params)`` of one multi-head attention sublayer with K reused heads."""
    if not 0 <= K <= H:
        raise ConfigError(f"K={K} must lie in [0, H={H}]")
    if d % H:
        raise ConfigError(f"d={d} is not divisible by H={H}")
    factor = 1 - Fraction(K, 2 * H)
    flops = factor * (4 * d * d * n + 2 * d * n * n)
    params = factor * 4 * d * d
    return _exact_int(flops, "attention flops"), _exact_int(params, "attention params")


@dataclass
class CostReport:
    name: str
    n: int
    params_total: int
    flops_total: int
    breakdown: dict  # component -> {"params": int, "flops": int}
    params_ratio: float = None
    flops_ratio: float = None
    baseline: str = None

    def to_dict(self):
        return {
            "name": self.name,
            "n": self.n,
            "params_total": self.params_total,
            "flops_total": self.flops_total,
            "params_ratio": self.params_ratio,
            "flops_ratio": self.flops_ratio,
            "baseline": self.baseline,
            "breakdown": self.breakdown,
        }


def model_cost(config, n, vocab=None, tie_embeddings=True, flops_per_mac=2,
               include_head_flops=False, name=""):
    """Parameter and forward-pass FLOP totals for ``config`` at length ``n``."""
    if not isinstance(config, ModelConfig):
        raise TypeError("config must be a ModelConfig")
    vocab = config.vocab_size if vocab is None else vocab
    d, H, dff = config.d_model, config.n_heads, config.d_ff
    c = flops_per_mac
    br = {}
    br["embeddings"] = {"params": vocab * d + config.max_len * d, "flops": 0}
    for i, lp in enumerate(config.plan, start=1):
        if lp.skip:
            af, ap = 0, 0
        else:
            af, ap = attention_layer_cost(d, n, H, H - lp.exact)
        br[f"layer{i}.attention"] = {"params": ap, "flops": c * af}
        br[f"layer{i}.feedforward"] = {"params": 2 * d * dff, "flops": c * 2 * d * dff * n}
    head_params = 0 if tie_embeddings else d * vocab
    head_flops = c * d * vocab * n if include_head_flops else 0
    br["output_head"] = {"params": head_params, "flops": head_flops}
    return CostReport(
        name=name,
        n=n,
        params_total=sum(v["params"] for v in br.values()),
        flops_total=sum(v["flops"] for v in br.values()),
        breakdown=br,
    )


def with_baseline(report, base):
    report.params_ratio = report.params_total / base.params_total
    report.flops_ratio = report.flops_total / base.flops_total
    report.baseline = base.name
    return report


def compare(config, baseline_config, n, **kw):
    """Cost of ``config`` with ratios against ``baseline_config``."""
    base = model_cost(baseline_config, n, name="baseline", **kw)
    return with_baseline(model_cost(config, n, name="model", **kw), base)


def sweep_config(config, K):
    """``config`` with its reuse-head count replaced by ``K``.

    Baseline and partial-reuse configs become partial reuse (P = L - 2)
    with ``K`` reused heads; whole-layer variants fix ``K = H`` and cannot
    be swept.
    """
    s = config.schedule
    if s.variant.value not in ("baseline", "partial"):
        raise ConfigError(f"cannot sweep K for the {s.variant.value} variant (it reuses all heads)")
    return config.replace(schedule=type(s)("partial", None, K))


def cost_sweep(config, k_values, n, baseline_config=None, **kw):
    """One report per K, each with ratios against the K=0 (or given) baseline."""
    H = config.n_heads
    for K in k_values:
        if not 0 <= K <= H:
            raise ConfigError(f"K={K} outside [0, {H}]")
    base_cfg = baseline_config or config.replace(schedule=type(config.schedule)())
    base = model_cost(base_cfg, n, name="baseline", **kw)
    return [with_baseline(model_cost(sweep_config(config, K), n, name=f"K={K}", **kw), base)
            for K in k_values]


CSV_FIELDS = ("name", "n", "params_total", "flops_total", "params_ratio", "flops_ratio")


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow([getattr(r, f) for f in CSV_FIELDS])
    return buf.getvalue()


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2)


def bert_like(size="base", schedule=None, n=512):
    """BERT-BASE / BERT-LARGE shaped configs for pricing (not for training)."""
    dims = {"base": (12, 12, 768, 3072), "large": (24, 16, 1024, 4096)}[size]
    L, H, d, dff = dims
    kw = {} if schedule is None else {"schedule": schedule}
    return ModelConfig(L, H, d, dff, 30522, n, **kw)
