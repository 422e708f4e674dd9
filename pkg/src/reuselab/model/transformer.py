"""Encoder-only Transformer with reuse multi-head attention."""

from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from ..numerics import make_rng
from . import layers
from .config import ModelConfig
from .schedule import ConfigError


class InputError(ValueError):
    """Token ids or sequence length outside what the model accepts."""


def layer_prefix(index):
    """Parameter-name prefix for 1-based layer ``index``."""
    return f"layers.{index}."


def parameter_shapes(config):
    """Ordered ``name -> (rows, cols)`` for every trainable tensor."""
    d, dh = config.d_model, config.d_head
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i, lp in enumerate(config.plan, start=1):
        pre = layer_prefix(i)
        if not lp.skip:
            shapes[pre + "ln1.g"] = (1, d)
            shapes[pre + "ln1.b"] = (1, d)
            if lp.exact:
                shapes[pre + "attn.wq"] = (d, lp.exact * dh)
                shapes[pre + "attn.wk"] = (d, lp.exact * dh)
            shapes[pre + "attn.wv"] = (d, d)
            shapes[pre + "attn.wo"] = (d, d)
        shapes[pre + "ln2.g"] = (1, d)
        shapes[pre + "ln2.b"] = (1, d)
        shapes[pre + "ff.w1"] = (d, config.d_ff)
        shapes[pre + "ff.w2"] = (config.d_ff, d)
    shapes["ln_f.g"] = (1, d)
    shapes["ln_f.b"] = (1, d)
    shapes["head.w"] = (d, config.vocab_size)
    return shapes


def init_params(config, seed):
    """Gaussian(0, init_std) projections and embeddings; unit/zero layer norms."""
    rng = make_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, config.init_std, size=shape)
    return params


def attention_param_count(config, layer_index):
    """Projection parameters of one attention sublayer (layer norms excluded)."""
    lp = config.plan[layer_index - 1]
    if lp.skip:
        return 0
    d, dh = config.d_model, config.d_head
    return 2 * lp.exact * d * dh + 2 * d * d


@dataclass
class ForwardCache:
    tokens: np.ndarray
    scores: list  # per layer (..., H, n, n) or None for skip layers
    blocks: list = field(default_factory=list)
    final_ln: tuple = None
    final_x: np.ndarray = None


class ReuseTransformer:
    """Parameters plus hand-written forward/backward for one configuration."""

    def __init__(self, config, params=None, seed=None):
        if not isinstance(config, ModelConfig):
            raise TypeError("config must be a ModelConfig")
        self.config = config
        if params is None:
            if seed is None:
                raise ValueError("either params or seed is required")
            params = init_params(config, seed)
        self.params = params
        self._check_params()

    def _check_params(self):
        shapes = parameter_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def num_parameters(self):
        return sum(int(v.size) for v in self.params.values())

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
            raise InputError(f"tokens must be a (n,) or (B, n) integer array, got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("token ids must be integers")
        n = tokens.shape[-1]
        if n > self.config.max_len:
            raise InputError(f"sequence length {n} exceeds max_len={self.config.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token id outside [0, {self.config.vocab_size})")
        return tokens

    def embed(self, tokens):
        n = tokens.shape[-1]
        return self.params["tok_emb"][tokens] + self.params["pos_emb"][:n]

    def forward(self, tokens):
        """Return ``(logits, cache)``; ``cache.scores`` holds every layer's scores."""
        cfg = self.config
        p = self.params
        tokens = self._check_tokens(tokens)
        x = self.embed(tokens)
        cache = ForwardCache(tokens=tokens, scores=[])
        r = None
        for i, lp in enumerate(cfg.plan, start=1):
            pre = layer_prefix(i)
            if lp.skip:
                att = None
                cache.scores.append(None)
            else:
                x, r, att = layers.attention_block_forward(x, p, pre, lp.exact, r, cfg.d_head, cfg.ln_eps)
                cache.scores.append(r)
            x, ff = layers.ff_block_forward(x, p, pre, cfg.activation, cfg.ln_eps)
            cache.blocks.append((att, ff))
        xf, cache.final_ln = layers.layer_norm(x, p["ln_f.g"], p["ln_f.b"], cfg.ln_eps)
        cache.final_x = xf
        return xf @ p["head.w"], cache

    def backward(self, dlogits, cache):
        """Exact parameter gradients given d(loss)/d(logits)."""
        if cache is None or cache.final_x is None:
            raise ValueError("backward needs the cache from a forward pass")
        cfg = self.config
        p = self.params
        grads = {}
        grads["head.w"] = layers._flat(cache.final_x).T @ layers._flat(dlogits)
        dxf = dlogits @ p["head.w"].T
        dx, dg, db = layers.layer_norm_backward(dxf, cache.final_ln, p["ln_f.g"])
        grads["ln_f.g"] = dg.reshape(1, -1)
        grads["ln_f.b"] = db.reshape(1, -1)

        dr = None
        for i in range(cfg.n_layers, 0, -1):
            lp = cfg.plan[i - 1]
            pre = layer_prefix(i)
            att, ff = cache.blocks[i - 1]
            dx = layers.ff_block_backward(dx, ff, p, pre, cfg.activation, grads)
            if lp.skip:
                continue
            dx, dr = layers.attention_block_backward(
                dx, dr, att, p, pre, cfg.d_head, cfg.detach_reused, grads
            )

        tokens = cache.tokens
        n = tokens.shape[-1]
        d_emb = dx.reshape(-1, cfg.d_model)
        g_tok = np.zeros_like(p["tok_emb"])
        np.add.at(g_tok, tokens.ravel(), d_emb)
        grads["tok_emb"] = g_tok
        g_pos = np.zeros_like(p["pos_emb"])
        g_pos[:n] = dx.reshape(-1, n, cfg.d_model).sum(axis=0)
        grads["pos_emb"] = g_pos
        return {name: grads[name] for name in p}

    def loss_and_grads(self, tokens, targets, weights=None):
        logits, cache = self.forward(tokens)
        loss, dlogits = cross_entropy(logits, targets, weights)
        return loss, self.backward(dlogits, cache)

    def loss(self, tokens, targets, weights=None):
        logits, _ = self.forward(tokens)
        return cross_entropy(logits, targets, weights)[0]


def cross_entropy(logits, targets, weights=None):
    """Weighted mean token cross-entropy and its gradient w.r.t. logits."""
    targets = np.asarray(targets)
    if weights is None:
        weights = np.ones(targets.shape)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one positively weighted target")
    probs = _kernels.softmax_last(logits)
    flat_p = probs.reshape(-1, probs.shape[-1])
    idx = targets.ravel()
    rows = np.arange(idx.size)
    shifted = logits.reshape(-1, logits.shape[-1])
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    logp = shifted[rows, idx] - np.log(np.exp(shifted).sum(axis=1))
    loss = -(weights.ravel() * logp).sum() / total
    d = flat_p.copy()
    d[rows, idx] -= 1.0
    d *= (weights.ravel() / total)[:, None]
    return float(loss), d.reshape(logits.shape)


# ---------------------------------------------------------------------------
# functional entry points mirroring the per-layer algorithm
# ---------------------------------------------------------------------------

def reuse_multihead_forward(layer_index, x, r_prev, params, config):
    """One attention sublayer (with residual and pre-norm) of layer ``layer_index``.

    Returns ``(y, r_new, scores)``; ``r_new`` and ``scores`` are the same
    (..., H, n, n) stack: fresh heads first, then the carried-over entries.
    """
    lp = config.plan[layer_index - 1]
    if lp.skip:
        raise ConfigError(f"layer {layer_index} is a skip layer and has no attention")
    if layer_index == 1 and lp.exact < config.n_heads:
        raise ConfigError("the first layer must compute all heads exactly")
    y, scores, _ = layers.attention_block_forward(
        x, params, layer_prefix(layer_index), lp.exact, r_prev, config.d_head, config.ln_eps
    )
    return y, scores, scores


def transformer_forward(tokens, params, config):
    """``(logits, capture)`` where capture lists per-layer scores (None for skip layers)."""
    logits, cache = ReuseTransformer(config, params).forward(tokens)
    return logits, cache.scores
