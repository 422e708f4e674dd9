"""Cross-layer attention similarity analysis.

Similarity of two score matrices is one minus the mean (over query rows)
total-variation distance. For a source head ``(l, h)`` and target layer
``l2`` the best-head score averages similarity over examples for every
target head first and then takes the maximum, so one target head is shared
by all examples.

All layer and head indices in this module are 0-based.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numerics import ShapeError

STOCHASTIC_TOL = 1e-10
_CAPTURE_MAGIC = b"RCAP"


class CaptureError(ValueError):
    pass


def _check_stochastic(a, tol, what="matrix"):
    if not np.all(np.isfinite(a)):
        raise CaptureError(f"{what} has non-finite entries")
    if a.min() < -tol:
        raise CaptureError(f"{what} has negative entries")
    dev = np.abs(a.sum(axis=-1) - 1.0).max()
    if dev > tol:
        raise CaptureError(f"{what} is not row-stochastic: rows deviate from summing to 1 by {dev:.3g}")


def tv_similarity(a, a_prime, tol=1e-8):
    """``1 - (1/n) * sum_p 0.5 * ||a[p] - a_prime[p]||_1`` for row-stochastic inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(a_prime, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"similarity needs two matrices of equal shape, got {a.shape} and {b.shape}")
    _check_stochastic(a, tol, "first matrix")
    _check_stochastic(b, tol, "second matrix")
    return 1.0 - 0.5 * np.abs(a - b).sum() / a.shape[0]


@dataclass
class AttentionCapture:
    """Score matrices of shape (T, L, H, n, n) from T examples.

    ``layer_ids`` records which model layers (1-based) the L slots came
    from; attention-free layers are dropped before capture.
    """

    scores: np.ndarray
    layer_ids: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 5 or s.shape[-1] != s.shape[-2]:
            raise CaptureError(f"capture must have shape (T, L, H, n, n), got {s.shape}")
        if s.shape[0] < 1:
            raise CaptureError("capture is empty")
        _check_stochastic(s, STOCHASTIC_TOL, "captured attention")
        self.scores = s
        if self.layer_ids is None:
            self.layer_ids = tuple(range(1, s.shape[1] + 1))
        self.layer_ids = tuple(int(i) for i in self.layer_ids)
        if len(self.layer_ids) != s.shape[1]:
            raise CaptureError("layer_ids length does not match the layer axis")

    @property
    def T(self):
        return self.scores.shape[0]

    @property
    def L(self):
        return self.scores.shape[1]

    @property
    def H(self):
        return self.scores.shape[2]

    @property
    def n(self):
        return self.scores.shape[3]

    @classmethod
    def from_examples(cls, examples, **kw):
        """Stack per-example (L, H, n, n) arrays; mixed lengths are rejected."""
        shapes = {np.shape(e) for e in examples}
        if len(shapes) > 1:
            raise CaptureError(f"examples have differing shapes {sorted(shapes)}; mixed lengths are not supported")
        return cls(np.stack(examples), **kw)

    @classmethod
    def from_model_scores(cls, per_layer, **kw):
        """Build from a model forward pass: list of (B, H, n, n) or None per layer."""
        kept = [(i, s) for i, s in enumerate(per_layer, start=1) if s is not None]
        if not kept:
            raise CaptureError("model has no attention layers")
        arr = np.stack([s for _, s in kept], axis=1)
        if arr.ndim == 4:
            arr = arr[None]
        return cls(arr, layer_ids=tuple(i for i, _ in kept), **kw)


class SimilarityAccumulator:
    """Running sums of pairwise similarities over examples, in index order."""

    def __init__(self, L, H):
        self.L, self.H = L, H
        self.count = 0
        self.total = np.zeros((L * H, L * H))

    def add(self, example):
        e = np.asarray(example)
        if e.shape[:2] != (self.L, self.H):
            raise CaptureError(f"example has (L, H) = {e.shape[:2]}, expected {(self.L, self.H)}")
        self.total += _kernels.tv_similarity_matrix(e.reshape(self.L * self.H, *e.shape[2:]))
        self.count += 1

    def mean(self):
        if not self.count:
            raise CaptureError("no examples accumulated")
        return (self.total / self.count).reshape(self.L, self.H, self.L, self.H)


def mean_similarity(capture, upto=None):
    """(L, H, L, H) tensor of example-averaged similarities."""
    T = capture.T if upto is None else upto
    acc = SimilarityAccumulator(capture.L, capture.H)
    for t in range(T):
        acc.add(capture.scores[t])
    return acc.mean()


def _check_layer(capture, l, name):
    if not 0 <= l < capture.L:
        raise IndexError(f"{name}={l} out of range for {capture.L} layers")


def best_head_similarity(capture, l, h, l_prime, sims=None):
    """``(c, argmax_head)``: best mean similarity from head (l, h) to any head of l_prime.

    Ties go to the lowest target head index.
    """
    _check_layer(capture, l, "l")
    _check_layer(capture, l_prime, "l_prime")
    if not 0 <= h < capture.H:
        raise IndexError(f"h={h} out of range for {capture.H} heads")
    if sims is None:
        sims = mean_similarity(capture)
    row = sims[l, h, l_prime]
    j = int(np.argmax(row))
    return float(row[j]), j


def _all_pairs_from(sims):
    # max over source head h and target head h2
    return sims.max(axis=(1, 3))


def all_pairs_best(capture, sims=None):
    """L x L matrix; rows are source layers, columns target layers."""
    if sims is None:
        sims = mean_similarity(capture)
    return _all_pairs_from(sims)


def _adjacent_from(sims):
    L = sims.shape[0]
    if L < 2:
        raise CaptureError("adjacent-layer profiles need at least two layers")
    return np.stack([np.sort(sims[l, :, l - 1, :].max(axis=1)) for l in range(1, L)])


def adjacent_rank_profile(capture, sims=None):
    """Row ``i`` holds layer i+1's per-head best similarity to layer i, ascending."""
    if sims is None:
        sims = mean_similarity(capture)
    return _adjacent_from(sims)


def mean_adjacent_similarity(all_pairs):
    """Average of the (l, l-1) entries of an all-pairs matrix."""
    L = all_pairs.shape[0]
    if L < 2:
        raise CaptureError("need at least two layers")
    return float(np.mean([all_pairs[l, l - 1] for l in range(1, L)]))


def convergence_curve(capture, sample_sizes):
    """All-pairs matrices on nested prefixes of the examples, keyed by size."""
    sizes = [int(s) for s in sample_sizes]
    for s in sizes:
        if not 1 <= s <= capture.T:
            raise CaptureError(f"sample size {s} outside [1, {capture.T}]")
    wanted = set(sizes)
    acc = SimilarityAccumulator(capture.L, capture.H)
    out = {}
    for t in range(max(sizes)):
        acc.add(capture.scores[t])
        if acc.count in wanted:
            out[acc.count] = _all_pairs_from(acc.mean())
    return {s: out[s] for s in sizes}


@dataclass
class SimilarityReport:
    all_pairs: np.ndarray
    adjacent_profiles: np.ndarray  # may be None when L == 1
    T: int
    layer_ids: tuple
    model: str = ""
    dataset: str = ""
    convergence: dict = None

    def to_dict(self):
        d = {
            "T": self.T,
            "model": self.model,
            "dataset": self.dataset,
            "layer_ids": list(self.layer_ids),
            "orientation": "rows = source layer, columns = target layer",
            "all_pairs": self.all_pairs.tolist(),
            "adjacent_profiles": None if self.adjacent_profiles is None else self.adjacent_profiles.tolist(),
        }
        if self.convergence is not None:
            d["convergence"] = {str(k): v.tolist() for k, v in self.convergence.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def analyze(capture, model="", dataset="", sample_sizes=None):
    sims = mean_similarity(capture)
    report = SimilarityReport(
        all_pairs=_all_pairs_from(sims),
        adjacent_profiles=_adjacent_from(sims) if capture.L >= 2 else None,
        T=capture.T,
        layer_ids=capture.layer_ids,
        model=model,
        dataset=dataset,
    )
    if sample_sizes:
        report.convergence = convergence_curve(capture, sample_sizes)
    return report


# ---------------------------------------------------------------------------
# capture dump format: JSON header line, then (t, l, h)-ordered float64 blocks
# ---------------------------------------------------------------------------

def write_capture(path, capture):
    header = {"L": capture.L, "H": capture.H, "n": capture.n, "T": capture.T,
              "layer_ids": list(capture.layer_ids)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(capture.scores, dtype="<f8").tobytes())


def read_capture(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except ValueError:
            raise CaptureError(f"{path}: capture header is not JSON") from None
        shape = (header["T"], header["L"], header["H"], header["n"], header["n"])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != math.prod(shape):
        raise CaptureError(f"{path}: expected {math.prod(shape)} values, found {data.size}")
    return AttentionCapture(data.astype(np.float64).reshape(shape), layer_ids=header.get("layer_ids"))


# ---------------------------------------------------------------------------
# SVG heatmap
# ---------------------------------------------------------------------------

_RAMP = [(255, 255, 229), (217, 240, 163), (120, 198, 121), (35, 132, 67), (0, 69, 41)]


def _color(v):
    v = min(max(float(v), 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(v), len(_RAMP) - 2)
    f = v - i
    c = [round(a + (b - a) * f) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return "#%02x%02x%02x" % tuple(c)


def heatmap_svg(matrix, title="best-head similarity", labels=None, cell=44):
    """Self-contained SVG with a fixed 0..1 colour ramp and per-cell values."""
    m = np.asarray(matrix)
    rows, cols = m.shape
    if labels is None:
        labels = [str(i + 1) for i in range(max(rows, cols))]
    left, top = 60, 50
    width = left + cols * cell + 20
    height = top + rows * cell + 60
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="{left}" y="20" font-size="13">{title}</text>',
        f'<text x="{left}" y="38">rows = source layer l, columns = target layer l\'</text>',
    ]
    for j in range(cols):
        out.append(f'<text x="{left + j * cell + cell // 2}" y="{top - 4}" text-anchor="middle">L{labels[j]}</text>')
    for i in range(rows):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell // 2 + 4}" text-anchor="end">L{labels[i]}</text>')
        for j in range(cols):
            x = left + j * cell
            v = m[i, j]
            ink = "#ffffff" if v > 0.6 else "#000000"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(v)}" stroke="#ffffff"/>')
            out.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle" fill="{ink}">{v:.2f}</text>')
    ly = top + rows * cell + 20
    for k in range(11):
        out.append(f'<rect x="{left + k * 16}" y="{ly}" width="16" height="10" fill="{_color(k / 10)}"/>')
    out.append(f'<text x="{left}" y="{ly + 24}">0</text>')
    out.append(f'<text x="{left + 10 * 16 + 16}" y="{ly + 24}" text-anchor="end">1</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
