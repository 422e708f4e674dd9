"""Per-layer plans of exact vs. reused attention heads."""

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional


class ConfigError(ValueError):
    """Invalid model or schedule configuration."""


class Variant(str, Enum):
    BASELINE = "baseline"
    PARTIAL = "partial"
    FULL = "full"
    ALTERNATE = "alternate"
    ALL_END = "allend"
    SKIP = "skip"


class LayerPlan(NamedTuple):
    exact: int  # heads computing fresh scores; the rest reuse
    skip: bool  # no attention sublayer at all


@dataclass(frozen=True)
class ReuseSchedule:
    """Which layers reuse attention scores and how many heads they reuse.

    ``P`` is the number of reuse (or skip) layers and ``K`` the number of
    reused heads per reuse layer. Either may be left as ``None`` when the
    variant determines it (``K = H`` for whole-layer variants, ``P = L - 2``
    for partial reuse).

    Layers are numbered from 1 in plans and error messages.
    """

    variant: Variant = Variant.BASELINE
    P: Optional[int] = None
    K: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("P", "K"):
            val = getattr(self, name)
            if val is not None and (not isinstance(val, int) or val < 0):
                raise ConfigError(f"schedule {name} must be a non-negative integer, got {val!r}")

    def resolve(self, n_layers, n_heads):
        """Return ``(P, K)`` with variant defaults filled in and validated."""
        L, H = n_layers, n_heads
        v = self.variant
        P, K = self.P, self.K
        if v is Variant.BASELINE:
            if (P or 0) != 0 or (K or 0) != 0:
                raise ConfigError("baseline schedule takes no P/K")
            return 0, 0
        if v is Variant.PARTIAL:
            want = max(L - 2, 0)
            if P is not None and P != want:
                raise ConfigError(f"partial-layer reuse fixes P = L-2 = {want}, got P={P}")
            if K is None:
                raise ConfigError("partial-layer reuse needs K")
            P = want
        else:
            if K is not None and K != H and v is not Variant.SKIP:
                raise ConfigError(f"{v.value} reuse reuses all heads: K must equal H={H}, got K={K}")
            K = H
            if P is None:
                if v is Variant.ALTERNATE:
                    P = L // 2
                else:
                    raise ConfigError(f"{v.value} schedule needs P")
        if K > H:
            raise ConfigError(f"K={K} exceeds the head count H={H}")
        if P > L - 1:
            raise ConfigError(f"P={P} must be at most L-1={L - 1}")
        if v is Variant.ALTERNATE and 2 * P > L:
            raise ConfigError(f"alternate reuse of P={P} even layers needs L >= {2 * P}, got L={L}")
        if v is Variant.ALL_END and P > L - 2:
            raise ConfigError(f"allend reuse keeps the first and last layers exact: P <= L-2={L - 2}")
        return P, K

    def plan(self, n_layers, n_heads):
        """Tuple of :class:`LayerPlan`, one per layer."""
        L, H = n_layers, n_heads
        P, K = self.resolve(L, H)
        exact = [H] * L
        skip = [False] * L
        v = self.variant
        if v in (Variant.PARTIAL, Variant.FULL):
            for layer in range(2, P + 2):
                exact[layer - 1] = H - K
        elif v is Variant.ALTERNATE:
            for i in range(1, P + 1):
                exact[2 * i - 1] = 0
        elif v is Variant.ALL_END:
            for layer in range(L - P, L):
                exact[layer - 1] = 0
        elif v is Variant.SKIP:
            for layer in range(2, P + 2):
                skip[layer - 1] = True
        return tuple(LayerPlan(e, s) for e, s in zip(exact, skip))

    def to_dict(self):
        return {"variant": self.variant.value, "P": self.P, "K": self.K}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"variant", "P", "K"}
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        try:
            variant = Variant(d.get("variant", "baseline"))
        except ValueError:
            raise ConfigError(
                f"unknown schedule variant {d.get('variant')!r}; "
                f"expected one of {[v.value for v in Variant]}"
            ) from None
        return cls(variant, d.get("P"), d.get("K"))
