from dataclasses import dataclass, field, fields

from .schedule import ConfigError, ReuseSchedule

ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder-only Transformer hyperparameters.

    ``norm`` is recorded for forward compatibility; only pre-norm blocks are
    implemented. ``detach_reused`` stops gradients from flowing back through
    reused score matrices into the layer that computed them.
    """

    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_len: int
    activation: str = "gelu"
    schedule: ReuseSchedule = field(default_factory=ReuseSchedule)
    norm: str = "pre"
    init_std: float = 0.02
    ln_eps: float = 1e-5
    detach_reused: bool = False

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_len"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.norm != "pre":
            raise ConfigError(f"only pre-norm blocks are implemented, got norm={self.norm!r}")
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive")
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ReuseSchedule.from_dict(self.schedule))
        self.schedule.plan(self.n_layers, self.n_heads)

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def plan(self):
        return self.schedule.plan(self.n_layers, self.n_heads)

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ModelConfig(**d)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = ReuseSchedule.from_dict(d["schedule"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
