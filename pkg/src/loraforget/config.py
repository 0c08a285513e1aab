"""Run configuration and its flat ``key=value`` text form."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Optional

from .losses import LossWeights

PHASES = ("joint", "ascent", "restore")
SCOPES = ("all-adapters", "head-adapters-only")
TASKS = ("segmentation", "classification")
FORGET_OBJECTIVES = ("background", "ascent-composite", "random-label", "entropy")


class ConfigError(ValueError):
    """Unknown key, bad value or inconsistent schedule."""


class Phase(NamedTuple):
    phase: str
    epochs: int
    scope: str
    lr: Optional[float] = None

    def to_text(self) -> str:
        base = f"{self.phase}:{self.epochs}:{self.scope}"
        return base if self.lr is None else f"{base}:{self.lr!r}"


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` comments and blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_schedule(text: str) -> list[Phase]:
    """``ascent:5:all-adapters,restore:10:head-adapters-only[:lr]``."""
    phases = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        parts = chunk.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"schedule entry {chunk!r} must be phase:epochs:scope[:lr]")
        try:
            epochs = int(parts[1])
            lr = float(parts[3]) if len(parts) == 4 else None
        except ValueError as exc:
            raise ConfigError(f"schedule entry {chunk!r}: {exc}") from None
        phases.append(Phase(parts[0], epochs, parts[2], lr))
    return phases


def default_schedule(mode: str, epochs: int = 15) -> list[Phase]:
    """Two-phase: a third of the epochs strong unlearning, the rest restore."""
    if mode == "joint":
        return [Phase("joint", epochs, "all-adapters")]
    if mode == "two-phase":
        ascent = max(1, epochs // 3)
        return [Phase("ascent", ascent, "all-adapters"),
                Phase("restore", epochs - ascent, "head-adapters-only")]
    raise ConfigError(f"unknown mode {mode!r} (joint | two-phase)")


@dataclass
class UnlearnConfig:
    task: str = "segmentation"
    lr: float = 1e-4
    batch_size: int = 16
    forget_batch_size: int = 0  # 0: same as batch_size
    epochs: int = 15
    schedule: list = field(default_factory=lambda: default_schedule("two-phase", 15))
    weights: LossWeights = field(default_factory=LossWeights)
    lora_r: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    lora_policy: tuple = ("decoder", "head")
    lora_dropout_in_unlearn: bool = True
    forget_objective: str = "ascent-composite"
    restore_supervised: bool = True
    seed: int = 0
    teacher_epochs: int = 60
    teacher_lr: float = 3e-3
    teacher_target: float = 0.85
    teacher_target_cls: float = 0.80
    teacher_min_epochs: int = 0
    feature_point: str = "decoder"
    eval_every_epoch: bool = True
    debug_checks: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def mode(self) -> str:
        return "joint" if any(p.phase == "joint" for p in self.schedule) else "two-phase"

    @property
    def policy(self) -> tuple:
        """Adapter tags for the task's network; ``decoder`` means the
        classifier's ``trunk`` when the task is classification."""
        if self.task == "classification":
            return tuple(dict.fromkeys("trunk" if t == "decoder" else t for t in self.lora_policy))
        return tuple(self.lora_policy)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.schedule:
            raise ConfigError("schedule must not be empty")
        for p in self.schedule:
            if p.phase not in PHASES:
                raise ConfigError(f"unknown phase {p.phase!r}")
            if p.scope not in SCOPES:
                raise ConfigError(f"unknown scope {p.scope!r}")
            if p.epochs < 0:
                raise ConfigError(f"negative epoch count in phase {p.phase}")
            if p.scope == "head-adapters-only" and "head" not in self.lora_policy:
                raise ConfigError("head-adapters-only scope needs 'head' in lora_policy")
        if self.forget_objective not in FORGET_OBJECTIVES:
            raise ConfigError(f"forget_objective must be one of {FORGET_OBJECTIVES}")
        seg_only = ("background", "ascent-composite")
        if self.task == "classification" and self.forget_objective in seg_only:
            raise ConfigError(f"forget_objective {self.forget_objective!r} is segmentation-only")
        if self.task == "segmentation" and self.forget_objective not in seg_only:
            raise ConfigError(f"forget_objective {self.forget_objective!r} is classification-only")
        if self.forget_batch_size < 0 or self.teacher_epochs < 1:
            raise ConfigError("forget_batch_size must be >= 0 and teacher_epochs >= 1")
        if self.lr <= 0 or self.teacher_lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr, teacher_lr and batch_size must be positive")
        self.weights.validate()

    # -- flat text form ----------------------------------------------------
    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "weights":
                out.update({k: repr(v) for k, v in asdict(value).items()})
            elif f.name == "schedule":
                out["schedule"] = ",".join(p.to_text() for p in value)
            elif f.name == "lora_policy":
                out["lora_policy"] = ",".join(value)
            elif isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            else:
                out[f.name] = repr(value) if isinstance(value, float) else str(value)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def keys(cls) -> set[str]:
        names = {f.name for f in fields(cls)} - {"weights"}
        return names | {f.name for f in fields(LossWeights)}

    @classmethod
    def from_dict(cls, raw: dict[str, str], base: "UnlearnConfig | None" = None) -> "UnlearnConfig":
        """Build from string values; unknown keys are fatal."""
        unknown = set(raw) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        base = base or cls()
        current = base.to_dict()
        current.update(raw)
        weight_names = {f.name for f in fields(LossWeights)}
        try:
            weights = LossWeights(**{k: float(current[k]) for k in weight_names})
            kwargs = {}
            for f in fields(cls):
                if f.name == "weights":
                    continue
                value = current[f.name]
                if f.name == "schedule":
                    kwargs[f.name] = parse_schedule(value)
                elif f.name == "lora_policy":
                    kwargs[f.name] = tuple(t for t in value.split(",") if t)
                elif f.type == "bool":
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ConfigError(f"{f.name}: expected true/false, got {value!r}")
                    kwargs[f.name] = value.lower() in ("true", "1")
                elif f.type == "int":
                    kwargs[f.name] = int(value)
                elif f.type == "float":
                    kwargs[f.name] = float(value)
                else:
                    kwargs[f.name] = value
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        return cls(weights=weights, **kwargs)

    @classmethod
    def from_text(cls, text: str, base: "UnlearnConfig | None" = None) -> "UnlearnConfig":
        return cls.from_dict(parse_kv(text), base)
