"""Run configuration: defaults, JSON round-trip and invariant checks."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """A configuration invariant is violated."""


GCN_W_MODES = ("identity", "orthogonal", "trainable")
LOSS_ORDERS = ("all", "from_1")
SAMPLING = ("uniform", "popularity")


@dataclass
class ScaleConfig:
    session_len: int
    granularity: int

    def validate(self, max_len: int) -> None:
        if self.session_len < 1 or max_len % self.session_len:
            raise ConfigError(
                f"session length {self.session_len} does not divide max sequence length {max_len}")
        if self.granularity < 1:
            raise ConfigError("granularity must be at least 1")
        if self.granularity > self.session_len:
            raise ConfigError(
                f"granularity exceeds session length ({self.granularity} > {self.session_len})")


@dataclass
class ModelConfig:
    d: int = 64
    max_len: int = 200
    orders: int = 3
    gcn_w_mode: str = "identity"
    heads: int = 2
    ffn_width: int | None = None
    n_layers: int = 1
    # session counts 4 and 20 over N=200
    scales: list[ScaleConfig] = field(
        default_factory=lambda: [ScaleConfig(50, 10), ScaleConfig(10, 2)])
    lp_exponent: float = 2.0
    init_std: float = 0.02

    @property
    def hidden(self) -> int:
        return self.ffn_width if self.ffn_width is not None else 4 * self.d

    def validate(self) -> None:
        if self.d < 1 or self.max_len < 1:
            raise ConfigError("d and max_len must be positive")
        if self.orders < 1:
            raise ConfigError("orders (L) must be at least 1")
        if self.gcn_w_mode not in GCN_W_MODES:
            raise ConfigError(f"gcn_w_mode must be one of {GCN_W_MODES}, got {self.gcn_w_mode!r}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads {self.heads} does not divide d {self.d}")
        if self.hidden < 1 or self.n_layers < 0:
            raise ConfigError("ffn_width must be positive and n_layers non-negative")
        if len(self.scales) != 2:
            raise ConfigError(f"exactly two scales are required, got {len(self.scales)}")
        for scale in self.scales:
            scale.validate(self.max_len)
        if self.lp_exponent < 1:
            raise ConfigError(f"lp_exponent must be >= 1, got {self.lp_exponent}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    rho: float = 0.2
    theta1: float = 1e-5
    theta2: float = 1e-5
    epochs: int = 10
    seed: int = 0
    loss_orders: str = "all"
    probe_cutoff: int = 5

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"mask ratio rho must lie in (0, 1], got {self.rho}")
        if self.theta1 < 0 or self.theta2 < 0:
            raise ConfigError("theta1 and theta2 must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.loss_orders not in LOSS_ORDERS:
            raise ConfigError(f"loss_orders must be one of {LOSS_ORDERS}")


@dataclass
class EvalConfig:
    cutoffs: list[int] = field(default_factory=lambda: [5, 10])
    num_negatives: int = 99
    sampling: str = "uniform"
    exclude_history: bool = False

    def validate(self) -> None:
        if not self.cutoffs or any(k < 1 for k in self.cutoffs):
            raise ConfigError("cutoffs must be positive integers")
        if self.num_negatives < 0:
            raise ConfigError("num_negatives must be non-negative")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")


@dataclass
class DataConfig:
    path: str | None = None
    schema: list[str] = field(default_factory=lambda: ["user", "item", "behavior", "timestamp"])
    target_behavior: str = "buy"
    behaviors: list[str] | None = None
    header: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        known = {"model", "train", "eval", "data"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model_raw = dict(raw.get("model", {}))
        if "scales" in model_raw:
            model_raw["scales"] = [_scale(s) for s in model_raw["scales"]]
        try:
            return cls(
                model=ModelConfig(**model_raw),
                train=TrainConfig(**raw.get("train", {})),
                eval=EvalConfig(**raw.get("eval", {})),
                data=DataConfig(**raw.get("data", {})),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def override(self, section: str, **values: Any) -> None:
        target = getattr(self, section)
        for key, value in values.items():
            if value is None:
                continue
            if key == "scales":
                value = [_scale(s) for s in value]
            setattr(target, key, value)


def _scale(raw) -> ScaleConfig:
    if isinstance(raw, ScaleConfig):
        return raw
    if isinstance(raw, dict):
        return ScaleConfig(int(raw["session_len"]), int(raw["granularity"]))
    t, g = raw
    return ScaleConfig(int(t), int(g))
