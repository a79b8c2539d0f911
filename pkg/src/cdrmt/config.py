"""Run configuration: one JSON document, validated before any run and echoed beside outputs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError
from .harness.scenes import SceneConfig

BENCHMARK_EXPRESSIONS = [
    "black cars in the right",
    "left people who are walking",
    "moving vehicles",
    "vehicles in light color",
    "women",
    "parked cars",
    "cars in the left",
    "people who are standing",
    "red cars which are moving",
    "right people",
    "white cars in the left",
    "cars in silver",
]


@dataclass
class ModelConfig:
    d: int = 32
    text_dim: int = 32
    channels: int = 16
    grid_h: int = 8
    grid_w: int = 8
    num_queries: int = 20  # full-scale reference: 300
    decoder_layers: int = 4  # full-scale reference: 6
    bif_layers: int = 2
    context_layers: int = 1
    ffn_ratio: int = 4
    hash_size: int = 256
    max_text: int = 32
    use_psdql: bool = True
    inject_detect: bool = True
    inject_track: bool = True
    injection_order: str = "static-first"
    qsi_softmax: bool = False
    fuse_ln_last: bool = False


@dataclass
class LossConfig:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    ref: float = 2.0
    struct: float = 2.0
    lambda_angle: float = 0.4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    scc_cross_expression: bool = True


@dataclass
class Thresholds:
    confidence: float = 0.7
    beta_ref: float = 0.5
    max_misses: int = 3
    dedup_iou: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 9
    optimizer: str = "adam"
    lr: float = 3e-4
    lr_embed: float = 3e-4
    decay_epoch: int | None = 7  # None: two thirds of the way through
    decay_factor: float = 0.1
    clip_norm: float | None = None


@dataclass
class DataConfig:
    num_scenes: int = 8
    scene: SceneConfig = field(default_factory=SceneConfig)
    expressions: list[str] = field(default_factory=lambda: list(BENCHMARK_EXPRESSIONS))


@dataclass
class RunConfig:
    seed: int = 42
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.d < 4 or m.text_dim < 4:
            raise ConfigError("model widths must be >= 4")
        if m.decoder_layers < 2 or m.decoder_layers % 2:
            raise ConfigError("decoder_layers must be even and >= 2")
        if m.bif_layers < 1 or m.context_layers < 1 or m.num_queries < 1:
            raise ConfigError("bif_layers, context_layers and num_queries must be >= 1")
        if m.injection_order not in ("static-first", "motion-first"):
            raise ConfigError(f"unknown injection_order {m.injection_order!r}")
        if m.channels < 9:
            raise ConfigError("channels must hold the attribute layout (>= 9)")
        for f in fields(self.loss):
            v = getattr(self.loss, f.name)
            if isinstance(v, float) and v < 0:
                raise ConfigError(f"loss.{f.name} must be >= 0")
        th = self.thresholds
        if not (0 <= th.confidence <= 1 and 0 <= th.beta_ref <= 1):
            raise ConfigError("thresholds must lie in [0, 1]")
        if th.max_misses < 1:
            raise ConfigError("max_misses must be >= 1")
        if self.train.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.train.optimizer!r}")
        if self.train.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.data.expressions:
            raise ConfigError("at least one expression is required")
        if self.data.num_scenes < 1:
            raise ConfigError("num_scenes must be >= 1")
        self.data.scene.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    if cls is SceneConfig:
        try:
            return SceneConfig.from_dict(data)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
