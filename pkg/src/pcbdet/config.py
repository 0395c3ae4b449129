"""Run configuration: one flat key=value file drives every CLI command.

The file format is deliberately dumb: ``key = value`` lines, ``#``
comments, no sections. Tuples are comma-separated. Unknown or duplicate
keys are errors so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .generator import GeneratorConfig
from .geometry import NmsParams
from .model import ModelConfig


class ConfigError(ValueError):
    """Bad key, bad value or duplicate key in a config file."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs; defaults describe the full-size recipe."""

    # dataset
    data_root: str = "data/synth"
    num_train: int = 1000
    num_test: int = 500
    image_size: int = 640
    data_seed: int = 0

    # model
    variant: str = "ours-mp"
    crop_size: int = 512
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    fuse_channels: int = 256

    # training
    seed: int = 0
    epochs: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 0.33
    lr_step_epochs: int = 100
    weight_decay: float = 5e-4
    regression_weight: float = 1.0
    checkpoint_every: int = 25

    # evaluation
    eval_iou_threshold: float = 0.33
    f_score_threshold: float = 0.5
    nms_iou_threshold: float = 0.5
    nms_score_threshold: float = 0.05
    max_detections: int = 100

    def to_model_config(self) -> ModelConfig:
        return ModelConfig.for_variant(
            self.variant,
            input_size=self.crop_size,
            backbone_channels=self.backbone_channels,
            fuse_channels=self.fuse_channels,
        )

    def to_generator_config(self) -> GeneratorConfig:
        return GeneratorConfig.for_size(self.image_size)

    def to_nms_params(self) -> NmsParams:
        return NmsParams(
            iou_threshold=self.nms_iou_threshold,
            score_threshold=self.nms_score_threshold,
            max_detections=self.max_detections,
        )

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Parse a key=value file; every key must be a RunConfig field."""
        defaults = cls()
        valid = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        seen: dict[str, object] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in valid:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                    + ", ".join(sorted(valid))
                )
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                seen[key] = _coerce(value, valid[key])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
        return cls(**seen)  # type: ignore[arg-type]

    def as_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(self.as_text())

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(raw: str, default):
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        element = default[0] if default else 1
        return tuple(type(element)(part.strip()) for part in raw.split(",") if part.strip())
    return raw
