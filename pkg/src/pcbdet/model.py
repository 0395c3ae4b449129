"""Pairwise defect detection network.

A weight-shared convolutional backbone embeds the template and tested
images separately; their feature difference (template minus tested) is
the only thing downstream layers see. The difference map is pooled at
several strides, the pooled maps are combined into overlapping groups
(each upsampled to its group's finest resolution, concatenated and
fused by a 3x3 conv), and a small convolutional head on each group
predicts, per anchor, 7 class logits and 4 box offsets.

All spatial bookkeeping (pool strides, anchor grids, head layout) is
derived from one ModelConfig so the anchor set and the head outputs
cannot drift apart.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .anchors import DEFAULT_RATIOS, DEFAULT_SCALES, AnchorSet, generate_anchors, grid_dims_for
from .data import ImagePair
from .geometry import Box, EmptyClipError, NmsParams, ScoredBox, clip_box, nms
from .losses import NUM_CLASSES
from .targets import decode_boxes

DEFAULT_GROUPS = ((1, 2, 4), (2, 4, 8), (4, 8, 12))
SINGLE_STRIDE_GROUPS = ((1,), (4,), (12,))

VARIANTS = ("ours-mp", "ours-ap", "non-gpp")


class ModelConfigError(ValueError):
    """ModelConfig fields are inconsistent."""


class ShapeError(RuntimeError):
    """An input's spatial size is incompatible with the configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint payload is missing keys or disagrees with the model."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Attributes:
        input_size: square training resolution; inference may run at any
            size the pool strides fit into.
        backbone_channels: widths of the backbone stages; each stage
            halves the resolution, so the backbone stride is
            2 ** len(backbone_channels).
        fuse_channels: output width of each group's fusion conv.
        pool: "max" or "avg", the pooling used to build the pyramid.
        groups: per-group pool strides, finest first; each group's head
            predicts on the grid of its first stride.
        scales: anchor scale per group, fraction of input size.
        ratios: anchor aspect ratios shared by all groups.
    """

    input_size: int = 512
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    fuse_channels: int = 256
    pool: str = "max"
    groups: tuple[tuple[int, ...], ...] = DEFAULT_GROUPS
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    def __post_init__(self) -> None:
        if self.input_size < self.backbone_stride:
            raise ModelConfigError(
                f"input_size {self.input_size} below backbone stride {self.backbone_stride}"
            )
        if not self.backbone_channels or any(c < 1 for c in self.backbone_channels):
            raise ModelConfigError(f"bad backbone_channels: {self.backbone_channels}")
        if self.fuse_channels < 1:
            raise ModelConfigError(f"fuse_channels must be positive: {self.fuse_channels}")
        if self.pool not in ("max", "avg"):
            raise ModelConfigError(f"pool must be 'max' or 'avg': {self.pool!r}")
        if not self.groups:
            raise ModelConfigError("groups is empty")
        for group in self.groups:
            if not group:
                raise ModelConfigError("empty stride group")
            if any(int(s) != s or s < 1 for s in group):
                raise ModelConfigError(f"strides must be positive integers: {group}")
            if list(group) != sorted(group) or len(set(group)) != len(group):
                raise ModelConfigError(f"group strides must be strictly increasing: {group}")
        if len(self.scales) != len(self.groups):
            raise ModelConfigError(
                f"{len(self.scales)} scales for {len(self.groups)} groups"
            )

    @property
    def backbone_stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def first_strides(self) -> tuple[int, ...]:
        return tuple(group[0] for group in self.groups)

    def feature_hw(self, input_hw: tuple[int, int] | None = None) -> tuple[int, int]:
        h, w = input_hw if input_hw is not None else (self.input_size, self.input_size)
        for _ in self.backbone_channels:
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError(f"input {input_hw} collapses to nothing in the backbone")
        max_stride = max(s for group in self.groups for s in group)
        if max_stride > min(h, w):
            raise ShapeError(
                f"pool stride {max_stride} exceeds the {h}x{w} feature map; "
                f"use a larger input or smaller strides"
            )
        return h, w

    def grid_dims(self, input_hw: tuple[int, int] | None = None) -> tuple[tuple[int, int], ...]:
        return grid_dims_for(self.feature_hw(input_hw), self.first_strides)

    def num_anchors(self, input_hw: tuple[int, int] | None = None) -> int:
        return len(self.ratios) * sum(m * n for m, n in self.grid_dims(input_hw))

    def anchor_set(self, input_hw: tuple[int, int] | None = None) -> AnchorSet:
        return generate_anchors(self.grid_dims(input_hw), self.scales, self.ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        def tup(value):
            return tuple(tup(v) for v in value) if isinstance(value, (list, tuple)) else value

        return cls(**{k: tup(v) for k, v in payload.items()})

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        """Named configurations compared in the ablation.

        ``ours-mp``: max-pooled pyramid with overlapping stride groups.
        ``ours-ap``: the same with average pooling.
        ``non-gpp``: max pooling but one stride per head, no grouping.
        """
        key = variant.lower().replace("_", "-")
        if key not in VARIANTS:
            raise ModelConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        base = {"pool": "max", "groups": DEFAULT_GROUPS}
        if key == "ours-ap":
            base["pool"] = "avg"
        elif key == "non-gpp":
            base["groups"] = SINGLE_STRIDE_GROUPS
        base.update(overrides)
        return cls(**base)


def _stage(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class Backbone(nn.Module):
    """Stack of conv-BN-ReLU stages, each ending in a 2x2 max pool."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        widths = (1,) + tuple(channels)
        self.stages = nn.Sequential(
            *(_stage(cin, cout) for cin, cout in zip(widths[:-1], widths[1:]))
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


def pool_to_stride(x: torch.Tensor, stride: int, mode: str) -> torch.Tensor:
    """Pool with window == stride, replicate-padding up to a multiple.

    The padding makes the output ceil(H/stride) x ceil(W/stride), so no
    edge row is ever dropped. Stride 1 is the identity.
    """
    if stride == 1:
        return x
    h, w = x.shape[-2:]
    pad_h = -h % stride
    pad_w = -w % stride
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    if mode == "max":
        return F.max_pool2d(x, stride)
    return F.avg_pool2d(x, stride)


class GroupPyramidPooling(nn.Module):
    """Multi-stride pooling with overlapping fusion groups.

    Each configured stride is pooled once; each group upsamples its
    coarser members to the first member's resolution (bilinear, aligned
    corners), concatenates along channels and fuses with conv-BN-ReLU.
    Returns one map per group, finest grid first.
    """

    def __init__(self, in_channels: int, fuse_channels: int,
                 groups: tuple[tuple[int, ...], ...], pool: str):
        super().__init__()
        self.groups = groups
        self.pool = pool
        self.fuse = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels * len(group), fuse_channels, 3, padding=1),
                nn.BatchNorm2d(fuse_channels),
                nn.ReLU(inplace=True),
            )
            for group in groups
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        strides = sorted({s for group in self.groups for s in group})
        if strides[-1] > min(x.shape[-2:]):
            raise ShapeError(
                f"pool stride {strides[-1]} exceeds the "
                f"{x.shape[-2]}x{x.shape[-1]} feature map"
            )
        pooled = {s: pool_to_stride(x, s, self.pool) for s in strides}
        outputs = []
        for group, fuse in zip(self.groups, self.fuse):
            base = pooled[group[0]]
            maps = [base]
            maps.extend(
                F.interpolate(pooled[s], size=base.shape[-2:], mode="bilinear",
                              align_corners=True)
                for s in group[1:]
            )
            outputs.append(fuse(torch.cat(maps, dim=1)))
        return outputs


class PredictionHead(nn.Module):
    """One 3x3 conv per group mapping to per-anchor logits and offsets.

    Output channels are laid out ratio-major: for each of the R aspect
    ratios, 7 class logits then 4 offsets. Flattening follows the anchor
    order (row-major grid cells, then ratio), so row i of the output
    aligns with anchor i.
    """

    def __init__(self, in_channels: int, num_groups: int, num_ratios: int):
        super().__init__()
        self.num_ratios = num_ratios
        self.per_anchor = NUM_CLASSES + 4
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels, num_ratios * self.per_anchor, 3, padding=1)
            for _ in range(num_groups)
        )

    def forward(self, maps: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        rows = []
        for conv, feature in zip(self.convs, maps):
            out = conv(feature)
            b, _, h, w = out.shape
            out = out.view(b, self.num_ratios, self.per_anchor, h, w)
            out = out.permute(0, 3, 4, 1, 2).reshape(b, h * w * self.num_ratios, self.per_anchor)
            rows.append(out)
        flat = torch.cat(rows, dim=1)
        return flat[..., :NUM_CLASSES], flat[..., NUM_CLASSES:]


class DefectDetector(nn.Module):
    """End-to-end pairwise detector; see the module docstring."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config if config is not None else ModelConfig()
        self.backbone = Backbone(self.config.backbone_channels)
        self.pyramid = GroupPyramidPooling(
            self.config.backbone_channels[-1],
            self.config.fuse_channels,
            self.config.groups,
            self.config.pool,
        )
        self.head = PredictionHead(
            self.config.fuse_channels, len(self.config.groups), len(self.config.ratios)
        )

    def difference_features(self, template: torch.Tensor, tested: torch.Tensor) -> torch.Tensor:
        """Shared-weight embeddings subtracted: template minus tested.

        The sign is part of the contract: copper missing from the tested
        board shows up positive, extra copper negative.
        """
        if template.shape != tested.shape:
            raise ShapeError(f"pair shapes differ: {template.shape} vs {tested.shape}")
        return self.backbone(template) - self.backbone(tested)

    def forward_from_difference(self, diff: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the pyramid and head on an externally supplied difference map."""
        return self.head(self.pyramid(diff))

    def forward(self, template: torch.Tensor, tested: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict (B, A, 7) class logits and (B, A, 4) box offsets."""
        return self.forward_from_difference(self.difference_features(template, tested))

    def anchors_for(self, input_hw: tuple[int, int] | None = None) -> AnchorSet:
        return self.config.anchor_set(input_hw)

    @torch.no_grad()
    def detect(self, pair: ImagePair, params: NmsParams = NmsParams()) -> list[ScoredBox]:
        """Detect defects on one image pair.

        Runs in eval mode at the pair's native resolution, softmaxes the
        logits, decodes offsets against the matching anchor set, clips to
        the image and applies per-class NMS.
        """
        was_training = self.training
        self.eval()
        try:
            template, tested = pair_to_tensors(pair)
            device = next(self.parameters()).device
            logits, offsets = self.forward(template.to(device), tested.to(device))
        finally:
            self.train(was_training)

        anchors = self.anchors_for(pair.shape)
        scores = torch.softmax(logits[0].double(), dim=-1).cpu().numpy()
        centers = decode_boxes(offsets[0].double().cpu().numpy(), anchors.boxes)

        candidates = []
        for a in np.flatnonzero(scores[:, 1:].max(axis=1) >= params.score_threshold):
            try:
                box = clip_box(Box(*centers[a]))
            except (EmptyClipError, ValueError):
                continue
            for c in range(1, NUM_CLASSES):
                if scores[a, c] >= params.score_threshold:
                    candidates.append(ScoredBox(box=box, score=float(scores[a, c]), class_id=c))
        return nms(
            candidates,
            iou_threshold=params.iou_threshold,
            score_threshold=params.score_threshold,
            max_detections=params.max_detections,
        )


def pair_to_tensors(pair: ImagePair) -> tuple[torch.Tensor, torch.Tensor]:
    """Lift a binary image pair to (1, 1, H, W) float32 tensors."""
    def lift(img: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(img)).float().unsqueeze(0).unsqueeze(0)

    return lift(pair.template), lift(pair.tested)


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: DefectDetector,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    metadata: dict | None = None,
) -> None:
    """Write a resumable checkpoint: config, weights, optimizer, epoch."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "metadata": dict(metadata or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DefectDetector, dict]:
    """Rebuild a model from a checkpoint; returns (model, full payload).

    Raises:
        CheckpointError: missing keys, unknown version, or weight shapes
            that disagree with the stored configuration.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    required = {"format_version", "model_config", "model_state", "epoch"}
    missing = required - set(payload)
    if missing:
        raise CheckpointError(f"{path}: missing keys {sorted(missing)}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {payload['format_version']} "
            f"(this code reads {CHECKPOINT_VERSION})"
        )

    model = DefectDetector(ModelConfig.from_dict(payload["model_config"]))
    expected = model.state_dict()
    saved = payload["model_state"]
    wrong = [
        f"{k}: saved {tuple(saved[k].shape)} vs model {tuple(v.shape)}"
        for k, v in expected.items()
        if k in saved and tuple(saved[k].shape) != tuple(v.shape)
    ]
    absent = sorted(set(expected) - set(saved))
    if wrong or absent:
        detail = "; ".join(wrong + [f"{k}: missing" for k in absent])
        raise CheckpointError(f"{path}: state disagrees with config: {detail}")
    model.load_state_dict(saved)
    return model, payload
