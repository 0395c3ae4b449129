"""Training loop, optimizer policy and the ablation runner.

Determinism contract: all run-time randomness (epoch shuffling, paired
augmentation, background sampling) is derived from seed sequences keyed
by (seed, epoch, stream, index), never from a shared stateful generator.
A run resumed from an epoch-k checkpoint therefore replays exactly the
draws the uninterrupted run would have made.

The optimizer is Adam with framework-default moments; weight decay is
applied to convolution weights only, never to batch-norm parameters or
biases. The learning rate steps down by a constant factor on a fixed
epoch schedule.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import Annotation, DatasetIndex, ImagePair, augment_pair, load_pair
from .evaluation import EvalReport, evaluate
from .losses import LossComputationError, total_loss
from .model import DefectDetector, load_checkpoint, pair_to_tensors, save_checkpoint
from .targets import match

logger = logging.getLogger(__name__)

# seed-sequence stream ids
_STREAM_ORDER = 0
_STREAM_AUGMENT = 1
_STREAM_BACKGROUND = 2


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the epoch and offending batch ids."""

    def __init__(self, epoch: int, batch_ids: list[str], detail: str):
        super().__init__(f"epoch {epoch}, batch {batch_ids}: {detail}")
        self.epoch = epoch
        self.batch_ids = batch_ids


@dataclass(frozen=True)
class TrainSample:
    pair: ImagePair
    annotations: tuple[Annotation, ...]


@dataclass
class TrainResult:
    model: DefectDetector
    history: list[float]
    checkpoint_path: Path | None


def load_samples(
    index: DatasetIndex, split: str = "train", allow_lossy: bool = False
) -> list[TrainSample]:
    """Materialize a split in memory (pairs are small binary rasters)."""
    return [
        TrainSample(pair=load_pair(rec, allow_lossy=allow_lossy), annotations=rec.annotations)
        for rec in index.split(split)
    ]


def learning_rate_at(epoch: int, run: RunConfig) -> float:
    """Stepped schedule: base rate decayed every ``lr_step_epochs``."""
    return run.learning_rate * run.lr_decay ** (epoch // run.lr_step_epochs)


def build_optimizer(model: DefectDetector, run: RunConfig) -> torch.optim.Adam:
    """Adam with decay on conv weights only.

    Batch-norm scales/offsets and all biases regularize poorly under L2;
    they go in a no-decay group.
    """
    decay, no_decay = [], []
    for module in model.modules():
        if isinstance(module, torch.nn.Conv2d):
            decay.append(module.weight)
            if module.bias is not None:
                no_decay.append(module.bias)
        elif isinstance(module, torch.nn.BatchNorm2d):
            no_decay.extend(p for p in module.parameters(recurse=False))
    counted = sum(p.numel() for p in decay) + sum(p.numel() for p in no_decay)
    total = sum(p.numel() for p in model.parameters())
    if counted != total:
        raise RuntimeError(f"optimizer grouping missed parameters: {counted} != {total}")
    return torch.optim.Adam(
        [
            {"params": decay, "weight_decay": run.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=run.learning_rate,
    )


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _prepare_batch(
    samples: list[TrainSample],
    indices: list[int],
    run: RunConfig,
    anchors,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor, list, list[str]]:
    templates, testeds, matches, ids = [], [], [], []
    for idx in indices:
        sample = samples[idx]
        pair, annotations = augment_pair(
            sample.pair,
            sample.annotations,
            _rng(run.seed, epoch, _STREAM_AUGMENT, idx),
            crop_size=run.crop_size,
        )
        t, q = pair_to_tensors(pair)
        templates.append(t)
        testeds.append(q)
        matches.append(match(anchors, annotations))
        ids.append(sample.pair.source_id or str(idx))
    return torch.cat(templates), torch.cat(testeds), matches, ids


def train(
    run: RunConfig,
    samples: list[TrainSample],
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    device: str = "cpu",
) -> TrainResult:
    """Train a detector on in-memory samples.

    Args:
        run: hyperparameters; ``run.epochs`` is the total epoch count, so
            resuming a finished run is a no-op.
        samples: output of :func:`load_samples`.
        out_dir: where checkpoints go; None disables checkpointing.
        resume_from: checkpoint path to continue from.

    Raises:
        TrainingDiverged: the loss went non-finite.
    """
    if not samples:
        raise ValueError("no training samples")

    history: list[float] = []
    start_epoch = 0
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        model.to(device)
        optimizer = build_optimizer(model, run)
        if payload.get("optimizer_state") is None:
            raise ValueError(f"{resume_from}: checkpoint has no optimizer state")
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"]
        history = list(payload["metadata"].get("history", []))
    else:
        torch.manual_seed(run.seed)
        model = DefectDetector(run.to_model_config()).to(device)
        optimizer = build_optimizer(model, run)

    anchors = model.config.anchor_set((run.crop_size, run.crop_size))
    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoint_path: Path | None = None

    def save(epoch_done: int) -> Path:
        path = out_dir / f"checkpoint_{epoch_done:05d}.pt"
        save_checkpoint(
            path,
            model,
            epoch=epoch_done,
            optimizer=optimizer,
            metadata={"run_config": run.to_dict(), "history": history},
        )
        return path

    model.train()
    for epoch in range(start_epoch, run.epochs):
        lr = learning_rate_at(epoch, run)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = _rng(run.seed, epoch, _STREAM_ORDER).permutation(len(samples))
        epoch_losses = []
        started = time.perf_counter()
        for batch_index, lo in enumerate(range(0, len(order), run.batch_size)):
            indices = [int(i) for i in order[lo : lo + run.batch_size]]
            templates, testeds, matches, ids = _prepare_batch(
                samples, indices, run, anchors, epoch
            )
            logits, offsets = model(templates.to(device), testeds.to(device))
            try:
                breakdown = total_loss(
                    logits,
                    offsets,
                    matches,
                    _rng(run.seed, epoch, _STREAM_BACKGROUND, batch_index),
                    regression_weight=run.regression_weight,
                )
            except LossComputationError as exc:
                raise TrainingDiverged(epoch, ids, str(exc)) from exc
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            epoch_losses.append(breakdown.total.detach().item())

        history.append(float(np.mean(epoch_losses)))
        logger.info(
            "epoch %d/%d lr %.2e loss %.4f (%.1fs)",
            epoch + 1, run.epochs, lr, history[-1], time.perf_counter() - started,
        )
        if out_dir is not None and (epoch + 1) % run.checkpoint_every == 0:
            checkpoint_path = save(epoch + 1)

    if out_dir is not None and (checkpoint_path is None or start_epoch < run.epochs):
        checkpoint_path = save(run.epochs)
    return TrainResult(model=model, history=history, checkpoint_path=checkpoint_path)


def detect_all(
    model: DefectDetector, samples: list[TrainSample], run: RunConfig
) -> dict[str, list]:
    """Run detection over samples, keyed by source id."""
    params = run.to_nms_params()
    return {s.pair.source_id: model.detect(s.pair, params) for s in samples}


def evaluate_model(
    model: DefectDetector, samples: list[TrainSample], run: RunConfig
) -> EvalReport:
    """Detect on every sample and score against its annotations."""
    detections = detect_all(model, samples, run)
    truths = {s.pair.source_id: list(s.annotations) for s in samples}
    return evaluate(
        detections,
        truths,
        iou_threshold=run.eval_iou_threshold,
        score_threshold=run.f_score_threshold,
    )


@dataclass(frozen=True)
class AblationResult:
    """mAP per (variant, seed) plus per-variant means."""

    map_by_variant_seed: dict[str, dict[int, float]]

    def mean(self, variant: str) -> float:
        values = self.map_by_variant_seed[variant]
        return float(np.mean(list(values.values())))

    def as_text(self) -> str:
        lines = []
        for variant, by_seed in self.map_by_variant_seed.items():
            per_seed = "  ".join(f"seed {s}: {m:.4f}" for s, m in sorted(by_seed.items()))
            lines.append(f"{variant:<8} mean mAP {self.mean(variant):.4f}  ({per_seed})")
        return "\n".join(lines)


def run_ablation(
    run: RunConfig,
    train_samples: list[TrainSample],
    test_samples: list[TrainSample],
    variants: tuple[str, ...] = ("ours-mp", "non-gpp"),
    seeds: tuple[int, ...] = (0, 1, 2),
    out_dir: str | Path | None = None,
) -> AblationResult:
    """Train each variant with each seed on the same data and compare mAP."""
    results: dict[str, dict[int, float]] = {}
    for variant in variants:
        results[variant] = {}
        for seed in seeds:
            cfg = replace(run, variant=variant, seed=seed)
            run_dir = Path(out_dir) / f"{variant}_seed{seed}" if out_dir is not None else None
            outcome = train(cfg, train_samples, out_dir=run_dir)
            report = evaluate_model(outcome.model, test_samples, cfg)
            results[variant][seed] = report.mean_ap
            logger.info("ablation %s seed %d: mAP %.4f", variant, seed, report.mean_ap)
    return AblationResult(map_by_variant_seed=results)
