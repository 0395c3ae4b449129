"""Training losses for the pairwise defect detector.

Classification is a softmax cross entropy over 7 classes (0 =
background) evaluated on every matched anchor plus a random sample of
background anchors, 3 background per matched anchor (capped by
availability; 16 when an image has no matches at all, so empty images
still push background down). Regression is smooth L1 on the encoded
offsets of matched anchors only. The two sums are added with a
regression weight and normalized by the matched-anchor count.

Softmax is computed manually with max subtraction and a probability
floor so extreme logits cannot produce non-finite loss values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .targets import MatchResult

NUM_CLASSES = 7  # background + 6 defect types
BACKGROUND_RATIO = 3
MIN_BACKGROUND = 16
PROB_FLOOR = 1e-12


class LossComputationError(RuntimeError):
    """Loss produced a non-finite value; carries the offending terms."""


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss terms for one batch (already normalized)."""

    total: torch.Tensor
    classification: torch.Tensor
    regression: torch.Tensor
    num_matched: int
    num_background: int


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth L1: 0.5 x^2 below 1, |x| - 0.5 above."""
    absx = x.abs()
    return torch.where(absx < 1.0, 0.5 * x * x, absx - 0.5)


def log_softmax_stable(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise log softmax with max subtraction and a floor at 1e-12."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    probs = shifted.exp()
    probs = probs / probs.sum(dim=-1, keepdim=True)
    return probs.clamp_min(PROB_FLOOR).log()


def sample_background(
    match: MatchResult, rng: np.random.Generator
) -> np.ndarray:
    """Pick background anchor indices for the classification term.

    Draws uniformly without replacement: 3 per matched anchor, at least
    16 when nothing matched, never more than are available.
    """
    background = match.background
    if match.num_matched > 0:
        want = BACKGROUND_RATIO * match.num_matched
    else:
        want = MIN_BACKGROUND
    take = min(want, background.size)
    if take == 0:
        return np.empty(0, dtype=np.int64)
    chosen = rng.choice(background, size=take, replace=False)
    return np.sort(chosen)


def classification_loss(
    logits: torch.Tensor, match: MatchResult, background_indices: np.ndarray
) -> torch.Tensor:
    """Summed cross entropy over matched plus sampled background anchors.

    Args:
        logits: (A, 7) raw class scores for one image.
        match: anchor assignment for the same image.
        background_indices: output of :func:`sample_background`.
    """
    device = logits.device
    terms = []
    fg = match.foreground
    if fg.size:
        fg_idx = torch.from_numpy(fg).to(device)
        fg_cls = torch.from_numpy(match.matched_class_of[fg]).to(device)
        log_probs = log_softmax_stable(logits[fg_idx])
        terms.append(-log_probs.gather(1, fg_cls.view(-1, 1)).sum())
    if background_indices.size:
        bg_idx = torch.from_numpy(background_indices).to(device)
        log_probs = log_softmax_stable(logits[bg_idx])
        terms.append(-log_probs[:, 0].sum())
    if not terms:
        return logits.sum() * 0.0
    return torch.stack(terms).sum()


def regression_loss(offsets: torch.Tensor, match: MatchResult) -> torch.Tensor:
    """Summed smooth L1 over matched anchors' four offset channels."""
    fg = match.foreground
    if not fg.size:
        return offsets.sum() * 0.0
    fg_idx = torch.from_numpy(fg).to(offsets.device)
    target = torch.from_numpy(match.regression_targets[fg]).to(
        device=offsets.device, dtype=offsets.dtype
    )
    return smooth_l1(offsets[fg_idx] - target).sum()


def total_loss(
    logits: torch.Tensor,
    offsets: torch.Tensor,
    matches: list[MatchResult],
    rng: np.random.Generator,
    regression_weight: float = 1.0,
) -> LossBreakdown:
    """Combined detection loss for a batch.

    Args:
        logits: (B, A, 7) class scores.
        offsets: (B, A, 4) predicted offsets.
        matches: one MatchResult per batch element.
        rng: drives background sampling only.
        regression_weight: multiplier on the regression term.

    Returns:
        LossBreakdown; each term is divided by the total matched-anchor
        count across the batch (floored at 1).

    Raises:
        LossComputationError: a term came out non-finite.
    """
    if logits.shape[0] != len(matches):
        raise ValueError(f"batch mismatch: {logits.shape[0]} logits vs {len(matches)} matches")

    cls_sum = logits.sum() * 0.0
    reg_sum = offsets.sum() * 0.0
    num_matched = 0
    num_background = 0
    for i, match in enumerate(matches):
        background = sample_background(match, rng)
        cls_sum = cls_sum + classification_loss(logits[i], match, background)
        reg_sum = reg_sum + regression_loss(offsets[i], match)
        num_matched += match.num_matched
        num_background += int(background.size)

    denom = max(num_matched, 1)
    classification = cls_sum / denom
    regression = reg_sum / denom
    total = classification + regression_weight * regression
    if not torch.isfinite(total):
        raise LossComputationError(
            "non-finite loss: "
            f"cls={classification.detach().item()!r} reg={regression.detach().item()!r}"
        )
    return LossBreakdown(
        total=total,
        classification=classification,
        regression=regression,
        num_matched=num_matched,
        num_background=num_background,
    )
