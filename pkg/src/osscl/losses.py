"""Training objectives.

Three pieces: a label-noise-tolerant supervised contrastive loss over
unit-sphere embeddings, a mixup-weighted cross entropy over margin
logits, and their unweighted sum.  All are pure functions of their
inputs and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ArcFaceHead

# reductions over anchors: "mean" divides the anchor sum by the batch
# size, "sum" leaves it as is, "mean_valid" averages over anchors that
# actually have positives
REDUCTIONS = ("mean", "sum", "mean_valid")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.02
    reduction: str = "mean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


def positive_mask(labels: torch.Tensor) -> torch.Tensor:
    """Same-label pairs with the diagonal removed.

    Built from the original (pre-mix) labels only; the shuffled labels
    never enter the mask, which is what makes the contrast noisy under
    mixup.
    """
    eq = labels.view(-1, 1) == labels.view(1, -1)
    return eq & ~torch.eye(len(labels), dtype=torch.bool, device=labels.device)


def supcon_noise_loss(
    z: torch.Tensor,
    y_a: torch.Tensor,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> torch.Tensor:
    """Supervised contrastive loss over unit-norm rows.

    For each anchor i, positives are the other samples sharing its
    original label and the denominator runs over every other sample.
    Anchors without positives contribute zero.  Stabilized by
    subtracting the per-anchor maximum similarity.
    """
    if z.ndim != 2:
        raise ValueError(f"z must be (B, E), got shape {tuple(z.shape)}")
    b = z.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    norms = z.norm(dim=1)
    if bool(((norms - 1.0).abs() > 1e-4).any()):
        raise ValueError("z rows must be unit-norm (tolerance 1e-4)")

    sim = (z @ z.T) / cfg.temperature
    off_diag = ~torch.eye(b, dtype=torch.bool, device=z.device)
    row_max = sim.masked_fill(~off_diag, float("-inf")).max(dim=1, keepdim=True).values
    logits = sim - row_max.detach()
    exp_sum = (logits.exp() * off_diag).sum(dim=1)
    log_prob = logits - exp_sum.log().unsqueeze(1)

    pos = positive_mask(y_a)
    pos_counts = pos.sum(dim=1)
    per_anchor = -(log_prob * pos).sum(dim=1) / pos_counts.clamp_min(1)
    per_anchor = per_anchor * (pos_counts > 0)

    if cfg.reduction == "sum":
        return per_anchor.sum()
    if cfg.reduction == "mean":
        return per_anchor.sum() / b
    n_valid = int((pos_counts > 0).sum())
    if n_valid == 0:
        return z.sum() * 0.0
    return per_anchor.sum() / n_valid


def noisy_arcmix_loss(
    emb: torch.Tensor,
    y_a: torch.Tensor,
    y_b: torch.Tensor,
    lam: float,
    head: ArcFaceHead,
) -> torch.Tensor:
    """Mixup-weighted cross entropy over margin logits.

    The angular margin is applied at the original labels in both terms;
    only the cross-entropy targets switch between the original and the
    shuffled labels.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    logits = head(emb, y_a, apply_margin=True)
    return lam * F.cross_entropy(logits, y_a) + (1.0 - lam) * F.cross_entropy(logits, y_b)


def total_loss(
    z: torch.Tensor,
    emb: torch.Tensor,
    y_a: torch.Tensor,
    y_b: torch.Tensor,
    lam: float,
    head: ArcFaceHead,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> torch.Tensor:
    """Unweighted sum of the contrastive and classification losses."""
    return supcon_noise_loss(z, y_a, cfg) + noisy_arcmix_loss(emb, y_a, y_b, lam, head)
