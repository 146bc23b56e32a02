"""One-stage training loop.

Each batch is mixed, turned into a feature stack, embedded, perturbed,
and scored by both objectives; a single AdamW optimizer updates every
trainable parameter (feature extractors included) under a per-epoch
cosine-annealed learning rate, with an EMA shadow copy of the weights
maintained after every step.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import mixup
from .corpus import DatasetManifest, make_batches
from .losses import ContrastiveConfig, noisy_arcmix_loss, supcon_noise_loss
from .model import OSSCLModel, save_checkpoint

ADAMW_BETAS = (0.9, 0.999)
# rng streams derived from the run seed: 0 -> batch order, 1 -> mixup
_MIXUP_STREAM = 1


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite."""


@dataclass
class TrainConfig:
    """Loop hyperparameters; the defaults are the full-scale settings."""

    epochs: int = 300
    batch_size: int = 64
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    eta_min: float = 0.0
    seed: int = 0
    feature_mode: str = "logmel"  # or "tfst"
    device: str = "cpu"


def cosine_lr(step: int, total_steps: int, lr0: float, eta_min: float = 0.0) -> float:
    """Cosine annealing from lr0 (step 0) to eta_min (step = total_steps)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EmaState:
    """Exponential moving average of every trainable parameter."""

    shadow: dict[str, torch.Tensor]
    decay: float
    num_updates: int = 0


def ema_init(model: torch.nn.Module, decay: float) -> EmaState:
    if not 0.0 <= decay <= 1.0:
        raise ValueError("ema decay must be in [0, 1]")
    shadow = {
        name: p.detach().clone()
        for name, p in model.named_parameters()
        if p.requires_grad
    }
    return EmaState(shadow=shadow, decay=decay)


def ema_update(ema: EmaState, model: torch.nn.Module) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * param, in place."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            if name not in ema.shadow or ema.shadow[name].shape != p.shape:
                raise ValueError(f"EMA shadow does not match parameter {name}")
            ema.shadow[name].mul_(ema.decay).add_(p.detach(), alpha=1.0 - ema.decay)
    ema.num_updates += 1
    return ema


def train(
    manifest: DatasetManifest,
    run,
    out_dir,
) -> Path:
    """Train on the manifest's train split; returns the checkpoint path.

    ``run`` is a resolved :class:`osscl.config.RunConfig`.  Writes
    ``checkpoint.bin`` (raw + EMA weights and all rebuild metadata) and
    ``train_log.jsonl`` (one record per epoch) under ``out_dir``.
    """
    run = run.resolved()
    cfg: TrainConfig = run.train
    if manifest.num_classes < 2:
        raise ValueError("training needs at least 2 machine-ID classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    device = torch.device(cfg.device)
    torch.manual_seed(cfg.seed)
    model = OSSCLModel(
        num_classes=manifest.num_classes,
        stft=run.stft,
        feature_mode=cfg.feature_mode,
        variant=run.model.variant,
        embedding_dim=run.model.embedding_dim,
        fph_reduction=run.fph.reduction,
        fph_activation=run.fph.activation,
        arc_scale=run.arcface.scale,
        arc_margin=run.arcface.margin,
    ).to(device)
    model.train()

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr0, betas=ADAMW_BETAS, weight_decay=cfg.weight_decay
    )
    ema = ema_init(model, cfg.ema_decay)
    stream = make_batches(manifest, cfg.batch_size, cfg.seed, stft=run.stft)
    rng_mix = np.random.default_rng([cfg.seed, _MIXUP_STREAM])

    log_path = out_dir / "train_log.jsonl"
    steps = 0
    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.eta_min)
            for group in optimizer.param_groups:
                group["lr"] = lr
            t0 = time.monotonic()
            sup_sum = mix_sum = 0.0
            n_batches = 0
            for batch in stream.epoch(epoch):
                if batch.size < 2:
                    continue  # a lone trailing clip cannot be mixed or contrasted
                mixed = mixup(batch, rng_mix)
                waveforms = mixed.waveforms.to(device)
                logmels = mixed.logmels.to(device)
                y_a = mixed.y_a.to(device)
                y_b = mixed.y_b.to(device)

                stack = model.feature_stack(waveforms, logmels)
                emb = model.embed(stack)
                z = model.perturbed(emb)
                loss_sup = supcon_noise_loss(z, y_a, run.contrastive)
                loss_mix = noisy_arcmix_loss(emb, y_a, y_b, mixed.lam, model.head)
                loss = loss_sup + loss_mix
                if not bool(torch.isfinite(loss)):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {steps}: "
                        f"supcon={float(loss_sup)}, arcmix={float(loss_mix)}, lam={mixed.lam}"
                    )

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                ema_update(ema, model)
                steps += 1
                n_batches += 1
                sup_sum += float(loss_sup)
                mix_sum += float(loss_mix)

            record = {
                "epoch": epoch,
                "lr": lr,
                "loss_total": (sup_sum + mix_sum) / max(n_batches, 1),
                "loss_supcon": sup_sum / max(n_batches, 1),
                "loss_namix": mix_sum / max(n_batches, 1),
                "wall_time": time.monotonic() - t0,
            }
            log.write(json.dumps(record) + "\n")
            log.flush()

    extra = {
        "train": asdict(cfg),
        "adamw_betas": list(ADAMW_BETAS),
        "contrastive": {
            "temperature": run.contrastive.temperature,
            "reduction": run.contrastive.reduction,
        },
        "steps": steps,
        "ema_updates": ema.num_updates,
        "ema_decay": ema.decay,
    }
    return save_checkpoint(
        out_dir / "checkpoint.bin",
        model,
        manifest.class_map,
        extra=extra,
        ema_shadow=ema.shadow,
    )
