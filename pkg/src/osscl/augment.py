"""Mixup over a batch's waveforms and spectrograms.

A single coefficient and a single permutation are drawn per batch and
applied to both tensors, so the waveform branch and the spectrogram
branch of the model see consistently mixed inputs.  The shuffled label
vector is kept alongside the original one for the loss terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import Batch


@dataclass
class MixedBatch:
    waveforms: torch.Tensor  # (B, L), mixed
    logmels: torch.Tensor  # (B, M, N), mixed
    y_a: torch.Tensor  # (B,) original labels
    y_b: torch.Tensor  # (B,) permuted labels
    lam: float
    perm: np.ndarray

    @property
    def size(self) -> int:
        return self.waveforms.shape[0]


def sample_lambda(rng: np.random.Generator) -> float:
    """One mixing coefficient per batch, Beta(0.5, 0.5). Not symmetrized."""
    return float(rng.beta(0.5, 0.5))


def sample_perm(rng: np.random.Generator, batch_size: int) -> np.ndarray:
    return rng.permutation(batch_size)


def mixup_batch(batch: Batch, lam: float, perm: np.ndarray) -> MixedBatch:
    """Mix a batch with coefficient ``lam`` and pairing ``perm``.

    mixed[i] = lam * orig[i] + (1 - lam) * orig[perm[i]] for both the
    waveform and spectrogram tensors; the input batch is not modified.
    """
    b = batch.size
    if b < 2:
        raise ValueError("mixup needs a batch of at least 2 clips")
    perm = np.asarray(perm)
    if perm.shape != (b,) or not np.array_equal(np.sort(perm), np.arange(b)):
        raise ValueError(f"perm is not a permutation of range({b})")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")

    idx = torch.from_numpy(perm).long()
    waveforms = lam * batch.waveforms + (1.0 - lam) * batch.waveforms[idx]
    logmels = lam * batch.logmels + (1.0 - lam) * batch.logmels[idx]
    return MixedBatch(
        waveforms=waveforms,
        logmels=logmels,
        y_a=batch.labels.clone(),
        y_b=batch.labels[idx],
        lam=lam,
        perm=perm,
    )


def mixup(batch: Batch, rng: np.random.Generator) -> MixedBatch:
    """Draw (lam, perm) from ``rng`` and mix. Applied to every training batch."""
    return mixup_batch(batch, sample_lambda(rng), sample_perm(rng, batch.size))
