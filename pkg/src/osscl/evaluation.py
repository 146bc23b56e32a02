"""Anomaly scoring and ROC metrics.

A clip's anomaly score is the negative log softmax probability that the
margin-free classifier assigns to the clip's own claimed machine ID, so
confident recognition of the ID means a low score.  Metrics are the
pairwise-rank AUC, the standardized partial AUC over the low false
positive range, and the per-type minimum AUC.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .corpus import AudioClip, ClipMetadata, DatasetManifest, load_clip
from .features import log_mel
from .model import OSSCLModel

ANOMALY = "anomaly"
NORMAL = "normal"


@dataclass
class ScoredClip:
    meta: ClipMetadata
    score: float


def _labels_to_binary(labels: Sequence) -> np.ndarray:
    out = np.empty(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        if lab in (ANOMALY, 1, True):
            out[i] = True
        elif lab in (NORMAL, 0, False):
            out[i] = False
        else:
            raise ValueError(f"label must be normal/anomaly, got {lab!r}")
    return out


def auc(scores: Sequence[float], labels: Sequence) -> float:
    """Pairwise-rank AUC: fraction of (anomaly, normal) pairs where the
    anomaly scores higher, counting ties as half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels_to_binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one normal and one anomaly")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _roc_points(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ROC with tied scores grouped into single steps.

    Returns (fpr, tpr) starting at (0, 0), thresholds descending.
    """
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each tied group
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    idx = np.r_[boundaries, len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[idx]
    fp = np.cumsum(~y_sorted)[idx]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr


def pauc(
    scores: Sequence[float],
    labels: Sequence,
    p: float = 0.1,
    standardize: bool = True,
) -> float:
    """Partial AUC over false positive rates [0, p].

    Trapezoidal area on the empirical ROC, linearly interpolated at
    FPR = p.  By default the McClish-standardized value
    0.5 * (1 + (area - p^2/2) / (p - p^2/2)) is returned, which is 0.5
    for a chance classifier and 1 for a perfect one; with
    ``standardize=False`` the raw area divided by p is returned.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    s = np.asarray(scores, dtype=np.float64)
    y = _labels_to_binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("pAUC needs at least one normal and one anomaly")
    if int(p * n_neg) < 1:
        raise ValueError(f"too few normals: floor(p * {n_neg}) < 1")

    fpr, tpr = _roc_points(s, y)
    if p < 1.0:
        cut = np.searchsorted(fpr, p, side="right")
        tpr_at_p = np.interp(p, fpr, tpr)
        fpr = np.r_[fpr[:cut], p]
        tpr = np.r_[tpr[:cut], tpr_at_p]
    area = float(np.trapezoid(tpr, fpr))
    if not standardize:
        return area / p
    min_area = 0.5 * p * p
    max_area = p
    return 0.5 * (1.0 + (area - min_area) / (max_area - min_area))


def mauc(per_id_aucs: Mapping) -> float:
    """Worst per-ID AUC."""
    if not per_id_aucs:
        raise ValueError("empty AUC map")
    return float(min(per_id_aucs.values()))


def _score_batch(model: OSSCLModel, clips: list[AudioClip], class_map) -> list[float]:
    waveforms = torch.stack([torch.from_numpy(c.samples) for c in clips])
    logmels = log_mel(waveforms, model.stft)
    indices = []
    for c in clips:
        if c.meta.type_id not in class_map:
            raise ValueError(f"unknown machine id {c.meta.type_id} for {c.meta.path}")
        indices.append(class_map[c.meta.type_id])
    with torch.no_grad():
        emb = model(waveforms, logmels)
        logits = model.logits(emb, apply_margin=False)
        logp = torch.log_softmax(logits, dim=1)
    return [-float(logp[row, idx]) for row, idx in enumerate(indices)]


def anomaly_score(model: OSSCLModel, class_map: Mapping, clip: AudioClip) -> float:
    """Score one clip against its claimed machine ID (higher = more anomalous)."""
    model.eval()
    return _score_batch(model, [clip], class_map)[0]


def score_clips(
    model: OSSCLModel,
    class_map: Mapping,
    clips: Iterable[ClipMetadata],
    batch_size: int = 32,
) -> list[ScoredClip]:
    model.eval()
    metas = list(clips)
    scored: list[ScoredClip] = []
    for start in range(0, len(metas), batch_size):
        chunk = [load_clip(m) for m in metas[start : start + batch_size]]
        for meta, s in zip(metas[start : start + batch_size], _score_batch(model, chunk, class_map)):
            scored.append(ScoredClip(meta=meta, score=s))
    return scored


@dataclass
class IdMetrics:
    machine_type: str
    machine_id: int
    auc: float
    pauc: float
    n_normal: int
    n_anomaly: int


@dataclass
class TypeMetrics:
    machine_type: str
    auc: float  # mean over this type's IDs
    pauc: float
    mauc: float  # min over this type's IDs


@dataclass
class EvalReport:
    """Per-ID, per-type, and averaged detection metrics, all in [0, 1]."""

    ids: list[IdMetrics]
    types: list[TypeMetrics]
    auc: float  # arithmetic mean over machine types
    pauc: float
    mauc: float
    auc_all_ids: float  # alternative averaging, over every (type, id)
    pauc_all_ids: float
    pauc_p: float = 0.1

    def to_dict(self) -> dict:
        return {
            "ids": [vars(m).copy() for m in self.ids],
            "types": [vars(m).copy() for m in self.types],
            "average": {"auc": self.auc, "pauc": self.pauc, "mauc": self.mauc},
            "average_all_ids": {"auc": self.auc_all_ids, "pauc": self.pauc_all_ids},
            "pauc_p": self.pauc_p,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["machine_type", "machine_id", "auc", "pauc", "mauc"])
            for m in self.ids:
                writer.writerow([m.machine_type, m.machine_id, f"{m.auc:.6f}", f"{m.pauc:.6f}", ""])
            for t in self.types:
                writer.writerow([t.machine_type, "all", f"{t.auc:.6f}", f"{t.pauc:.6f}", f"{t.mauc:.6f}"])
            writer.writerow(["average", "", f"{self.auc:.6f}", f"{self.pauc:.6f}", f"{self.mauc:.6f}"])

    def format_table(self) -> str:
        """Human-readable per-type summary with percent metrics."""
        lines = [f"{'machine type':<16}{'AUC(%)':>10}{'pAUC(%)':>10}{'mAUC(%)':>10}"]
        for t in self.types:
            lines.append(
                f"{t.machine_type:<16}{100 * t.auc:>10.2f}{100 * t.pauc:>10.2f}{100 * t.mauc:>10.2f}"
            )
        lines.append(
            f"{'average':<16}{100 * self.auc:>10.2f}{100 * self.pauc:>10.2f}{100 * self.mauc:>10.2f}"
        )
        return "\n".join(lines)


def write_scores_csv(path, scored: Sequence[ScoredClip]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["machine_type", "machine_id", "label", "score", "path"])
        for sc in scored:
            writer.writerow(
                [sc.meta.machine_type, sc.meta.machine_id, sc.meta.label, f"{sc.score:.9g}", sc.meta.path]
            )


def report_from_scores(scored: Sequence[ScoredClip], pauc_p: float = 0.1) -> EvalReport:
    """Aggregate per-clip scores into per-ID / per-type / average metrics."""
    groups: dict[tuple[str, int], list[ScoredClip]] = {}
    for sc in scored:
        groups.setdefault(sc.meta.type_id, []).append(sc)

    id_rows = []
    for (mtype, mid) in sorted(groups):
        members = groups[(mtype, mid)]
        scores = [m.score for m in members]
        labels = [m.meta.label for m in members]
        id_rows.append(
            IdMetrics(
                machine_type=mtype,
                machine_id=mid,
                auc=auc(scores, labels),
                pauc=pauc(scores, labels, p=pauc_p),
                n_normal=sum(1 for m in members if m.meta.label == NORMAL),
                n_anomaly=sum(1 for m in members if m.meta.label == ANOMALY),
            )
        )

    type_rows = []
    for mtype in sorted({r.machine_type for r in id_rows}):
        rows = [r for r in id_rows if r.machine_type == mtype]
        type_rows.append(
            TypeMetrics(
                machine_type=mtype,
                auc=float(np.mean([r.auc for r in rows])),
                pauc=float(np.mean([r.pauc for r in rows])),
                mauc=mauc({r.machine_id: r.auc for r in rows}),
            )
        )

    return EvalReport(
        ids=id_rows,
        types=type_rows,
        auc=float(np.mean([t.auc for t in type_rows])),
        pauc=float(np.mean([t.pauc for t in type_rows])),
        mauc=float(np.mean([t.mauc for t in type_rows])),
        auc_all_ids=float(np.mean([r.auc for r in id_rows])),
        pauc_all_ids=float(np.mean([r.pauc for r in id_rows])),
        pauc_p=pauc_p,
    )


def evaluate(
    model: OSSCLModel,
    class_map: Mapping,
    manifest: DatasetManifest,
    batch_size: int = 32,
    pauc_p: float = 0.1,
) -> tuple[EvalReport, list[ScoredClip]]:
    """Score the manifest's test split and aggregate the metrics."""
    test = manifest.test_clips()
    if not test:
        raise ValueError("manifest has no test clips")
    scored = score_clips(model, class_map, test, batch_size=batch_size)
    return report_from_scores(scored, pauc_p=pauc_p), scored
