"""Embedding backbones, the feature perturbation head, and the
angular-margin classification head, plus the trainable model container
and its checkpoint format.

The default backbone is a MobileFaceNet-style stack of depthwise
separable bottlenecks ending in a global depthwise conv and a linear
128-d output.  A small ``toy`` backbone with the same I/O contract is
provided for fast tests and desk-scale experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .features import (
    CHANNEL_ROLES_TFST,
    FeatureStack,
    StftConfig,
    TFgramNet,
    TgramNet,
    stack_features,
)


class DegenerateEmbeddingError(RuntimeError):
    """A decoded embedding row collapsed to (near) zero norm."""


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1  # 1 for logmel input, 3 for the stacked views
    embedding_dim: int = 128
    variant: str = "mobilefacenet"  # or "toy"


def _conv_out(size: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class _ConvBN(nn.Module):
    def __init__(self, cin, cout, kernel, stride, padding, groups=1, linear=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, padding, groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = None if linear else nn.PReLU(cout)

    def forward(self, x):
        x = self.bn(self.conv(x))
        return x if self.act is None else self.act(x)


class _Bottleneck(nn.Module):
    """Inverted residual: expand 1x1, depthwise 3x3, project 1x1."""

    def __init__(self, cin, cout, stride, expansion):
        super().__init__()
        hidden = cin * expansion
        self.use_residual = stride == 1 and cin == cout
        self.expand = _ConvBN(cin, hidden, 1, 1, 0)
        self.depthwise = _ConvBN(hidden, hidden, 3, stride, 1, groups=hidden)
        self.project = _ConvBN(hidden, cout, 1, 1, 0, linear=True)

    def forward(self, x):
        out = self.project(self.depthwise(self.expand(x)))
        return x + out if self.use_residual else out


# (expansion, channels, repeats, first stride); middle stage kept at 4
# repeats so the full model lands on the published parameter budget.
MFN_BOTTLENECK_SETTING = (
    (2, 64, 5, 2),
    (4, 128, 1, 2),
    (2, 128, 4, 1),
    (4, 128, 1, 2),
    (2, 128, 2, 1),
)


class MobileFaceNet(nn.Module):
    """Lightweight embedding backbone for (B, C, M, N) feature stacks."""

    def __init__(
        self,
        in_channels: int = 1,
        embedding_dim: int = 128,
        input_shape: tuple[int, int] = (128, 313),
        setting=MFN_BOTTLENECK_SETTING,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.embedding_dim = embedding_dim
        self.input_shape = tuple(input_shape)

        self.conv1 = _ConvBN(in_channels, 64, 3, 2, 1)
        self.dw_conv1 = _ConvBN(64, 64, 3, 1, 1, groups=64)
        blocks = []
        cin = 64
        n_stride2 = 1  # conv1
        for expansion, cout, repeats, stride in setting:
            for i in range(repeats):
                s = stride if i == 0 else 1
                blocks.append(_Bottleneck(cin, cout, s, expansion))
                cin = cout
                if s == 2:
                    n_stride2 += 1
        self.blocks = nn.Sequential(*blocks)
        self.conv2 = _ConvBN(cin, 512, 1, 1, 0)

        h, w = self.input_shape
        for _ in range(n_stride2):
            h, w = _conv_out(h), _conv_out(w)
        # global depthwise conv over the final (h, w) map
        self.gdc = _ConvBN(512, 512, (h, w), 1, 0, groups=512, linear=True)
        self.linear = _ConvBN(512, embedding_dim, 1, 1, 0, linear=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.dw_conv1(self.conv1(x))
        x = self.conv2(self.blocks(x))
        x = self.linear(self.gdc(x))
        return x.flatten(1)


class ToyBackbone(nn.Module):
    """Three plain convs plus a pooled linear head; same I/O contract.

    No normalization layers, so it is a pure function of its input in
    both train and eval mode (convenient for finite-difference checks).
    """

    def __init__(self, in_channels: int = 1, embedding_dim: int = 128, width: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.embedding_dim = embedding_dim
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, 2, 1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(4 * width, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.net(x).flatten(1))


def build_backbone(cfg: BackboneConfig, input_shape: tuple[int, int] = (128, 313)) -> nn.Module:
    if cfg.variant == "mobilefacenet":
        return MobileFaceNet(cfg.in_channels, cfg.embedding_dim, input_shape)
    if cfg.variant == "toy":
        return ToyBackbone(cfg.in_channels, cfg.embedding_dim)
    raise ValueError(f"unknown backbone variant {cfg.variant!r}")


def embed(backbone: nn.Module, stack: FeatureStack) -> torch.Tensor:
    """Run a feature stack through a backbone, checking the channel count."""
    expected = getattr(backbone, "in_channels", stack.num_channels)
    if stack.num_channels != expected:
        raise ValueError(
            f"feature stack has {stack.num_channels} channels, backbone expects {expected}"
        )
    data = stack.data
    if data.ndim == 3:
        data = data.unsqueeze(0)
    return backbone(data)


class FeaturePerturbationHead(nn.Module):
    """Bottleneck affine pair (E -> R -> E) followed by L2 normalization.

    Compressing to R and re-expanding perturbs the embedding; there is no
    reconstruction objective.  Output rows lie on the unit sphere.
    """

    def __init__(self, embedding_dim: int, reduction: int = 64, activation: str = "leaky_relu"):
        super().__init__()
        if not 1 <= reduction <= embedding_dim:
            raise ValueError(
                f"reduction must be in [1, {embedding_dim}], got {reduction}"
            )
        if activation not in ("leaky_relu", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.reduction = reduction
        self.activation = activation
        # default uniform fan-in init for both affine maps
        self.encoder = nn.Linear(embedding_dim, reduction)
        self.decoder = nn.Linear(reduction, embedding_dim)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        h = self.encoder(emb)
        h = F.leaky_relu(h, 0.01) if self.activation == "leaky_relu" else F.relu(h)
        decoded = self.decoder(h)
        norms = decoded.norm(dim=-1, keepdim=True)
        if bool((norms <= 1e-12).any()):
            raise DegenerateEmbeddingError(
                "a decoded embedding row has near-zero norm; cannot project to the unit sphere"
            )
        return decoded / norms


def fph_forward(emb: torch.Tensor, head: FeaturePerturbationHead) -> torch.Tensor:
    return head(emb)


class ArcFaceHead(nn.Module):
    """Cosine classifier with an optional additive angular margin.

    Margin-free logits are s * cos(theta).  With the margin, the target
    class logit becomes s * cos(theta + m) while cos(theta) > cos(pi - m),
    and the stabilized s * (cos(theta) - m * sin(m)) beyond that point.
    """

    def __init__(self, num_classes: int, embedding_dim: int, scale: float = 30.0, margin: float = 0.7):
        super().__init__()
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.scale = float(scale)
        self.margin = float(margin)
        self.weight = nn.Parameter(torch.empty(num_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(
        self,
        emb: torch.Tensor,
        labels: torch.Tensor | None = None,
        apply_margin: bool = False,
    ) -> torch.Tensor:
        norms = emb.norm(dim=-1)
        if bool((norms <= 0).any()):
            raise ValueError("embedding rows must be non-zero")
        cosine = F.linear(F.normalize(emb, dim=-1), F.normalize(self.weight, dim=-1))
        cosine = cosine.clamp(-1.0, 1.0)
        if not apply_margin:
            return self.scale * cosine

        if labels is None:
            raise ValueError("labels are required when applying the margin")
        if bool((labels < 0).any()) or bool((labels >= self.num_classes).any()):
            raise ValueError("label out of range")
        m = self.margin
        sine = torch.sqrt((1.0 - cosine.square()).clamp_min(0.0))
        phi = cosine * math.cos(m) - sine * math.sin(m)
        phi = torch.where(cosine > math.cos(math.pi - m), phi, cosine - m * math.sin(m))
        one_hot = F.one_hot(labels, self.num_classes).to(dtype=cosine.dtype)
        return self.scale * (one_hot * phi + (1.0 - one_hot) * cosine)


def arcface_logits(
    emb: torch.Tensor,
    labels: torch.Tensor | None,
    head: ArcFaceHead,
    apply_margin: bool,
) -> torch.Tensor:
    return head(emb, labels, apply_margin=apply_margin)


def count_params(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


class OSSCLModel(nn.Module):
    """Full trainable model: feature extractors, backbone, and heads.

    ``feature_mode`` "logmel" feeds the spectrogram alone to the
    backbone; "tfst" stacks it with the two learnable waveform views.
    The perturbation head only participates in training; scoring uses
    the margin-free classifier on the raw embedding.
    """

    def __init__(
        self,
        num_classes: int,
        stft: StftConfig | None = None,
        feature_mode: str = "logmel",
        variant: str = "mobilefacenet",
        embedding_dim: int = 128,
        fph_reduction: int | None = 64,
        fph_activation: str | None = None,
        arc_scale: float = 30.0,
        arc_margin: float | None = None,
    ):
        super().__init__()
        if feature_mode not in ("logmel", "tfst"):
            raise ValueError(f"unknown feature mode {feature_mode!r}")
        self.stft = stft if stft is not None else StftConfig()
        self.feature_mode = feature_mode
        # per-mode defaults: wider margin and leaky FPH for the single-channel setup
        if arc_margin is None:
            arc_margin = 0.7 if feature_mode == "logmel" else 0.4
        if fph_activation is None:
            fph_activation = "leaky_relu" if feature_mode == "logmel" else "relu"

        in_channels = 1 if feature_mode == "logmel" else 3
        frames = self.stft.expected_frames or 313
        self.backbone = build_backbone(
            BackboneConfig(in_channels, embedding_dim, variant),
            input_shape=(self.stft.n_mels, frames),
        )
        if feature_mode == "tfst":
            self.tgram = TgramNet(out_bins=self.stft.n_mels, kernel=self.stft.n_fft, stride=self.stft.hop)
            self.tfgram = TFgramNet(out_bins=self.stft.n_mels)
        else:
            self.tgram = None
            self.tfgram = None
        self.fph = (
            FeaturePerturbationHead(embedding_dim, fph_reduction, fph_activation)
            if fph_reduction is not None
            else None
        )
        self.head = ArcFaceHead(num_classes, embedding_dim, arc_scale, arc_margin)

    def feature_stack(self, waveforms: torch.Tensor, logmels: torch.Tensor) -> FeatureStack:
        """Assemble the backbone input from (mixed) waveforms and spectrograms."""
        if self.feature_mode == "logmel":
            return stack_features(logmels, mode="logmel")
        return stack_features(logmels, self.tgram(waveforms), self.tfgram(waveforms), mode="tfst")

    def embed(self, stack: FeatureStack) -> torch.Tensor:
        return embed(self.backbone, stack)

    def perturbed(self, emb: torch.Tensor) -> torch.Tensor:
        """Contrastive-branch embedding: FPH output, or plain L2
        normalization when the head is disabled."""
        if self.fph is None:
            return F.normalize(emb, dim=-1)
        return self.fph(emb)

    def logits(
        self,
        emb: torch.Tensor,
        labels: torch.Tensor | None = None,
        apply_margin: bool = False,
    ) -> torch.Tensor:
        return self.head(emb, labels, apply_margin=apply_margin)

    def forward(self, waveforms: torch.Tensor, logmels: torch.Tensor) -> torch.Tensor:
        return self.embed(self.feature_stack(waveforms, logmels))


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: OSSCLModel,
    class_map: dict[tuple[str, int], int],
    extra: dict | None = None,
    ema_shadow: dict[str, torch.Tensor] | None = None,
) -> Path:
    """Serialize model weights, EMA shadow weights, and rebuild metadata."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "num_classes": model.head.num_classes,
        "feature_mode": model.feature_mode,
        "class_map": [[t, i, idx] for (t, i), idx in sorted(class_map.items(), key=lambda kv: kv[1])],
        "stft": {
            "n_fft": model.stft.n_fft,
            "hop": model.stft.hop,
            "n_mels": model.stft.n_mels,
            "sample_rate": model.stft.sample_rate,
            "eps": model.stft.eps,
            "expected_frames": model.stft.expected_frames,
        },
        "model": {
            "variant": "toy" if isinstance(model.backbone, ToyBackbone) else "mobilefacenet",
            "embedding_dim": model.backbone.embedding_dim,
        },
        "arcface": {"scale": model.head.scale, "margin": model.head.margin},
        "fph": {
            "reduction": None if model.fph is None else model.fph.reduction,
            "activation": None if model.fph is None else model.fph.activation,
        },
    }
    if extra:
        meta.update(extra)
    payload = {
        "meta": meta,
        "state_dict": model.state_dict(),
        "ema_state_dict": ema_shadow if ema_shadow is not None else {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path, weights: str = "ema") -> tuple[OSSCLModel, dict]:
    """Rebuild the model from a checkpoint.

    ``weights`` selects "ema" (smoothed parameters, falling back to raw
    if the shadow set is empty) or "raw".  Returns the model in eval
    mode plus the metadata dict; ``meta["class_map"]`` is restored to a
    {(machine_type, machine_id): index} dict.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if weights not in ("ema", "raw"):
        raise ValueError(f"weights must be 'ema' or 'raw', got {weights!r}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = payload["meta"]
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")

    stft = StftConfig(**meta["stft"])
    model = OSSCLModel(
        num_classes=meta["num_classes"],
        stft=stft,
        feature_mode=meta["feature_mode"],
        variant=meta["model"]["variant"],
        embedding_dim=meta["model"]["embedding_dim"],
        fph_reduction=meta["fph"]["reduction"],
        fph_activation=meta["fph"]["activation"],
        arc_scale=meta["arcface"]["scale"],
        arc_margin=meta["arcface"]["margin"],
    )
    state = dict(payload["state_dict"])
    if weights == "ema" and payload["ema_state_dict"]:
        state.update(payload["ema_state_dict"])
    model.load_state_dict(state)
    model.eval()
    meta = dict(meta)
    meta["class_map"] = {(t, int(i)): int(idx) for t, i, idx in meta["class_map"]}
    return model, meta
