"""Feature front ends.

Three views of a fixed-length waveform, all shaped ``bins x frames``
(128 x 313 at the default configuration):

* :func:`log_mel` -- fixed log-Mel spectrogram (STFT power through an
  HTK-style triangular mel filterbank, natural-log compressed).
* :class:`TgramNet` -- learnable 1-D conv encoder mirroring the STFT
  framing (kernel = n_fft, stride = hop).
* :class:`TFgramNet` -- learnable 1-D conv stack with max-pooling
  stages that downsample the time axis to the spectrogram's frame grid.

:func:`stack_features` concatenates the views channel-wise for the
embedding backbone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class StftConfig:
    """STFT / mel front-end settings.

    With the defaults, a 160000-sample (10 s at 16 kHz) input yields
    exactly 128 mel bins x 313 frames.  ``expected_frames`` guards that
    contract; set it to None to accept arbitrary input lengths.
    """

    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    sample_rate: int = 16000
    eps: float = 1e-8
    expected_frames: int | None = 313


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: StftConfig) -> torch.Tensor:
    """Triangular HTK-scale filterbank, shape (n_mels, n_fft//2 + 1).

    Filters span 0 Hz to Nyquist with unit peak height (no area
    normalization).
    """
    f_max = cfg.sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(f_max), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)

    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    return torch.from_numpy(fb)


def mel_center_frequencies(cfg: StftConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    f_max = cfg.sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(f_max), cfg.n_mels + 2))
    return edges[1:-1]


def log_mel(waveform, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Log-Mel spectrogram of one waveform (L,) or a batch (B, L).

    Magnitude-squared STFT with a periodic Hann window, centered frames
    with reflect padding, mel filterbank, then ``ln(power + eps)``.
    Returns (n_mels, frames) or (B, n_mels, frames).
    """
    x = torch.as_tensor(waveform)
    if not x.is_floating_point():
        x = x.to(torch.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 2:
        raise ValueError(f"waveform must be 1-D or 2-D, got shape {tuple(x.shape)}")

    n_frames = x.shape[-1] // cfg.hop + 1
    if cfg.expected_frames is not None and n_frames != cfg.expected_frames:
        raise ValueError(
            f"waveform length {x.shape[-1]} yields {n_frames} frames, "
            f"expected {cfg.expected_frames}"
        )

    window = torch.hann_window(cfg.n_fft, periodic=True, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        x,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        window=window,
        center=True,
        pad_mode="reflect",
        onesided=True,
        return_complex=True,
    )
    power = spec.real.square() + spec.imag.square()
    fb = mel_filterbank(cfg).to(dtype=x.dtype, device=x.device)
    out = torch.log(fb @ power + cfg.eps)
    return out.squeeze(0) if squeeze else out


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, T) tensors."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class TgramNet(nn.Module):
    """Waveform encoder that frames audio like the STFT.

    A strided 1-D conv (kernel = n_fft, stride = hop, padding = n_fft/2)
    followed by ``n_layers`` blocks of channel LayerNorm, leaky ReLU and
    a width-preserving conv.  Output frame count equals the centered
    STFT's for any input length.
    """

    def __init__(
        self,
        out_bins: int = 128,
        kernel: int = 1024,
        stride: int = 512,
        n_layers: int = 3,
        negative_slope: float = 0.01,
    ):
        super().__init__()
        self.out_bins = out_bins
        self.stem = nn.Conv1d(1, out_bins, kernel, stride, padding=kernel // 2, bias=False)
        self.blocks = nn.Sequential(
            *[
                nn.Sequential(
                    ChannelLayerNorm(out_bins),
                    nn.LeakyReLU(negative_slope),
                    nn.Conv1d(out_bins, out_bins, 3, 1, padding=1, bias=False),
                )
                for _ in range(n_layers)
            ]
        )

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        """(B, L) or (B, 1, L) -> (B, out_bins, frames)."""
        x = waveform if waveform.ndim == 3 else waveform.unsqueeze(1)
        return self.blocks(self.stem(x))


class ConvBlock1d(nn.Module):
    """Two conv-BN-ReLU layers; the second is dilation-2 with padding 2.

    Both convs are kernel 3, stride 1, so the time length is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_channels, out_channels, 3, 1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm1d(out_channels)
        self.conv2 = nn.Conv1d(out_channels, out_channels, 3, 1, padding=2, dilation=2, bias=False)
        self.bn2 = nn.BatchNorm1d(out_channels)
        self.act = nn.ReLU()

    def forward(self, x):
        x = self.act(self.bn1(self.conv1(x)))
        return self.act(self.bn2(self.conv2(x)))


class TFgramNet(nn.Module):
    """Learnable time-frequency encoder.

    Strided stem conv, then three conv blocks separated by a fixed max
    pool and two adaptive max pools that snap the time axis onto the
    spectrogram frame grid.  Channels of the final block play the role
    of an (unconstrained, learned) frequency axis.
    """

    def __init__(
        self,
        out_bins: int = 128,
        channels: int = 64,
        stem_kernel: int = 11,
        stem_stride: int = 5,
        stem_padding: int = 5,
        maxpool_kernel: int = 4,
        pool_sizes: tuple[int, int] = (626, 313),
    ):
        super().__init__()
        self.out_bins = out_bins
        self.stem_kernel = stem_kernel
        self.stem_stride = stem_stride
        self.stem_padding = stem_padding
        self.maxpool_kernel = maxpool_kernel
        self.pool_sizes = tuple(pool_sizes)

        self.stem = nn.Conv1d(1, channels, stem_kernel, stem_stride, stem_padding, bias=False)
        self.stem_bn = nn.BatchNorm1d(channels)
        self.stem_act = nn.ReLU()
        self.block1 = ConvBlock1d(channels, channels)
        self.maxpool = nn.MaxPool1d(maxpool_kernel)
        self.block2 = ConvBlock1d(channels, channels)
        self.pool1 = nn.AdaptiveMaxPool1d(self.pool_sizes[0])
        self.block3 = ConvBlock1d(channels, out_bins)
        self.pool2 = nn.AdaptiveMaxPool1d(self.pool_sizes[1])

    def stage_lengths(self, n_samples: int) -> dict[str, int]:
        """Time lengths after each downsampling stage for an L-sample input."""
        stem = (n_samples + 2 * self.stem_padding - self.stem_kernel) // self.stem_stride + 1
        pooled = (stem - self.maxpool_kernel) // self.maxpool_kernel + 1
        return {
            "stem": stem,
            "maxpool": pooled,
            "pool1": self.pool_sizes[0],
            "pool2": self.pool_sizes[1],
        }

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        """(B, L) or (B, 1, L) -> (B, out_bins, pool_sizes[-1])."""
        x = waveform if waveform.ndim == 3 else waveform.unsqueeze(1)
        lengths = self.stage_lengths(x.shape[-1])
        if lengths["maxpool"] < self.pool_sizes[0]:
            raise ValueError(
                f"input of {x.shape[-1]} samples is too short for the pooling "
                f"chain: {lengths['maxpool']} frames after max pooling, "
                f"need >= {self.pool_sizes[0]}"
            )
        x = self.stem_act(self.stem_bn(self.stem(x)))
        x = self.maxpool(self.block1(x))
        x = self.pool1(self.block2(x))
        return self.pool2(self.block3(x))


CHANNEL_ROLES_TFST = ("logmel", "tgram", "tfgram")


@dataclass
class FeatureStack:
    """Channel-stacked feature views: (C, M, N) or (B, C, M, N)."""

    data: torch.Tensor
    channel_roles: tuple[str, ...]

    def __post_init__(self):
        if self.data.shape[-3] != len(self.channel_roles):
            raise ValueError(
                f"{self.data.shape[-3]} channels but {len(self.channel_roles)} roles"
            )

    @property
    def num_channels(self) -> int:
        return len(self.channel_roles)


def stack_features(x_mel, x_t=None, x_tf=None, mode: str = "tfst") -> FeatureStack:
    """Stack feature views channel-wise.

    ``tfst`` mode stacks [logmel, tgram, tfgram]; ``logmel`` mode keeps
    only the spectrogram as a single channel.  Inputs may be (M, N) or
    batched (B, M, N) and must agree in shape.
    """
    if mode == "logmel":
        return FeatureStack(torch.as_tensor(x_mel).unsqueeze(-3), ("logmel",))
    if mode != "tfst":
        raise ValueError(f"unknown feature mode {mode!r}")
    if x_t is None or x_tf is None:
        raise ValueError("tfst mode needs all three feature views")
    views = [torch.as_tensor(v) for v in (x_mel, x_t, x_tf)]
    shapes = {tuple(v.shape) for v in views}
    if len(shapes) != 1:
        raise ValueError(f"feature views disagree in shape: {sorted(shapes)}")
    return FeatureStack(torch.stack(views, dim=-3), CHANNEL_ROLES_TFST)


_DUMP_MAGIC = b"OFST"
_DUMP_VERSION = 1


def save_feature_stack(path, stack: FeatureStack) -> None:
    """Write a stack as float32 row-major binary plus a JSON sidecar.

    Header: magic 'OFST', u32 version, u32 ndim, u32 dims.  The sidecar
    (same path + '.json') names the channel roles.
    """
    path = Path(path)
    data = stack.data.detach().cpu().to(torch.float32).contiguous().numpy()
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<II", _DUMP_VERSION, data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes(order="C"))
    sidecar = {"channel_roles": list(stack.channel_roles), "dims": list(data.shape)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_feature_stack(path) -> FeatureStack:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != _DUMP_MAGIC:
            raise ValueError(f"{path} is not a feature dump")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != _DUMP_VERSION:
            raise ValueError(f"unsupported feature dump version {version}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(dims)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    return FeatureStack(torch.from_numpy(data.copy()), tuple(sidecar["channel_roles"]))
