"""Corpus handling.

Scans machine-condition audio corpora laid out as
``<root>/<machine_type>/{train,test}/<label>_id_<NN>_<seq>.wav``, loads
16 kHz mono PCM clips normalized to a fixed 10 s length, generates
deterministic synthetic corpora in the same layout for desk-scale runs,
and produces reproducible shuffled training batches.

Manifests and clip metadata are immutable after construction and safe
to share across threads; batch order is always the single-worker order.
"""

from __future__ import annotations

import json
import re
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .features import StftConfig, log_mel

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
CLIP_SAMPLES = 160000
_INT16_SCALE = 32768.0

_WAV_NAME = re.compile(r"^(normal|anomaly)_id_(\d+)_(\d+)\.wav$")


class CorpusError(Exception):
    """Bad corpus layout, file name, or WAV contents."""


@dataclass(frozen=True)
class ClipMetadata:
    machine_type: str
    machine_id: int
    label: str  # "normal" | "anomaly"
    split: str  # "train" | "test"
    path: Path

    @property
    def type_id(self) -> tuple[str, int]:
        return (self.machine_type, self.machine_id)


@dataclass
class AudioClip:
    samples: np.ndarray  # float32 in [-1, 1], exactly CLIP_SAMPLES long
    sample_rate: int
    meta: ClipMetadata


@dataclass
class DatasetManifest:
    """All clips of a corpus plus the dense (type, id) -> class index map."""

    clips: list[ClipMetadata]
    class_map: dict[tuple[str, int], int]

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    def train_clips(self) -> list[ClipMetadata]:
        return [c for c in self.clips if c.split == "train"]

    def test_clips(self) -> list[ClipMetadata]:
        return [c for c in self.clips if c.split == "test"]

    def class_index(self, meta: ClipMetadata) -> int:
        return self.class_map[meta.type_id]

    def save(self, path) -> None:
        doc = {
            "clips": [
                {
                    "machine_type": c.machine_type,
                    "machine_id": c.machine_id,
                    "label": c.label,
                    "split": c.split,
                    "path": str(c.path),
                }
                for c in self.clips
            ],
            "class_map": [
                {"machine_type": t, "machine_id": i, "index": idx}
                for (t, i), idx in sorted(self.class_map.items(), key=lambda kv: kv[1])
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        clips = [
            ClipMetadata(
                machine_type=c["machine_type"],
                machine_id=int(c["machine_id"]),
                label=c["label"],
                split=c["split"],
                path=Path(c["path"]),
            )
            for c in doc["clips"]
        ]
        class_map = {
            (e["machine_type"], int(e["machine_id"])): int(e["index"])
            for e in doc["class_map"]
        }
        return cls(clips=clips, class_map=class_map)


def _parse_wav_name(path: Path, machine_type: str, split: str) -> ClipMetadata:
    m = _WAV_NAME.match(path.name)
    if m is None:
        raise CorpusError(f"unparsable file name: {path}")
    label, machine_id = m.group(1), int(m.group(2))
    if split == "train" and label == "anomaly":
        raise CorpusError(f"anomaly clip in train split: {path}")
    return ClipMetadata(machine_type, machine_id, label, split, path)


def scan_dataset(root) -> DatasetManifest:
    """Build a manifest from a corpus directory.

    Class indices are assigned lexicographically over the (machine_type,
    machine_id) pairs seen in the train split.  Test clips whose pair
    never appears in training are rejected.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root does not exist: {root}")

    clips: list[ClipMetadata] = []
    type_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not type_dirs:
        raise CorpusError(f"no machine-type directories under {root}")
    for type_dir in type_dirs:
        split_dirs = [s for s in ("train", "test") if (type_dir / s).is_dir()]
        if not split_dirs:
            raise CorpusError(f"{type_dir} has neither train/ nor test/")
        for split in split_dirs:
            for path in sorted((type_dir / split).iterdir()):
                if path.is_dir() or path.suffix.lower() != ".wav":
                    continue
                clips.append(_parse_wav_name(path, type_dir.name, split))

    train_pairs = sorted({c.type_id for c in clips if c.split == "train"})
    class_map = {pair: idx for idx, pair in enumerate(train_pairs)}
    for c in clips:
        if c.split == "test" and c.type_id not in class_map:
            raise CorpusError(
                f"test clip {c.path} has machine id {c.type_id} absent from training"
            )
    return DatasetManifest(clips=clips, class_map=class_map)


def load_clip(meta: ClipMetadata, target_samples: int = CLIP_SAMPLES) -> AudioClip:
    """Decode a mono 16-bit 16 kHz WAV, zero-padded/truncated to target length."""
    try:
        with wave.open(str(meta.path), "rb") as fh:
            n_channels = fh.getnchannels()
            sampwidth = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise CorpusError(f"cannot decode {meta.path}: {exc}") from exc
    if n_channels != 1:
        raise CorpusError(f"{meta.path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise CorpusError(f"{meta.path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    if rate != SAMPLE_RATE:
        raise CorpusError(
            f"{meta.path}: sample rate {rate} != {SAMPLE_RATE} (no implicit resampling)"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / _INT16_SCALE
    if len(samples) >= target_samples:
        samples = samples[:target_samples]
    else:
        samples = np.pad(samples, (0, target_samples - len(samples)))
    return AudioClip(samples=samples, sample_rate=rate, meta=meta)


def write_wav(path, samples: np.ndarray) -> None:
    """Write float samples in [-1, 1] as a mono 16-bit 16 kHz WAV."""
    quantized = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(quantized.tobytes())


def _synth_clip(rng: np.random.Generator, base_hz: float, anomaly: bool) -> np.ndarray:
    """One synthetic clip: two ID-specific sinusoids plus Gaussian noise.

    Anomalies additionally carry a detuned upper harmonic across the
    whole clip and a 0.5 s broadband noise burst.
    """
    t = np.arange(CLIP_SAMPLES, dtype=np.float64) / SAMPLE_RATE
    a1 = 0.4 * (1.0 + rng.uniform(-0.2, 0.2))
    a2 = 0.2 * (1.0 + rng.uniform(-0.2, 0.2))
    phase1, phase2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    x = a1 * np.sin(2.0 * np.pi * base_hz * t + phase1)
    x += a2 * np.sin(2.0 * np.pi * 3.0 * base_hz * t + phase2)
    x += rng.normal(0.0, 0.05, size=CLIP_SAMPLES)
    if anomaly:
        detuned = base_hz * rng.uniform(3.2, 3.6)
        phase3 = rng.uniform(0.0, 2.0 * np.pi)
        x += 0.2 * (1.0 + rng.uniform(-0.2, 0.2)) * np.sin(2.0 * np.pi * detuned * t + phase3)
        burst_len = int(0.5 * SAMPLE_RATE)
        start = int(rng.uniform(0.5, CLIP_SECONDS - 1.0) * SAMPLE_RATE)
        x[start : start + burst_len] += rng.normal(0.0, 0.3, size=burst_len)
    return np.clip(x, -1.0, 1.0)


def synth_generate(
    n_ids: int,
    clips_per_id: int,
    seed: int,
    out,
    test_clips_per_id: int | None = None,
    machine_type: str = "synth",
) -> DatasetManifest:
    """Write a deterministic synthetic corpus and return its manifest.

    Each synthetic ID k gets a base tone at 200*(k+1) Hz plus its third
    harmonic.  Train clips are all normal; the test split is half normal,
    half anomalous.  ``test_clips_per_id`` defaults to 40% of
    ``clips_per_id`` (at least 2).  Identical arguments produce
    byte-identical corpora.
    """
    if n_ids < 2:
        raise ValueError("need at least 2 synthetic ids")
    if n_ids > 13:
        raise ValueError("at most 13 ids: the third harmonic must stay below Nyquist")
    if clips_per_id < 1:
        raise ValueError("clips_per_id must be positive")
    if test_clips_per_id is None:
        test_clips_per_id = max(2, round(0.4 * clips_per_id))
    out = Path(out)
    rng = np.random.default_rng(seed)

    for k in range(n_ids):
        base_hz = 200.0 * (k + 1)
        for seq in range(clips_per_id):
            path = out / machine_type / "train" / f"normal_id_{k:02d}_{seq:08d}.wav"
            write_wav(path, _synth_clip(rng, base_hz, anomaly=False))
        n_anomaly = test_clips_per_id // 2
        n_normal = test_clips_per_id - n_anomaly
        for seq in range(n_normal):
            path = out / machine_type / "test" / f"normal_id_{k:02d}_{seq:08d}.wav"
            write_wav(path, _synth_clip(rng, base_hz, anomaly=False))
        for seq in range(n_anomaly):
            path = out / machine_type / "test" / f"anomaly_id_{k:02d}_{seq:08d}.wav"
            write_wav(path, _synth_clip(rng, base_hz, anomaly=True))

    return scan_dataset(out)


@dataclass
class Batch:
    waveforms: torch.Tensor  # (B, L) float32
    logmels: torch.Tensor  # (B, M, N) float32
    labels: torch.Tensor  # (B,) long

    @property
    def size(self) -> int:
        return self.waveforms.shape[0]


class BatchStream:
    """Reproducible shuffled batches over a manifest's train split.

    The permutation for epoch e is a pure function of (seed, e); each
    clip appears exactly once per epoch and the final batch may be
    short.  Decoded waveforms and their log-Mel spectrograms are cached
    in memory by default.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        batch_size: int,
        seed: int,
        stft: StftConfig | None = None,
        cache: bool = True,
    ):
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 (mixing and contrast need pairs)")
        self.manifest = manifest
        self.train = manifest.train_clips()
        if not self.train:
            raise ValueError("manifest has no train clips")
        self.batch_size = batch_size
        self.seed = seed
        self.stft = stft if stft is not None else StftConfig()
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] | None = {} if cache else None

    def __len__(self) -> int:
        return (len(self.train) + self.batch_size - 1) // self.batch_size

    def _clip_tensors(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        wave_t = torch.from_numpy(load_clip(self.train[idx]).samples)
        mel_t = log_mel(wave_t, self.stft)
        if self._cache is not None:
            self._cache[idx] = (wave_t, mel_t)
        return wave_t, mel_t

    def epoch(self, epoch: int) -> Iterator[Batch]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.train))
        for start in range(0, len(order), self.batch_size):
            chunk = order[start : start + self.batch_size]
            tensors = [self._clip_tensors(int(i)) for i in chunk]
            waveforms = torch.stack([w for w, _ in tensors])
            logmels = torch.stack([m for _, m in tensors])
            labels = torch.tensor(
                [self.manifest.class_index(self.train[int(i)]) for i in chunk],
                dtype=torch.long,
            )
            yield Batch(waveforms=waveforms, logmels=logmels, labels=labels)


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    stft: StftConfig | None = None,
    cache: bool = True,
) -> BatchStream:
    """Deterministic per-epoch batch stream over the train split."""
    return BatchStream(manifest, batch_size, seed, stft=stft, cache=cache)
