"""Feature-file container, manifests, synthetic data and batching.

Feature file layout (all little-endian)::

    magic     8 bytes  b"CACEFEAT"
    version   u16
    T, d_v, H, W, d_a, C   u32 each
    visual    T*d_v*H*W float32, row-major t -> channel -> row -> col
    audio     T*d_a float32
    labels    T bytes, 255 = background, else category index
    category  1 byte, video-level category
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .localization import BACKGROUND

__all__ = [
    "MAGIC",
    "VERSION",
    "FeatureFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "FeatureSequence",
    "SyntheticSpec",
    "Batch",
    "encode_feature_file",
    "decode_feature_file",
    "write_feature_file",
    "read_feature_file",
    "read_manifest",
    "write_manifest",
    "load_dataset",
    "generate_synthetic",
    "make_batches",
    "collate",
    "split_dataset",
]

MAGIC = b"CACEFEAT"
VERSION = 1
_HEADER = struct.Struct("<8sH6I")
_BG_BYTE = 255


class FeatureFormatError(ValueError):
    """A feature file does not match the container layout."""


class BadMagicError(FeatureFormatError):
    pass


class VersionMismatchError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


@dataclass
class FeatureSequence:
    visual: np.ndarray  # (T, d_v, H, W)
    audio: np.ndarray  # (T, d_a)
    labels: np.ndarray  # (T,) int, BACKGROUND for background
    category: int
    num_classes: int

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def T(self) -> int:
        return self.visual.shape[0]

    def validate(self) -> None:
        if self.visual.ndim != 4 or self.audio.ndim != 2:
            raise ValueError(f"expected visual (T,d_v,H,W) and audio (T,d_a), got {self.visual.shape}, {self.audio.shape}")
        if not (self.visual.shape[0] == self.audio.shape[0] == self.labels.shape[0]):
            raise ValueError("visual, audio and labels disagree on the segment count")
        if not (0 < self.num_classes < _BG_BYTE):
            raise ValueError(f"num_classes must lie in [1, 254], got {self.num_classes}")
        ok = (self.labels == BACKGROUND) | ((self.labels >= 0) & (self.labels < self.num_classes))
        if not ok.all():
            raise ValueError("labels must be a category index or background")
        if not 0 <= self.category < self.num_classes:
            raise ValueError(f"category {self.category} out of range for C={self.num_classes}")


# -------------------------------------------------------------- file format


def encode_feature_file(seq: FeatureSequence) -> bytes:
    T, d_v, H, W = seq.visual.shape
    d_a = seq.audio.shape[1]
    header = _HEADER.pack(MAGIC, VERSION, T, d_v, H, W, d_a, seq.num_classes)
    labels = np.where(seq.labels == BACKGROUND, _BG_BYTE, seq.labels).astype(np.uint8)
    return b"".join(
        [
            header,
            seq.visual.astype("<f4").tobytes(order="C"),
            seq.audio.astype("<f4").tobytes(order="C"),
            labels.tobytes(),
            bytes([seq.category]),
        ]
    )


def decode_feature_file(buf: bytes, source: str = "<bytes>") -> FeatureSequence:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: bad magic bytes")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{source}: header truncated ({len(buf)} bytes)")
    _, version, T, d_v, H, W, d_a, C = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: unsupported version {version} (expected {VERSION})")
    n_vis, n_aud = T * d_v * H * W, T * d_a
    expected = _HEADER.size + 4 * (n_vis + n_aud) + T + 1
    if len(buf) < expected:
        raise TruncatedFileError(f"{source}: payload truncated, expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise FeatureFormatError(f"{source}: {len(buf) - expected} trailing bytes after payload")
    off = _HEADER.size
    visual = np.frombuffer(buf, dtype="<f4", count=n_vis, offset=off).reshape(T, d_v, H, W)
    off += 4 * n_vis
    audio = np.frombuffer(buf, dtype="<f4", count=n_aud, offset=off).reshape(T, d_a)
    off += 4 * n_aud
    raw = np.frombuffer(buf, dtype=np.uint8, count=T, offset=off)
    category = buf[off + T]
    if np.any((raw >= C) & (raw != _BG_BYTE)) or category >= C:
        raise FeatureFormatError(f"{source}: category byte out of range for C={C}")
    labels = np.where(raw == _BG_BYTE, BACKGROUND, raw.astype(np.int64))
    return FeatureSequence(visual=visual, audio=audio, labels=labels, category=int(category), num_classes=C)


def write_feature_file(path, seq: FeatureSequence) -> None:
    data = encode_feature_file(seq)
    path = Path(path)
    path.write_bytes(data)
    if path.stat().st_size != len(data):
        raise OSError(f"{path}: short write")


def read_feature_file(path) -> FeatureSequence:
    path = Path(path)
    return decode_feature_file(path.read_bytes(), str(path))


def read_manifest(path) -> list[Path]:
    """One feature-file path per line; '#' starts a comment. Relative paths resolve against the manifest."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def write_manifest(path, members: Sequence, comment: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {comment}"] if comment else []
    for m in members:
        m = Path(m)
        try:
            m = m.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(str(m))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(manifest) -> list[FeatureSequence]:
    return [read_feature_file(p) for p in read_manifest(manifest)]


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    n_videos: int = 500
    T: int = 10
    C: int = 28
    d_v: int = 16
    d_a: int = 16
    H: int = 2
    W: int = 2
    min_event_len: int = 2
    noise_std: float = 0.5
    mismatch_rate: float = 0.5
    jitter_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for key in ("n_videos", "T", "C", "d_v", "d_a", "H", "W"):
            if getattr(self, key) < 1:
                raise ValueError(f"data.{key} must be positive, got {getattr(self, key)}")
        if self.C < 2:
            raise ValueError("data.C must be >= 2 so mismatched backgrounds exist")
        if self.C >= _BG_BYTE:
            raise ValueError(f"data.C must be < {_BG_BYTE}")
        if not 2 <= self.min_event_len <= self.T:
            raise ValueError(f"data.min_event_len must lie in [2, T], got {self.min_event_len}")
        if self.noise_std < 0 or self.jitter_std < 0:
            raise ValueError("data.noise_std and data.jitter_std must be >= 0")
        if not 0 <= self.mismatch_rate <= 1:
            raise ValueError(f"data.mismatch_rate must lie in [0, 1], got {self.mismatch_rate}")


def _stream(seed: int, *key: int) -> np.random.Generator:
    # PCG64 substream addressed by (seed, key); independent of how many others exist
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def synthetic_prototypes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class visual maps (C, d_v, H, W) and audio vectors (C, d_a)."""
    rng = _stream(spec.seed, 0)
    base = rng.standard_normal((spec.C, spec.d_v))
    jitter = spec.jitter_std * rng.standard_normal((spec.C, spec.d_v, spec.H, spec.W))
    visual = base[:, :, None, None] + jitter
    audio = rng.standard_normal((spec.C, spec.d_a))
    return visual, audio


def _synth_video(spec: SyntheticSpec, idx: int, proto_v: np.ndarray, proto_a: np.ndarray) -> FeatureSequence:
    rng = _stream(spec.seed, 1, idx)
    T = spec.T
    cat = int(rng.integers(spec.C))
    length = int(rng.integers(spec.min_event_len, T + 1))
    start = int(rng.integers(0, T - length + 1))
    labels = np.full(T, BACKGROUND, dtype=np.int64)
    labels[start : start + length] = cat

    visual = np.empty((T, spec.d_v, spec.H, spec.W))
    audio = np.empty((T, spec.d_a))
    for t in range(T):
        v_cls = a_cls = cat
        if labels[t] == BACKGROUND:
            swap_audio = rng.random() < 0.5
            if rng.random() < spec.mismatch_rate:
                other = int(rng.integers(spec.C - 1))
                other += other >= cat
            else:
                other = None  # that modality carries no event at all
            if swap_audio:
                a_cls = other
            else:
                v_cls = other
        visual[t] = proto_v[v_cls] if v_cls is not None else 0.0
        audio[t] = proto_a[a_cls] if a_cls is not None else 0.0
        visual[t] += spec.noise_std * rng.standard_normal(visual[t].shape)
        audio[t] += spec.noise_std * rng.standard_normal(audio[t].shape)
    return FeatureSequence(visual=visual, audio=audio, labels=labels, category=cat, num_classes=spec.C)


def generate_synthetic(spec: SyntheticSpec) -> list[FeatureSequence]:
    """Videos with one category each and a contiguous event span of length >= ``min_event_len``.

    Event segments show the category's visual and audio prototypes. A
    background segment keeps one modality on the video's category and either
    swaps the other to a different class (probability ``mismatch_rate``) or
    drops it to pure noise. Gaussian noise of ``noise_std`` goes on top.
    """
    spec.validate()
    proto_v, proto_a = synthetic_prototypes(spec)
    return [_synth_video(spec, i, proto_v, proto_a) for i in range(spec.n_videos)]


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    visual: np.ndarray  # (B, T, d_v, H, W)
    audio: np.ndarray  # (B, T, d_a)
    labels: np.ndarray  # (B, T)
    categories: np.ndarray  # (B,)
    indices: np.ndarray  # positions in the source dataset

    def __len__(self) -> int:
        return len(self.categories)


def collate(dataset: Sequence[FeatureSequence], indices) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    items = [dataset[i] for i in idx]
    return Batch(
        visual=np.stack([s.visual for s in items]),
        audio=np.stack([s.audio for s in items]),
        labels=np.stack([s.labels for s in items]),
        categories=np.array([s.category for s in items], dtype=np.int64),
        indices=idx,
    )


def make_batches(dataset: Sequence[FeatureSequence], batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Seeded per-epoch shuffle; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    order = _stream(seed, 2, epoch).permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        yield collate(dataset, order[lo : lo + batch_size])


def split_dataset(dataset: Sequence[FeatureSequence], val_fraction: float, seed: int):
    """Deterministic train/validation split."""
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    order = _stream(seed, 3).permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [dataset[i] for i in train], [dataset[i] for i in val]


def dataset_files(directory, n: int) -> list[str]:
    return [os.path.join(directory, f"video_{i:05d}.feat") for i in range(n)]
