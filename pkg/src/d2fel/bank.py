"""Feature banks and their binary file format.

Layout, all little-endian::

    b"D2FB" | version u32 | rows u64 | dim u32 | nseg u32 | seg dims u32 * nseg
    | features f32 * rows * dim | labels i32 * rows * 4 (identity, camera, domain, split)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

MAGIC = b"D2FB"
VERSION = 1

SPLIT_CODES = {"train": 0, "query": 1, "gallery": 2}


class BankFormatError(ValueError):
    """Raised when a feature bank file is malformed."""


@dataclass
class FeatureBank:
    features: np.ndarray
    identity: np.ndarray
    camera: np.ndarray
    domain: np.ndarray
    split: np.ndarray
    segments: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        n = self.features.shape[0]
        for name in ("identity", "camera", "domain", "split"):
            arr = np.asarray(getattr(self, name), dtype=np.int32).reshape(-1)
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} labels for {n} rows")
            setattr(self, name, arr)
        self.segments = tuple(int(s) for s in self.segments) or (self.dim,)
        if sum(self.segments) != self.dim:
            raise ValueError(f"segments {self.segments} do not sum to dim {self.dim}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, index) -> "FeatureBank":
        return FeatureBank(self.features[index], self.identity[index], self.camera[index],
                           self.domain[index], self.split[index], self.segments)

    def with_features(self, features: np.ndarray, segments: Sequence[int] = ()) -> "FeatureBank":
        """Same labels, new feature matrix (e.g. after reduction)."""
        return FeatureBank(features, self.identity, self.camera, self.domain, self.split, segments)

    def segment(self, k: int) -> np.ndarray:
        start = sum(self.segments[:k])
        return self.features[:, start:start + self.segments[k]]

    def split_rows(self, name: str) -> "FeatureBank":
        return self.subset(self.split == SPLIT_CODES[name])

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQI", VERSION, len(self), self.dim))
        buf.write(struct.pack("<I", len(self.segments)))
        buf.write(np.asarray(self.segments, dtype="<u4").tobytes())
        buf.write(self.features.astype("<f4").tobytes())
        labels = np.stack([self.identity, self.camera, self.domain, self.split], axis=1)
        buf.write(labels.astype("<i4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeatureBank":
        if raw[:4] != MAGIC:
            raise BankFormatError("not a feature bank (bad magic)")
        version, rows, dim = struct.unpack_from("<IQI", raw, 4)
        if version != VERSION:
            raise BankFormatError(f"unsupported bank version {version}")
        off = 4 + 16
        (nseg,) = struct.unpack_from("<I", raw, off)
        off += 4
        segments = np.frombuffer(raw, "<u4", nseg, off)
        off += 4 * nseg
        need = off + rows * dim * 4 + rows * 16
        if len(raw) != need:
            raise BankFormatError(f"bank file has {len(raw)} bytes, expected {need}")
        feats = np.frombuffer(raw, "<f4", rows * dim, off).reshape(rows, dim)
        off += rows * dim * 4
        labels = np.frombuffer(raw, "<i4", rows * 4, off).reshape(rows, 4)
        return cls(feats.astype(np.float32), labels[:, 0], labels[:, 1], labels[:, 2], labels[:, 3],
                   tuple(int(s) for s in segments))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureBank":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def normalize_segments(bank: FeatureBank) -> FeatureBank:
    """L2-normalize every head segment of every row (zero segments stay zero)."""
    parts = []
    for k in range(len(bank.segments)):
        seg = bank.segment(k).astype(np.float64)
        norm = np.linalg.norm(seg, axis=1, keepdims=True)
        parts.append(np.where(norm > 0, seg / np.where(norm > 0, norm, 1.0), 0.0))
    return bank.with_features(np.concatenate(parts, axis=1), bank.segments)
