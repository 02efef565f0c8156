"""Catalog features: color histograms, projection stubs, and fusion.

An item's fused feature has three blocks: a 2048-d structure vector, a
1024-d pattern vector, and a 540-d CIELAB histogram (180 bins per
channel, L over [0,100], a and b over [-128,127], each channel summing
to 1). The structure and pattern extractors are pluggable; the built-in
stand-ins are fixed random projections of a downsampled image, which
keeps the pipeline deterministic and dependency-free.

Block distances combine as sum_f w_f * ||delta_f|| / sqrt(dim_f) with
normalized non-negative weights, so no block dominates merely by width.

The embedding store is an append-only binary file (magic "MLDE") of
(id, float32 vector) records used as the pipeline's feature cache.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .binio import FormatError
from .images import resize_normalize
from .ops import DimensionError, ParameterError

STRUCTURE_DIM = 2048
PATTERN_DIM = 1024
COLOR_BINS = 180
COLOR_DIM = 3 * COLOR_BINS
FUSED_DIM = STRUCTURE_DIM + PATTERN_DIM + COLOR_DIM

STORE_MAGIC = b"MLDE"
STORE_VERSION = 1

# D65 reference white for the XYZ -> LAB step
_XN, _YN, _ZN = 0.95047, 1.0, 1.08883
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert sRGB values in [0,255] (shape (...,3)) to CIELAB (D65)."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise DimensionError(f"expected trailing dimension 3, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ParameterError("rgb values must lie in [0,255]")
    srgb = arr / 255.0
    linear = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    scaled = xyz / np.array([_XN, _YN, _ZN])
    eps = (6.0 / 29.0) ** 3
    f = np.where(scaled > eps, np.cbrt(scaled), scaled / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(arr)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_histogram(img: np.ndarray) -> np.ndarray:
    """540-d LAB histogram of a (3,H,W) image in [0,255]; each block sums to 1."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected (3,H,W), got {img.shape}")
    lab = rgb_to_lab(img.transpose(1, 2, 0).reshape(-1, 3))
    n = lab.shape[0]
    blocks = []
    for channel, (lo, hi) in enumerate(((0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0))):
        values = np.clip(lab[:, channel], lo, hi)
        counts, _ = np.histogram(values, bins=COLOR_BINS, range=(lo, hi))
        blocks.append(counts.astype(np.float64) / n)
    return np.concatenate(blocks)


class RandomProjectionExtractor:
    """Fixed random projection of a downsampled image; a deterministic
    stand-in for a learned structure or pattern descriptor."""

    def __init__(self, out_dim: int, seed: int, patch: int = 16):
        if out_dim < 1 or patch < 1:
            raise ParameterError("out_dim and patch must be >= 1")
        self.out_dim = out_dim
        self.patch = patch
        in_dim = 3 * patch * patch
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        flat = resize_normalize(img, self.patch).ravel()
        return self._proj @ flat


def default_extractors() -> dict:
    return {
        "structure": RandomProjectionExtractor(STRUCTURE_DIM, seed=11),
        "pattern": RandomProjectionExtractor(PATTERN_DIM, seed=23),
    }


@dataclass(frozen=True)
class FusedFeature:
    structure: np.ndarray
    pattern: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        for name, vec, dim in (
            ("structure", self.structure, STRUCTURE_DIM),
            ("pattern", self.pattern, PATTERN_DIM),
            ("color", self.color, COLOR_DIM),
        ):
            if np.asarray(vec).shape != (dim,):
                raise DimensionError(f"{name} block must have shape ({dim},)")


def extract_fused(img: np.ndarray, extractors: dict | None = None) -> FusedFeature:
    """Run the structure/pattern extractors and the LAB histogram on one image."""
    if extractors is None:
        extractors = default_extractors()
    structure = np.asarray(extractors["structure"](img), dtype=np.float64)
    pattern = np.asarray(extractors["pattern"](img), dtype=np.float64)
    return FusedFeature(structure=structure, pattern=pattern, color=lab_histogram(img))


def pack_fused(feature: FusedFeature) -> np.ndarray:
    return np.concatenate([feature.structure, feature.pattern, feature.color])


def unpack_fused(vec: np.ndarray) -> FusedFeature:
    v = np.asarray(vec, dtype=np.float64).ravel()
    if v.shape != (FUSED_DIM,):
        raise DimensionError(f"expected ({FUSED_DIM},), got {v.shape}")
    return FusedFeature(
        structure=v[:STRUCTURE_DIM],
        pattern=v[STRUCTURE_DIM : STRUCTURE_DIM + PATTERN_DIM],
        color=v[STRUCTURE_DIM + PATTERN_DIM :],
    )


@dataclass(frozen=True)
class FusionWeights:
    structure: float = 0.5
    pattern: float = 0.3
    color: float = 0.2

    def __post_init__(self):
        vals = (self.structure, self.pattern, self.color)
        if any(v < 0 for v in vals):
            raise ParameterError(f"fusion weights must be >= 0, got {vals}")
        if sum(vals) <= 0:
            raise ParameterError("fusion weights must not all be zero")

    def normalized(self) -> tuple[float, float, float]:
        total = self.structure + self.pattern + self.color
        return (self.structure / total, self.pattern / total, self.color / total)


_BLOCKS = (
    (0, STRUCTURE_DIM),
    (STRUCTURE_DIM, STRUCTURE_DIM + PATTERN_DIM),
    (STRUCTURE_DIM + PATTERN_DIM, FUSED_DIM),
)
_BLOCK_SCALE = tuple(1.0 / np.sqrt(hi - lo) for lo, hi in _BLOCKS)


def fused_distance(a: FusedFeature, b: FusedFeature, weights: FusionWeights | None = None) -> float:
    """Weighted sum of per-block euclidean distances, each scaled by 1/sqrt(dim)."""
    if weights is None:
        weights = FusionWeights()
    w = weights.normalized()
    total = 0.0
    for wf, (xa, xb), scale in zip(
        w,
        ((a.structure, b.structure), (a.pattern, b.pattern), (a.color, b.color)),
        _BLOCK_SCALE,
    ):
        d = np.asarray(xa, dtype=np.float64) - np.asarray(xb, dtype=np.float64)
        total += wf * float(np.sqrt(d @ d)) * scale
    return total


def fused_distances_to(
    query: np.ndarray,
    mat: np.ndarray,
    weights: FusionWeights | None = None,
) -> np.ndarray:
    """Fused distance from one packed vector to each row of a packed matrix.

    Row-wise reductions only, so a given (query, row) pair produces the
    same bits no matter which row subset ``mat`` came from.
    """
    if weights is None:
        weights = FusionWeights()
    q = np.asarray(query, dtype=np.float64).ravel()
    m = np.asarray(mat, dtype=np.float64)
    if q.shape != (FUSED_DIM,) or m.ndim != 2 or m.shape[1] != FUSED_DIM:
        raise DimensionError(f"expected packed dim {FUSED_DIM}, got {q.shape} and {m.shape}")
    w = weights.normalized()
    total = np.zeros(m.shape[0])
    for wf, (lo, hi), scale in zip(w, _BLOCKS, _BLOCK_SCALE):
        diff = m[:, lo:hi] - q[lo:hi]
        total += (wf * scale) * np.sqrt((diff * diff).sum(axis=1))
    return total


class EmbeddingStore:
    """Append-only (id, float32 vector) store backing the feature cache.

    Layout: magic "MLDE", version u32, dim u32, count u64, then count
    records of (u16-length utf-8 id, dim little-endian float32 values).
    ``put`` appends and patches the header count in place. A truncated
    tail is dropped with a warning on open.
    """

    def __init__(self, path, dim: int | None = None):
        self.path = os.fspath(path)
        self._entries: dict[str, np.ndarray] = {}
        exists = os.path.exists(self.path) and os.path.getsize(self.path) > 0
        if exists:
            self._open_existing(dim)
        else:
            if dim is None:
                raise ParameterError("dim is required when creating a new store")
            self.dim = int(dim)
            self._fh = open(self.path, "w+b")
            self._fh.write(STORE_MAGIC)
            binio.write_u32(self._fh, STORE_VERSION)
            binio.write_u32(self._fh, self.dim)
            binio.write_u64(self._fh, 0)
            self._fh.flush()

    def _open_existing(self, dim: int | None) -> None:
        self._fh = open(self.path, "r+b")
        fh = self._fh
        binio.expect_magic(fh, STORE_MAGIC)
        version = binio.read_u32(fh)
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}")
        self.dim = binio.read_u32(fh)
        if self.dim < 1:
            raise FormatError(f"bad store dim {self.dim}")
        if dim is not None and dim != self.dim:
            raise DimensionError(f"store dim {self.dim} != requested {dim}")
        count = binio.read_u64(fh)
        good_end = fh.tell()
        loaded = 0
        try:
            for _ in range(count):
                item_id = binio.read_str(fh)
                vec = binio.read_floats(fh, self.dim, "<f4", "store vector")
                self._entries[item_id] = vec
                good_end = fh.tell()
                loaded += 1
        except FormatError:
            pass
        trailing = os.path.getsize(self.path) - good_end
        if loaded < count or trailing:
            warnings.warn(
                f"{self.path}: dropping truncated tail ({loaded}/{count} records readable)",
                stacklevel=3,
            )
            fh.truncate(good_end)
            fh.seek(12)
            binio.write_u64(fh, loaded)
            fh.flush()
        fh.seek(0, os.SEEK_END)

    def put(self, item_id: str, vec: np.ndarray) -> None:
        arr = np.asarray(vec, dtype=np.float32).ravel()
        if arr.shape != (self.dim,):
            raise DimensionError(f"vector dim {arr.shape[0]} != store dim {self.dim}")
        if item_id in self._entries:
            raise ParameterError(f"duplicate store id {item_id!r}")
        fh = self._fh
        fh.seek(0, os.SEEK_END)
        binio.write_str(fh, item_id)
        binio.write_floats(fh, arr, "<f4")
        self._entries[item_id] = arr
        fh.seek(12)
        binio.write_u64(fh, len(self._entries))
        fh.flush()
        fh.seek(0, os.SEEK_END)

    def get(self, item_id: str) -> np.ndarray | None:
        return self._entries.get(item_id)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        return list(self._entries.keys())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
