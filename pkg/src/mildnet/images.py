"""Image decoding, resizing, and the training-time augmentations.

Images travel as (3,H,W) float arrays with values in [0,255]. The only
file formats are binary portable pixmaps (P6) and graymaps (P5, which
decode to three identical channels) with maxval 255, so decode/encode
round trips are bit exact and free of codec dependencies.

Augmentation composes optional flips with a single affine transform
(rotation . shear . zoom about the image centre); output pixels are
inverse-mapped and sampled nearest-neighbour, with out-of-bounds
coordinates clamped to the nearest in-bounds pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binio import FormatError
from .ops import DimensionError, ParameterError


def _read_header_tokens(data: bytes, count: int, start: int) -> tuple[list[int], int]:
    """Parse whitespace-separated integer tokens, honouring '#' comments."""
    tokens: list[int] = []
    i = start
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated header")
        try:
            tokens.append(int(data[i:j]))
        except ValueError:
            raise FormatError(f"non-numeric header token {data[i:j]!r}") from None
        i = j
    if i >= len(data) or not data[i : i + 1].isspace():
        raise FormatError("missing whitespace after header")
    return tokens, i + 1


def decode_image(data: bytes) -> np.ndarray:
    """Decode P6 (color) or P5 (gray, replicated to 3 channels) bytes to (3,H,W)."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"bad magic: expected P6 or P5, got {magic!r}")
    (width, height, maxval), offset = _read_header_tokens(data, 3, 2)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255")
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[offset : offset + need]
    if len(payload) != need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 3:
        img = pixels.reshape(height, width, 3).transpose(2, 0, 1)
    else:
        img = np.broadcast_to(pixels.reshape(1, height, width), (3, height, width)).copy()
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode a (3,H,W) array with values in [0,255] as binary P6."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected (3,H,W), got {img.shape}")
    if img.min() < 0 or img.max() > 255:
        raise ParameterError("pixel values must lie in [0,255]")
    h, w = img.shape[1], img.shape[2]
    header = f"P6\n{w} {h}\n255\n".encode()
    body = np.rint(img).astype(np.uint8).transpose(1, 2, 0).tobytes()
    return header + body


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def resize_normalize(img: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize to (3,target,target), then scale into [0,1]."""
    if target < 1:
        raise ParameterError(f"target size must be >= 1, got {target}")
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected (3,H,W), got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    rows = np.minimum((np.arange(target) + 0.5) * (h / target), h - 1).astype(np.intp)
    cols = np.minimum((np.arange(target) + 0.5) * (w / target), w - 1).astype(np.intp)
    return img[:, rows[:, None], cols[None, :]] * (1.0 / 255.0)


@dataclass(frozen=True)
class AugmentSpec:
    horizontal_flip: bool = True
    vertical_flip: bool = True
    zoom_range: float = 0.2
    shear_range: float = 0.2
    rotation_range: float = 30.0
    fill_mode: str = "nearest"

    def __post_init__(self):
        if self.zoom_range < 0 or self.shear_range < 0 or self.rotation_range < 0:
            raise ParameterError("augmentation ranges must be >= 0")
        if self.fill_mode != "nearest":
            raise ParameterError(f"only 'nearest' fill is supported, got {self.fill_mode!r}")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of the augmentation parameters."""

    flip_h: bool = False
    flip_v: bool = False
    zoom: float = 1.0
    shear: float = 0.0
    rotation_deg: float = 0.0


def sample_augment_params(spec: AugmentSpec, rng: np.random.Generator) -> AugmentParams:
    """Draw one parameter set; the draw order is fixed for reproducibility."""
    flip_h = bool(spec.horizontal_flip and rng.random() < 0.5)
    flip_v = bool(spec.vertical_flip and rng.random() < 0.5)
    zoom = float(rng.uniform(1.0 - spec.zoom_range, 1.0 + spec.zoom_range)) if spec.zoom_range else 1.0
    shear = float(rng.uniform(-spec.shear_range, spec.shear_range)) if spec.shear_range else 0.0
    rot = float(rng.uniform(-spec.rotation_range, spec.rotation_range)) if spec.rotation_range else 0.0
    return AugmentParams(flip_h, flip_v, zoom, shear, rot)


def apply_augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply flips, then the composed affine; the output shape equals the input's."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected (3,H,W), got {img.shape}")
    out = img
    if params.flip_h:
        out = out[:, :, ::-1]
    if params.flip_v:
        out = out[:, ::-1, :]

    if params.zoom == 1.0 and params.shear == 0.0 and params.rotation_deg == 0.0:
        return np.ascontiguousarray(out)

    theta = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    zoom = np.array([[params.zoom, 0.0], [0.0, params.zoom]])
    fwd = rot @ shear @ zoom  # acts on (x, y) offsets from the centre
    inv = np.linalg.inv(fwd)

    h, w = out.shape[1], out.shape[2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xs - cx
    dy = ys - cy
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    # nearest sample; clamping implements the nearest-pixel fill
    ix = np.clip(np.rint(src_x).astype(np.intp), 0, w - 1)
    iy = np.clip(np.rint(src_y).astype(np.intp), 0, h - 1)
    return out[:, iy, ix]


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Sample parameters from ``rng`` and apply them; deterministic per seed."""
    return apply_augment(img, sample_augment_params(spec, rng))
