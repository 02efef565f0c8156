"""Dense tensor kernels with explicit backward passes.

Every layer the embedding network needs is implemented as a pure
forward function plus a matching ``*_backward`` that maps the upstream
gradient to gradients for each input. Arrays are plain numpy ndarrays;
training math runs in float64 (the finite-difference tolerances used to
validate the backward passes are not reachable in float32). Nothing
here mutates its arguments, so any of these functions may be called
concurrently.

Conventions:

* feature maps are ``(C, H, W)``, channel first, row-major
* vectors are rank-1
* conv weights are ``(K, C, kh, kw)``, dense weights ``(M, N)``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axes."""


class ParameterError(ValueError):
    """An operation parameter is outside its valid range."""


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d cross-correlation."""

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ParameterError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ParameterError(f"padding must be 'same' or 'valid', got {self.padding!r}")


def _conv_padding(spec: ConvSpec, h: int, w: int) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) padding for the given input size."""
    if spec.padding == "valid":
        return 0, 0, 0, 0
    out_h = -(-h // spec.stride)
    out_w = -(-w // spec.stride)
    pad_h = max((out_h - 1) * spec.stride + spec.kernel_h - h, 0)
    pad_w = max((out_w - 1) * spec.stride + spec.kernel_w - w, 0)
    return pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 3:
        raise DimensionError(f"conv2d input must be (C,H,W), got rank {x.ndim}")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise DimensionError(
            f"conv2d weights expected {(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)}, "
            f"got {w.shape}"
        )
    if x.shape[0] != spec.in_channels:
        raise DimensionError(f"conv2d input channel axis is {x.shape[0]}, spec says {spec.in_channels}")
    if b.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias expected ({spec.out_channels},), got {b.shape}")
    if spec.padding == "valid" and (x.shape[1] < spec.kernel_h or x.shape[2] < spec.kernel_w):
        raise DimensionError(
            f"conv2d valid padding needs spatial dims >= kernel, got {x.shape[1:]} vs "
            f"{(spec.kernel_h, spec.kernel_w)}"
        )


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``x`` (C,H,W) with ``w`` (K,C,kh,kw), add per-filter bias.

    'same' padding at stride 1 preserves the spatial dims.
    """
    _check_conv_shapes(x, w, b, spec)
    top, bottom, left, right = _conv_padding(spec, x.shape[1], x.shape[2])
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(1, 2))
    win = win[:, :: spec.stride, :: spec.stride]
    # (K,C,kh,kw) x (C,H',W',kh,kw) -> (K,H',W')
    out = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    return out + b[:, None, None]


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, weights, and bias."""
    top, bottom, left, right = _conv_padding(spec, x.shape[1], x.shape[2])
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(1, 2))
    win = win[:, :: spec.stride, :: spec.stride]

    grad_b = grad_out.sum(axis=(1, 2))
    # grad_out (K,H',W') x win (C,H',W',kh,kw) -> (K,C,kh,kw)
    grad_w = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))

    grad_xp = np.zeros_like(xp)
    out_h, out_w = grad_out.shape[1], grad_out.shape[2]
    s = spec.stride
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            # (K,C) x (K,H',W') -> (C,H',W') scattered onto the strided grid
            contrib = np.tensordot(w[:, :, i, j], grad_out, axes=([0], [0]))
            grad_xp[:, i : i + s * out_h : s, j : j + s * out_w : s] += contrib
    h, wd = x.shape[1], x.shape[2]
    grad_x = grad_xp[:, top : top + h, left : left + wd]
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; the subgradient at exactly 0 is 0."""
    return np.where(x > 0, grad_out, 0.0)


def maxpool2d(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling at stride 2. Requires even spatial dims."""
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d input must be (C,H,W), got rank {x.ndim}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    tiles = _pool_tiles(x)
    return tiles.max(axis=-1)


def maxpool2d_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Route gradient to the argmax of each 2x2 window (first in row-major order on ties)."""
    c, h, w = x.shape
    tiles = _pool_tiles(x)
    winner = tiles.argmax(axis=-1)  # argmax returns the first maximum
    grad_tiles = np.zeros_like(tiles)
    np.put_along_axis(grad_tiles, winner[..., None], grad_out[..., None], axis=-1)
    grad_x = grad_tiles.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
    return grad_x.reshape(c, h, w)


def _pool_tiles(x: np.ndarray) -> np.ndarray:
    """Reshape (C,H,W) into (C,H/2,W/2,4) tiles, window cells in row-major order."""
    c, h, w = x.shape
    t = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    return t.reshape(c, h // 2, w // 2, 4)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean: (C,H,W) -> (C,)."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool input must be (C,H,W), got rank {x.ndim}")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(grad_out: np.ndarray, x_shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = x_shape
    return np.broadcast_to(grad_out[:, None, None] / (h * w), (c, h, w)).copy()


def dense_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b for a rank-1 input."""
    if x.ndim != 1 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"dense_affine expects ranks (1,2,1), got ({x.ndim},{w.ndim},{b.ndim})"
        )
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise DimensionError(
            f"dense_affine shapes inconsistent: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    return w @ x + b


def dense_affine_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_x = w.T @ grad_out
    grad_w = np.outer(grad_out, x)
    grad_b = grad_out.copy()
    return grad_x, grad_w, grad_b


def dropout_keep_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Sample the boolean keep-mask used by training-mode dropout.

    Each element is kept with probability 1 - rate; the draw is a
    deterministic function of the generator state.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    return rng.random(shape) >= rate


def apply_dropout(x: np.ndarray, keep: np.ndarray, rate: float) -> np.ndarray:
    """Zero dropped elements and scale survivors by 1/(1-rate) (inverted dropout)."""
    return np.where(keep, x / (1.0 - rate), 0.0)


def dropout_mask(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Dropout layer: identity in 'infer' mode, inverted dropout in 'train' mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x.copy()
    if mode != "train":
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout requires an rng")
    return apply_dropout(x, dropout_keep_mask(x.shape, rate, rng), rate)


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    """Concatenate rank-1 vectors in order."""
    if not inputs:
        raise ParameterError("concat_channels needs at least one input")
    for i, v in enumerate(inputs):
        if v.ndim != 1:
            raise DimensionError(f"concat_channels input {i} has rank {v.ndim}, expected 1")
    return np.concatenate(inputs)


def split_channels(vec: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Split a vector back into blocks of the given sizes (the concat backward)."""
    if sum(sizes) != vec.shape[0]:
        raise DimensionError(f"split sizes sum to {sum(sizes)}, vector has {vec.shape[0]}")
    offsets = np.cumsum([0] + list(sizes))
    return [vec[offsets[i] : offsets[i + 1]].copy() for i in range(len(sizes))]


def finite_diff_gradcheck(op_closure, x: np.ndarray, epsilon: float = 1e-5) -> float:
    """Compare an analytic gradient against central finite differences.

    ``op_closure(x)`` must return ``(value, grad)`` where ``value`` is a
    scalar and ``grad`` has the shape of ``x``. Returns the max over
    elements of ``|a - n| / max(|a|, |n|, 1e-8)``. The caller is
    responsible for evaluating away from non-differentiable points
    (relu kinks, pooling ties).
    """
    _, analytic = op_closure(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros_like(analytic)
    flat_x = x.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + epsilon
        up, _ = op_closure(x)
        flat_x[i] = orig - epsilon
        down, _ = op_closure(x)
        flat_x[i] = orig
        flat_n[i] = (up - down) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
