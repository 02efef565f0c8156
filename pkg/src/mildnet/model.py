"""The embedding network: a VGG16-shaped backbone with pooled intermediate taps.

Five conv blocks (conv+relu repeated, then 2x2 max pool) feed a head.
Each tapped pool output is global-average-pooled to a per-channel
vector; the tap vectors are concatenated in block order and passed
through FC -> relu -> dropout -> FC to produce the embedding. With the
default widths (64,128,256,512,512) and all five pools tapped the
concatenated descriptor is 1472-d and the full parameter count is
21,927,744.

Weights live in an ordered ``{name: ndarray}`` map with ``.w``/``.b``
entries per layer; everything is float64 in memory and float32 in the
weights file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .binio import (
    FormatError,
    expect_magic,
    read_str,
    read_u8,
    read_u32,
    read_u64,
    read_floats,
    write_str,
    write_u8,
    write_u32,
    write_u64,
    write_floats,
)
from .ops import ConvSpec, DimensionError, ParameterError

POOL_NAMES = ("block1_pool", "block2_pool", "block3_pool", "block4_pool", "block5_pool")
KERNEL = 3

WEIGHTS_MAGIC = b"MLDW"
WEIGHTS_VERSION_F32 = 1
WEIGHTS_VERSION_F64 = 2  # used inside checkpoints, where 32-bit would break exact resume


@dataclass(frozen=True)
class ModelConfig:
    block_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3, 3)
    input_size: int = 224
    skip_taps: tuple[str, ...] = POOL_NAMES
    embedding_dim: int = 2048
    hidden_dim: int = 2048
    dropout_rate: float = 0.5
    freeze_prefix: int = 10

    def __post_init__(self):
        if len(self.block_channels) != 5 or len(self.convs_per_block) != 5:
            raise ParameterError("block_channels and convs_per_block must list all 5 blocks")
        if any(c < 1 for c in self.block_channels) or any(n < 1 for n in self.convs_per_block):
            raise ParameterError("channel counts and convs per block must be >= 1")
        if not self.skip_taps:
            raise ParameterError("skip_taps must name at least one pool output")
        bad = [t for t in self.skip_taps if t not in POOL_NAMES]
        if bad:
            raise ParameterError(f"unknown skip taps: {bad}")
        if self.embedding_dim < 1 or self.hidden_dim < 1:
            raise ParameterError("embedding_dim and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.freeze_prefix < 0 or self.freeze_prefix > len(layer_names(self)):
            raise ParameterError(f"freeze_prefix outside 0..{len(layer_names(self))}")
        # canonical tap order = block order
        object.__setattr__(
            self, "skip_taps", tuple(sorted(set(self.skip_taps), key=POOL_NAMES.index))
        )

    def config_hash(self) -> int:
        """Stable 64-bit hash of every config field, recorded in weight files."""
        blob = json.dumps(
            {
                "block_channels": list(self.block_channels),
                "convs_per_block": list(self.convs_per_block),
                "input_size": self.input_size,
                "skip_taps": list(self.skip_taps),
                "embedding_dim": self.embedding_dim,
                "hidden_dim": self.hidden_dim,
                "dropout_rate": self.dropout_rate,
                "freeze_prefix": self.freeze_prefix,
            },
            sort_keys=True,
        ).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass(frozen=True)
class Embedding:
    """An embedding vector tagged with the item it describes."""

    item_id: str
    vector: np.ndarray


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale configuration used by tests and gradient checks."""
    cfg = ModelConfig(
        block_channels=(4, 8, 8, 16, 16),
        convs_per_block=(2, 2, 3, 3, 3),
        input_size=32,
        hidden_dim=64,
        embedding_dim=64,
        dropout_rate=0.5,
        freeze_prefix=0,
    )
    return replace(cfg, **overrides) if overrides else cfg


PRESETS = {"default": ModelConfig, "tiny": tiny_config}


def layer_names(config: ModelConfig) -> list[str]:
    """Layers in build order: convs and pools per block, then the two FC layers."""
    names = []
    for b in range(5):
        for i in range(config.convs_per_block[b]):
            names.append(f"block{b + 1}_conv{i + 1}")
        names.append(f"block{b + 1}_pool")
    names.extend(["fc1", "fc2"])
    return names


def conv_layer_plan(config: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) for every conv layer in order."""
    plan = []
    c_in = 3
    for b in range(5):
        c_out = config.block_channels[b]
        for i in range(config.convs_per_block[b]):
            plan.append((f"block{b + 1}_conv{i + 1}", c_in, c_out))
            c_in = c_out
    return plan


def concat_width(config: ModelConfig) -> int:
    """Width of the concatenated descriptor: sum of tapped pool channel counts."""
    return sum(config.block_channels[POOL_NAMES.index(t)] for t in config.skip_taps)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map of parameter name to shape, matching build order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for name, c_in, c_out in conv_layer_plan(config):
        shapes[f"{name}.w"] = (c_out, c_in, KERNEL, KERNEL)
        shapes[f"{name}.b"] = (c_out,)
    cw = concat_width(config)
    shapes["fc1.w"] = (config.hidden_dim, cw)
    shapes["fc1.b"] = (config.hidden_dim,)
    shapes["fc2.w"] = (config.embedding_dim, config.hidden_dim)
    shapes["fc2.b"] = (config.embedding_dim,)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact parameter count, computed symbolically (no allocation)."""
    total = 0
    for name, c_in, c_out in conv_layer_plan(config):
        total += KERNEL * KERNEL * c_in * c_out + c_out
    cw = concat_width(config)
    total += cw * config.hidden_dim + config.hidden_dim
    total += config.hidden_dim * config.embedding_dim + config.embedding_dim
    return total


def build_network(config: ModelConfig, init_seed: int) -> dict[str, np.ndarray]:
    """Allocate weights: He-uniform kernels/matrices, zero biases.

    Deterministic per seed; the draw order follows ``param_shapes``.
    """
    rng = np.random.default_rng(init_seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-limit, limit, size=shape)
    return weights


def freeze_layers(config: ModelConfig) -> tuple[str, ...]:
    """Names of the first ``freeze_prefix`` layers in build order.

    Pools are counted but own no parameters; with the default prefix of
    10 the frozen span is exactly blocks 1-3.
    """
    return tuple(layer_names(config)[: config.freeze_prefix])


def frozen_param_names(config: ModelConfig) -> frozenset[str]:
    """Parameter entries the optimizer must never update."""
    frozen = freeze_layers(config)
    names = set()
    for layer in frozen:
        if "pool" in layer:
            continue
        names.add(f"{layer}.w")
        names.add(f"{layer}.b")
    return frozenset(names)


@dataclass
class ForwardCache:
    """Intermediate values needed by the backward pass."""

    conv_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    conv_pre: dict[str, np.ndarray] = field(default_factory=dict)
    pool_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    pool_outputs: dict[str, np.ndarray] = field(default_factory=dict)
    concat_vec: np.ndarray | None = None
    fc1_pre: np.ndarray | None = None
    fc1_out: np.ndarray | None = None
    dropout_keep: np.ndarray | None = None
    head_in: np.ndarray | None = None  # fc2 input (after dropout)


def _conv_spec(c_in: int, c_out: int) -> ConvSpec:
    return ConvSpec(KERNEL, KERNEL, c_in, c_out, stride=1, padding="same")


def forward_embed(
    weights: dict[str, np.ndarray],
    config: ModelConfig,
    image: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    cache: ForwardCache | None = None,
) -> np.ndarray:
    """Run the network on one (3,S,S) image and return the embedding.

    ``mode='train'`` activates dropout, whose mask is drawn from ``rng``;
    infer mode is a pure function of (weights, image). Pass a
    ``ForwardCache`` to retain the intermediates ``backward_embed`` needs.
    """
    s = config.input_size
    if image.shape != (3, s, s):
        raise DimensionError(f"expected image shape (3,{s},{s}), got {image.shape}")
    if s % 32 != 0:
        raise DimensionError(f"input size must be divisible by 32, got {s}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")

    x = np.asarray(image, dtype=np.float64)
    taps: list[np.ndarray] = []
    plan = conv_layer_plan(config)
    li = 0
    for b in range(5):
        for _ in range(config.convs_per_block[b]):
            name, c_in, c_out = plan[li]
            li += 1
            if cache is not None:
                cache.conv_inputs[name] = x
            pre = ops.conv2d(x, weights[f"{name}.w"], weights[f"{name}.b"], _conv_spec(c_in, c_out))
            if cache is not None:
                cache.conv_pre[name] = pre
            x = ops.relu(pre)
        pool_name = POOL_NAMES[b]
        if cache is not None:
            cache.pool_inputs[pool_name] = x
        x = ops.maxpool2d(x)
        if cache is not None:
            cache.pool_outputs[pool_name] = x
        if pool_name in config.skip_taps:
            taps.append(ops.global_avg_pool(x))

    vec = ops.concat_channels(taps)
    fc1_pre = ops.dense_affine(vec, weights["fc1.w"], weights["fc1.b"])
    fc1_out = ops.relu(fc1_pre)
    if mode == "train" and config.dropout_rate > 0.0:
        if rng is None:
            raise ParameterError("train-mode forward requires an rng for dropout")
        keep = ops.dropout_keep_mask(fc1_out.shape, config.dropout_rate, rng)
        head_in = ops.apply_dropout(fc1_out, keep, config.dropout_rate)
    else:
        keep = None
        head_in = fc1_out
    emb = ops.dense_affine(head_in, weights["fc2.w"], weights["fc2.b"])

    if cache is not None:
        cache.concat_vec = vec
        cache.fc1_pre = fc1_pre
        cache.fc1_out = fc1_out
        cache.dropout_keep = keep
        cache.head_in = head_in
    return emb


def backward_embed(
    weights: dict[str, np.ndarray],
    config: ModelConfig,
    cache: ForwardCache,
    grad_embedding: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for one forward pass.

    ``grads`` may carry sums from other passes (the q/p/n paths of a
    triplet share one weight set, so their contributions add).
    """
    if grads is None:
        grads = {}

    def add(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    g_head, g_w2, g_b2 = ops.dense_affine_backward(grad_embedding, cache.head_in, weights["fc2.w"])
    add("fc2.w", g_w2)
    add("fc2.b", g_b2)
    if cache.dropout_keep is not None:
        g_head = ops.apply_dropout(g_head, cache.dropout_keep, config.dropout_rate)
    g_fc1 = ops.relu_backward(g_head, cache.fc1_pre)
    g_vec, g_w1, g_b1 = ops.dense_affine_backward(g_fc1, cache.concat_vec, weights["fc1.w"])
    add("fc1.w", g_w1)
    add("fc1.b", g_b1)

    tap_sizes = [config.block_channels[POOL_NAMES.index(t)] for t in config.skip_taps]
    tap_grads = dict(zip(config.skip_taps, ops.split_channels(g_vec, tap_sizes)))

    plan = conv_layer_plan(config)
    per_block = [plan[sum(config.convs_per_block[:b]) : sum(config.convs_per_block[: b + 1])] for b in range(5)]

    g_after = None  # gradient flowing into the next block's first conv input
    for b in reversed(range(5)):
        pool_name = POOL_NAMES[b]
        pool_out = cache.pool_outputs[pool_name]
        g_pool_out = np.zeros_like(pool_out) if g_after is None else g_after
        if pool_name in tap_grads:
            g_pool_out = g_pool_out + ops.global_avg_pool_backward(
                tap_grads[pool_name], pool_out.shape
            )
        g = ops.maxpool2d_backward(g_pool_out, cache.pool_inputs[pool_name])
        for name, c_in, c_out in reversed(per_block[b]):
            g = ops.relu_backward(g, cache.conv_pre[name])
            g, g_w, g_b = ops.conv2d_backward(
                g, cache.conv_inputs[name], weights[f"{name}.w"], _conv_spec(c_in, c_out)
            )
            add(f"{name}.w", g_w)
            add(f"{name}.b", g_b)
        g_after = g
    return grads


def write_weights_block(fh, weights: dict[str, np.ndarray], version: int) -> None:
    dtype = "<f4" if version == WEIGHTS_VERSION_F32 else "<f8"
    write_u32(fh, len(weights))
    for name, arr in weights.items():
        write_str(fh, name)
        write_u8(fh, arr.ndim)
        for d in arr.shape:
            write_u32(fh, d)
        write_floats(fh, arr, dtype)


def read_weights_block(fh, version: int) -> dict[str, np.ndarray]:
    dtype = "<f4" if version == WEIGHTS_VERSION_F32 else "<f8"
    count = read_u32(fh, "layer count")
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = read_str(fh, "layer name")
        rank = read_u8(fh, "rank")
        shape = tuple(read_u32(fh, f"dim of {name}") for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        weights[name] = read_floats(fh, n, dtype, f"data of {name}").astype(np.float64).reshape(shape)
    return weights


def save_weights(weights: dict[str, np.ndarray], config: ModelConfig, path) -> None:
    """Write the 32-bit weights file (magic MLDW)."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        write_u32(fh, WEIGHTS_VERSION_F32)
        write_u64(fh, config.config_hash())
        write_weights_block(fh, weights, WEIGHTS_VERSION_F32)


def load_weights(path, config: ModelConfig | None = None) -> tuple[dict[str, np.ndarray], int]:
    """Read a weights file, returning (weights, stored config hash).

    If ``config`` is given, its hash must match the stored one.
    """
    with open(path, "rb") as fh:
        expect_magic(fh, WEIGHTS_MAGIC)
        version = read_u32(fh, "version")
        if version not in (WEIGHTS_VERSION_F32, WEIGHTS_VERSION_F64):
            raise FormatError(f"unsupported weights version {version}")
        stored_hash = read_u64(fh, "config hash")
        if config is not None and stored_hash != config.config_hash():
            raise FormatError(
                f"config hash mismatch: file has {stored_hash:#x}, "
                f"supplied config hashes to {config.config_hash():#x}"
            )
        weights = read_weights_block(fh, version)
    return weights, stored_hash


def iter_ablation_rows() -> Iterator[tuple[str, tuple[str, ...]]]:
    """The five canonical tap configurations, shallowest study row first.

    The deepest pool always feeds the head, so the rows grow from
    (block5_pool,) alone up to all five pool outputs. Row labels follow
    the customary skip names: b4, b3, b2 attach those pools, and the
    fifth skip (labelled b5) attaches the remaining block1 output.
    """
    yield "none", (POOL_NAMES[4],)
    yield "b4", (POOL_NAMES[3], POOL_NAMES[4])
    yield "b3,b4", (POOL_NAMES[2], POOL_NAMES[3], POOL_NAMES[4])
    yield "b2,b3,b4", (POOL_NAMES[1], POOL_NAMES[2], POOL_NAMES[3], POOL_NAMES[4])
    yield "b2,b3,b4,b5", POOL_NAMES


def parse_tap_labels(text: str) -> tuple[str, ...]:
    """Translate a tap label list ('none', 'b4', 'b2,b3,b4,b5', ...) to pool names.

    Labels follow the ablation row names (see ``iter_ablation_rows``):
    the deepest pool is always included, tokens b1..b5 or
    block{k}_pool add that block's pool, and the full-network label
    'b2,b3,b4,b5' denotes all five taps.
    """
    cleaned = text.strip().lower()
    if cleaned in ("", "none", "noskip", "no-skip"):
        return (POOL_NAMES[4],)
    tokens = [t.strip() for t in cleaned.split(",") if t.strip()]
    indices = set()
    for tok in tokens:
        name = tok if tok.startswith("block") else f"block{tok.lstrip('b')}_pool"
        if name not in POOL_NAMES:
            raise ParameterError(f"unknown tap label {tok!r}")
        indices.add(POOL_NAMES.index(name))
    if indices == {1, 2, 3, 4}:  # the customary name of the full five-tap network
        return POOL_NAMES
    indices.add(4)
    return tuple(POOL_NAMES[i] for i in sorted(indices))
