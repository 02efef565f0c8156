"""Minibatch triplet training with momentum SGD or RMSProp.

The three images of a triplet run through one shared weight set; their
gradients accumulate before a single optimizer step per batch. Every
random draw (epoch shuffle, per-item augmentation, dropout masks) comes
from a generator keyed by (seed, epoch) or (seed, epoch, item index),
so a run resumed from a checkpoint replays the remaining epochs bit for
bit. Metrics logs are JSON lines; pass a fixed ``clock`` to make their
wall_ms field reproducible too.

Checkpoints (magic MLDC) embed weights and optimizer slots as 64-bit
floats because the 32-bit weights file would not round-trip exactly.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import binio
from .binio import FormatError
from .dataset import TripletRecord
from .images import AugmentSpec, augment, read_image, resize_normalize
from .losses import LossConfig, euclidean_distance, triplet_loss
from .model import (
    WEIGHTS_VERSION_F64,
    Embedding,
    ForwardCache,
    ModelConfig,
    backward_embed,
    forward_embed,
    frozen_param_names,
    read_weights_block,
    write_weights_block,
)
from .ops import DimensionError, ParameterError

CHECKPOINT_MAGIC = b"MLDC"
CHECKPOINT_VERSION = 1
OPTIMIZER_KINDS = ("sgd_momentum", "rmsprop")


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; training must not continue."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch} step {step}; "
            "lower the learning rate or check the input data"
        )
        self.epoch = epoch
        self.step = step
        self.loss = loss


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    lr: float = 0.001
    momentum: float = 0.9
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-7
    slots: dict = field(default_factory=dict)  # velocity or squared-grad average

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0,1), got {self.momentum}")
        if not 0 < self.rms_decay < 1:
            raise ParameterError(f"rms_decay must lie in (0,1), got {self.rms_decay}")
        if self.rms_epsilon <= 0:
            raise ParameterError(f"rms_epsilon must be > 0, got {self.rms_epsilon}")

    @classmethod
    def for_weights(cls, weights: dict, kind: str = "sgd_momentum", **kw) -> "OptimizerState":
        state = cls(kind=kind, **kw)
        state.slots = {name: np.zeros_like(arr) for name, arr in weights.items()}
        return state


def _check_grad(name: str, g: np.ndarray, w: np.ndarray) -> None:
    if g.shape != w.shape:
        raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")


def sgd_momentum_step(
    weights: dict,
    grads: dict,
    state: OptimizerState,
    frozen: frozenset = frozenset(),
) -> None:
    """v <- momentum*v - lr*g ; w <- w + v (in place). Missing grads count as zero."""
    for name, w in weights.items():
        if name in frozen:
            continue
        v = state.slots[name]
        v *= state.momentum
        g = grads.get(name)
        if g is not None:
            _check_grad(name, g, w)
            v -= state.lr * g
        w += v


def rmsprop_step(
    weights: dict,
    grads: dict,
    state: OptimizerState,
    frozen: frozenset = frozenset(),
) -> None:
    """a <- decay*a + (1-decay)*g^2 ; w <- w - lr*g/sqrt(a+eps) (in place)."""
    for name, w in weights.items():
        if name in frozen:
            continue
        a = state.slots[name]
        a *= state.rms_decay
        g = grads.get(name)
        if g is not None:
            _check_grad(name, g, w)
            a += (1.0 - state.rms_decay) * (g * g)
            w -= state.lr * g / np.sqrt(a + state.rms_epsilon)


def optimizer_step(
    weights: dict,
    grads: dict,
    state: OptimizerState,
    frozen: frozenset = frozenset(),
) -> None:
    if state.kind == "sgd_momentum":
        sgd_momentum_step(weights, grads, state, frozen)
    else:
        rmsprop_step(weights, grads, state, frozen)


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 10
    batch_size: int = 96
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    augment: AugmentSpec | None = field(default_factory=AugmentSpec)
    checkpoint_dir: str | None = None
    log_path: str | None = None
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 2, epoch)))


def _item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 3, epoch, index)))


def _prepare_triplet(
    record: TripletRecord,
    size: int,
    spec: AugmentSpec | None,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Decode, optionally augment, then resize the three images of a triplet."""
    out = []
    for path in (record.q_path, record.p_path, record.n_path):
        img = read_image(path)
        if spec is not None:
            img = augment(img, spec, rng)
        out.append(resize_normalize(img, size))
    return out


def train_epoch(
    weights: dict,
    config: ModelConfig,
    records: list[TripletRecord],
    run_cfg: TrainRunConfig,
    opt_state: OptimizerState,
    epoch: int,
    log_fh=None,
    clock=None,
) -> dict:
    """One pass over ``records``; mutates weights and optimizer state.

    Returns {"epoch", "loss", "triplet_accuracy"} where loss averages
    over all items and accuracy counts strict D(q,p) < D(q,n) wins.
    """
    if not records:
        raise ParameterError("cannot train on an empty record list")
    if clock is None:
        clock = time.perf_counter
    frozen = frozen_param_names(config)
    order = _epoch_rng(run_cfg.seed, epoch).permutation(len(records))
    all_losses: list[float] = []
    wins = 0

    for step, start in enumerate(range(0, len(records), run_cfg.batch_size)):
        t0 = clock()
        batch = order[start : start + run_cfg.batch_size]
        scale = 1.0 / len(batch)
        grads: dict[str, np.ndarray] = {}
        batch_losses: list[float] = []
        batch_wins = 0
        for index in batch:
            rec = records[int(index)]
            rng = _item_rng(run_cfg.seed, epoch, int(index))
            q_img, p_img, n_img = _prepare_triplet(rec, config.input_size, run_cfg.augment, rng)
            caches = [ForwardCache() for _ in range(3)]
            eq = forward_embed(weights, config, q_img, mode="train", rng=rng, cache=caches[0])
            ep = forward_embed(weights, config, p_img, mode="train", rng=rng, cache=caches[1])
            en = forward_embed(weights, config, n_img, mode="train", rng=rng, cache=caches[2])
            loss, gq, gp, gn = triplet_loss(eq, ep, en, run_cfg.loss)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, step, loss)
            batch_losses.append(loss)
            if euclidean_distance(eq, ep) < euclidean_distance(eq, en):
                batch_wins += 1
            backward_embed(weights, config, caches[0], gq * scale, grads)
            backward_embed(weights, config, caches[1], gp * scale, grads)
            backward_embed(weights, config, caches[2], gn * scale, grads)
        optimizer_step(weights, grads, opt_state, frozen)
        all_losses.extend(batch_losses)
        wins += batch_wins
        if log_fh is not None:
            row = {
                "epoch": epoch,
                "step": step,
                "loss": float(np.mean(batch_losses)),
                "triplet_accuracy": batch_wins / len(batch),
                "wall_ms": (clock() - t0) * 1000.0,
            }
            log_fh.write(json.dumps(row) + "\n")

    return {
        "epoch": epoch,
        "loss": float(np.mean(all_losses)),
        "triplet_accuracy": wins / len(records),
    }


def evaluate(
    weights: dict,
    config: ModelConfig,
    records: list[TripletRecord],
    loss_cfg: LossConfig | None = None,
) -> dict:
    """Inference-mode loss and triplet accuracy over a record list."""
    if not records:
        raise ParameterError("cannot evaluate an empty record list")
    if loss_cfg is None:
        loss_cfg = LossConfig()
    losses = []
    wins = 0
    for rec in records:
        q_img, p_img, n_img = _prepare_triplet(rec, config.input_size, None, None)
        eq = forward_embed(weights, config, q_img)
        ep = forward_embed(weights, config, p_img)
        en = forward_embed(weights, config, n_img)
        loss, *_ = triplet_loss(eq, ep, en, loss_cfg)
        losses.append(loss)
        if euclidean_distance(eq, ep) < euclidean_distance(eq, en):
            wins += 1
    return {"loss": float(np.mean(losses)), "triplet_accuracy": wins / len(records)}


def embed_images(weights: dict, config: ModelConfig, paths: list) -> list[Embedding]:
    """Inference embeddings for a list of image paths; ids are the paths."""
    out = []
    for path in paths:
        img = resize_normalize(read_image(path), config.input_size)
        out.append(Embedding(item_id=str(path), vector=forward_embed(weights, config, img)))
    return out


_KIND_CODES = {kind: i for i, kind in enumerate(OPTIMIZER_KINDS)}


def save_checkpoint(
    path,
    weights: dict,
    opt_state: OptimizerState,
    config: ModelConfig,
    next_epoch: int,
    seed: int,
) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        binio.write_u32(fh, CHECKPOINT_VERSION)
        binio.write_u64(fh, config.config_hash())
        binio.write_u32(fh, next_epoch)
        binio.write_u64(fh, seed)
        binio.write_u8(fh, _KIND_CODES[opt_state.kind])
        binio.write_f64(fh, opt_state.lr)
        binio.write_f64(fh, opt_state.momentum)
        binio.write_f64(fh, opt_state.rms_decay)
        binio.write_f64(fh, opt_state.rms_epsilon)
        write_weights_block(fh, weights, WEIGHTS_VERSION_F64)
        write_weights_block(fh, opt_state.slots, WEIGHTS_VERSION_F64)


def load_checkpoint(path, config: ModelConfig) -> tuple[dict, OptimizerState, int, int]:
    """Returns (weights, optimizer state, next epoch, seed); exact restore."""
    with open(path, "rb") as fh:
        binio.expect_magic(fh, CHECKPOINT_MAGIC)
        version = binio.read_u32(fh, "version")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        stored_hash = binio.read_u64(fh, "config hash")
        if stored_hash != config.config_hash():
            raise FormatError(
                f"config hash mismatch: checkpoint has {stored_hash:#x}, "
                f"supplied config hashes to {config.config_hash():#x}"
            )
        next_epoch = binio.read_u32(fh, "next epoch")
        seed = binio.read_u64(fh, "seed")
        kind_code = binio.read_u8(fh, "optimizer kind")
        if kind_code >= len(OPTIMIZER_KINDS):
            raise FormatError(f"bad optimizer kind code {kind_code}")
        lr = binio.read_f64(fh, "lr")
        momentum = binio.read_f64(fh, "momentum")
        rms_decay = binio.read_f64(fh, "rms_decay")
        rms_epsilon = binio.read_f64(fh, "rms_epsilon")
        weights = read_weights_block(fh, WEIGHTS_VERSION_F64)
        slots = read_weights_block(fh, WEIGHTS_VERSION_F64)
    state = OptimizerState(
        kind=OPTIMIZER_KINDS[kind_code],
        lr=lr,
        momentum=momentum,
        rms_decay=rms_decay,
        rms_epsilon=rms_epsilon,
        slots=slots,
    )
    return weights, state, next_epoch, seed


def _checkpoint_path(directory: str, epoch: int) -> str:
    return os.path.join(directory, f"epoch_{epoch:04d}.mldc")


def train_run(
    weights: dict,
    config: ModelConfig,
    records: list[TripletRecord],
    run_cfg: TrainRunConfig,
    opt_state: OptimizerState | None = None,
    start_epoch: int = 0,
    clock=None,
) -> tuple[OptimizerState, list[dict]]:
    """Train epochs [start_epoch, run_cfg.epochs); returns (opt state, history).

    Writes one checkpoint per finished epoch when ``checkpoint_dir`` is
    set and appends one JSON line per step to ``log_path``.
    """
    if opt_state is None:
        opt_state = OptimizerState.for_weights(weights)
    if run_cfg.checkpoint_dir:
        os.makedirs(run_cfg.checkpoint_dir, exist_ok=True)
    log_fh = open(run_cfg.log_path, "a", encoding="utf-8") if run_cfg.log_path else None
    history: list[dict] = []
    try:
        with threadpool_limits(limits=run_cfg.threads):
            for epoch in range(start_epoch, run_cfg.epochs):
                metrics = train_epoch(
                    weights, config, records, run_cfg, opt_state, epoch, log_fh, clock
                )
                history.append(metrics)
                if log_fh is not None:
                    log_fh.flush()
                if run_cfg.checkpoint_dir:
                    save_checkpoint(
                        _checkpoint_path(run_cfg.checkpoint_dir, epoch),
                        weights,
                        opt_state,
                        config,
                        epoch + 1,
                        run_cfg.seed,
                    )
    finally:
        if log_fh is not None:
            log_fh.close()
    return opt_state, history
