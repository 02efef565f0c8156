"""Triplet ranking losses, distances, and the triplet-accuracy metric.

A triplet is (query q, positive p, negative n). Both losses operate on
the three embedding vectors and return the loss together with analytic
gradients with respect to q, p, and n, so the trainer can feed them
straight into the shared backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import DimensionError, ParameterError

LOSS_KINDS = ("hinge", "contrastive")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "hinge"  # "hinge" | "contrastive"
    margin: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ParameterError(f"loss kind must be 'hinge' or 'contrastive', got {self.kind!r}")
        if self.margin <= 0:
            raise ParameterError(f"margin must be > 0, got {self.margin}")


def euclidean_distance(x: np.ndarray, y: np.ndarray) -> float:
    """sqrt(sum((x_i - y_i)^2))."""
    if x.shape != y.shape:
        raise DimensionError(f"distance operands differ in shape: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.sum((x - y) ** 2)))


def hinge_triplet_loss(
    q: np.ndarray, p: np.ndarray, n: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """max(0, D(q,p)^2 - D(q,n)^2 + m) and its gradients.

    Zero loss (the margin is satisfied) yields zero gradients.
    """
    dp = q - p
    dn = q - n
    loss = float(np.dot(dp, dp) - np.dot(dn, dn) + cfg.margin)
    if loss <= 0.0:
        z = np.zeros_like(q)
        return 0.0, z, z.copy(), z.copy()
    return loss, 2.0 * (n - p), -2.0 * dp, 2.0 * dn


def contrastive_triplet_loss(
    q: np.ndarray, p: np.ndarray, n: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Pairwise contrastive loss summed over the triplet's two pairs.

    The similar pair contributes D(q,p)^2 / 2; the dissimilar pair
    contributes max(0, m - D(q,n))^2 / 2, which vanishes once the
    negative is at least the margin away. The gradient of the negative
    term at D(q,n) == 0 is taken to be zero (subgradient choice).
    """
    dp = q - p
    loss = 0.5 * float(np.dot(dp, dp))
    grad_q = dp.copy()
    grad_p = -dp
    grad_n = np.zeros_like(n)

    dn = q - n
    dist_n = float(np.sqrt(np.dot(dn, dn)))
    gap = cfg.margin - dist_n
    if gap > 0.0:
        loss += 0.5 * gap * gap
        if dist_n > 0.0:
            scale = gap / dist_n
            grad_q -= scale * dn
            grad_n = scale * dn
    return loss, grad_q, grad_p, grad_n


def triplet_loss(
    q: np.ndarray, p: np.ndarray, n: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Dispatch on cfg.kind."""
    if cfg.kind == "hinge":
        return hinge_triplet_loss(q, p, n, cfg)
    return contrastive_triplet_loss(q, p, n, cfg)


def triplet_accuracy(triplets: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> float:
    """Fraction of triplets with D(q,p) strictly less than D(q,n).

    Ties count as failures, so a collapsed embedding (everything equal)
    scores 0 rather than looking perfect.
    """
    if not triplets:
        raise ParameterError("triplet_accuracy needs a non-empty batch")
    wins = 0
    for q, p, n in triplets:
        if euclidean_distance(q, p) < euclidean_distance(q, n):
            wins += 1
    return wins / len(triplets)
