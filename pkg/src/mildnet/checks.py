"""Finite-difference verification of the analytic gradients.

Every kernel exposes a closure mapping one input tensor to (scalar
objective, analytic gradient); ``ops.finite_diff_gradcheck`` probes it
with central differences. The network-level check drives a whole tiny
network through the hinge triplet objective and probes a random sample
of coordinates in every parameter tensor, which keeps it fast without
losing coverage.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .losses import LossConfig, triplet_loss
from .model import ModelConfig, ForwardCache, backward_embed, build_network, forward_embed


def op_gradchecks(seed: int, epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative FD error for each tensor op; keys name the op and input."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    spec = ops.ConvSpec(3, 3, 2, 4)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    up = rng.standard_normal((4, 6, 6))  # fixed cotangent for conv outputs

    def conv_obj(xx, ww, bb):
        y = ops.conv2d(xx, ww, bb, spec)
        gx, gw, gb = ops.conv2d_backward(up, xx, ww, spec)
        return float((y * up).sum()), gx, gw, gb

    out["conv2d/x"] = ops.finite_diff_gradcheck(
        lambda t: (conv_obj(t, w, b)[0], conv_obj(t, w, b)[1]), x, epsilon
    )
    out["conv2d/w"] = ops.finite_diff_gradcheck(
        lambda t: (conv_obj(x, t, b)[0], conv_obj(x, t, b)[2]), w, epsilon
    )
    out["conv2d/b"] = ops.finite_diff_gradcheck(
        lambda t: (conv_obj(x, w, t)[0], conv_obj(x, w, t)[3]), b, epsilon
    )

    # keep relu inputs away from the kink at zero
    xr = rng.standard_normal((3, 4, 4))
    xr = np.where(np.abs(xr) < 0.1, xr + 0.2, xr)
    upr = rng.standard_normal(xr.shape)
    out["relu"] = ops.finite_diff_gradcheck(
        lambda t: (float((ops.relu(t) * upr).sum()), ops.relu_backward(upr, t)), xr, epsilon
    )

    # well-separated values so the argmax is stable under the FD step
    xp = rng.permutation(np.arange(2 * 4 * 4, dtype=np.float64)).reshape(2, 4, 4)
    upp = rng.standard_normal((2, 2, 2))
    out["maxpool2d"] = ops.finite_diff_gradcheck(
        lambda t: (float((ops.maxpool2d(t) * upp).sum()), ops.maxpool2d_backward(upp, t)),
        xp,
        epsilon,
    )

    xg = rng.standard_normal((3, 4, 4))
    upg = rng.standard_normal(3)
    out["global_avg_pool"] = ops.finite_diff_gradcheck(
        lambda t: (
            float(ops.global_avg_pool(t) @ upg),
            ops.global_avg_pool_backward(upg, t.shape),
        ),
        xg,
        epsilon,
    )

    xd = rng.standard_normal(5)
    wd = rng.standard_normal((3, 5))
    bd = rng.standard_normal(3)
    upd = rng.standard_normal(3)

    def dense_obj(xx, ww, bb):
        y = ops.dense_affine(xx, ww, bb)
        gx, gw, gb = ops.dense_affine_backward(upd, xx, ww)
        return float(y @ upd), gx, gw, gb

    out["dense_affine/x"] = ops.finite_diff_gradcheck(
        lambda t: (dense_obj(t, wd, bd)[0], dense_obj(t, wd, bd)[1]), xd, epsilon
    )
    out["dense_affine/w"] = ops.finite_diff_gradcheck(
        lambda t: (dense_obj(xd, t, bd)[0], dense_obj(xd, t, bd)[2]), wd, epsilon
    )
    out["dense_affine/b"] = ops.finite_diff_gradcheck(
        lambda t: (dense_obj(xd, wd, t)[0], dense_obj(xd, wd, t)[3]), bd, epsilon
    )

    keep = rng.random(6) >= 0.5
    xdo = rng.standard_normal(6)
    updo = rng.standard_normal(6)
    out["dropout"] = ops.finite_diff_gradcheck(
        lambda t: (
            float(ops.apply_dropout(t, keep, 0.5) @ updo),
            ops.apply_dropout(updo, keep, 0.5),
        ),
        xdo,
        epsilon,
    )
    return out


def loss_gradchecks(seed: int, epsilon: float = 1e-5) -> dict[str, float]:
    """FD errors for both losses, probing q, p, and n away from kinks.

    The margin is chosen per draw so the loss sits 2.0 inside its active
    branch: active enough that no FD step crosses a kink, small enough
    that the loss stays O(1) and central differences keep full precision.
    """
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    for kind in ("hinge", "contrastive"):
        q = rng.standard_normal(6)
        p = q + 0.3 * rng.standard_normal(6)
        n = q + 0.7 * rng.standard_normal(6)
        dist_p_sq = float(np.sum((q - p) ** 2))
        dist_n = float(np.sqrt(np.sum((q - n) ** 2)))
        if kind == "hinge":
            margin = max(dist_n * dist_n - dist_p_sq, 0.0) + 2.0
        else:
            margin = dist_n + 2.0
        cfg = LossConfig(kind=kind, margin=margin)

        for slot, base in (("q", q), ("p", p), ("n", n)):
            def obj(t, slot=slot):
                args = {"q": q, "p": p, "n": n}
                args[slot] = t
                loss, gq, gp, gn = triplet_loss(args["q"], args["p"], args["n"], cfg)
                return loss, {"q": gq, "p": gp, "n": gn}[slot]

            out[f"{kind}/{slot}"] = ops.finite_diff_gradcheck(obj, base, epsilon)
    return out


def _activation_signature(caches: list[ForwardCache]) -> list[np.ndarray]:
    """Relu sign masks and pool argmax choices; equal signatures at the
    two probe points mean the net was piecewise-linear-smooth between them."""
    sig: list[np.ndarray] = []
    for cache in caches:
        for name in sorted(cache.conv_pre):
            sig.append(cache.conv_pre[name] > 0)
        for name in sorted(cache.pool_inputs):
            x = cache.pool_inputs[name]
            c, h, w = x.shape
            tiles = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
                c, h // 2, w // 2, 4
            )
            sig.append(tiles.argmax(axis=-1))
        sig.append(cache.fc1_pre > 0)
    return sig


def _signatures_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def network_gradcheck(
    config: ModelConfig,
    seed: int,
    samples_per_tensor: int = 1,
    epsilon: float = 1e-3,
) -> float:
    """Max relative FD error over sampled weight coordinates of the whole net.

    The objective is the active branch of the hinge triplet loss without
    its margin constant, D(q,p)^2 - D(q,n)^2, over three random images in
    inference mode: the same gradients, but no large additive constant to
    wash out the finite-difference digits. It exercises every conv, pool,
    tap, and dense layer jointly. A probe whose +/-epsilon evaluations
    flip a relu sign or pool argmax sits on a non-smooth locus where
    central differences are meaningless; such coordinates are redrawn.
    Within a fixed activation pattern the objective is exactly quadratic
    per coordinate, so central differences carry no truncation error and
    a fairly large epsilon just reduces rounding noise.
    """
    rng = np.random.default_rng(seed)
    weights = build_network(config, init_seed=seed)
    s = config.input_size
    imgs = [rng.random((3, s, s)) for _ in range(3)]

    def objective(ws):
        caches = [ForwardCache() for _ in range(3)]
        q, p, n = [forward_embed(ws, config, img, cache=c) for img, c in zip(imgs, caches)]
        dp = q - p
        dn = q - n
        value = float(dp @ dp - dn @ dn)
        return value, caches, (2.0 * (n - p), -2.0 * dp, 2.0 * dn)

    loss0, caches, emb_grads = objective(weights)
    grads: dict[str, np.ndarray] = {}
    for cache, g in zip(caches, emb_grads):
        backward_embed(weights, config, cache, g, grads)

    worst = 0.0
    for name in sorted(weights):
        arr = weights[name]
        accepted = 0
        attempts = 0
        while accepted < min(samples_per_tensor, arr.size) and attempts < 16 * samples_per_tensor:
            attempts += 1
            idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
            orig = arr[idx]
            arr[idx] = orig + epsilon
            lp, caches_p, _ = objective(weights)
            arr[idx] = orig - epsilon
            lm, caches_m, _ = objective(weights)
            arr[idx] = orig
            if not _signatures_equal(
                _activation_signature(caches_p), _activation_signature(caches_m)
            ):
                continue
            numeric = (lp - lm) / (2.0 * epsilon)
            analytic = float(grads[name][idx])
            if max(abs(analytic), abs(numeric)) < 1e-10:
                # both sides agree the gradient is zero; the ratio would
                # only measure rounding noise against the 1e-8 floor
                accepted += 1
                continue
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
            accepted += 1
    return worst
