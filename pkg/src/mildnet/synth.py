"""Synthetic colored-shapes triplet corpus for smoke tests and demos.

Each class is a (hue slot, shape family) pair: class c gets hue c/n and
family c mod 3 (square, circle, stripes). Images are a light gray
background with one colored shape; "wild" queries add gray speckle
noise so they look less studio-like than catalog images. The class of
an image is recoverable from its filename, and class hues are far
enough apart that a nearest-centroid classifier on mean RGB separates
them.
"""

from __future__ import annotations

import colorsys
import os
import re
import warnings

import numpy as np

from .dataset import TripletRecord, largest_remainder_counts, save_manifest
from .images import write_image
from .ops import ParameterError

FAMILIES = ("square", "circle", "stripes")

_CLASS_RE = re.compile(r"_c(\d+)\.p[pg]m$")


def family_name(cls: int) -> str:
    return FAMILIES[cls % 3]


def class_label_from_path(path) -> int:
    m = _CLASS_RE.search(str(path))
    if m is None:
        raise ParameterError(f"no class label in path {path!r}")
    return int(m.group(1))


def render_example(
    cls: int,
    n_classes: int,
    size: int,
    rng: np.random.Generator,
    wild: bool = False,
) -> np.ndarray:
    """Render one (3,size,size) image of class ``cls`` with values in [0,255]."""
    hue = (cls / n_classes + rng.uniform(-0.02, 0.02)) % 1.0
    sat = rng.uniform(0.75, 0.95)
    val = rng.uniform(0.80, 0.95)
    color = np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255.0

    img = np.full((3, size, size), rng.uniform(215.0, 235.0))
    if wild:
        img = img + rng.uniform(-40.0, 40.0, size=(size, size))

    cy = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0)
    cx = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0)
    radius = size * rng.uniform(0.22, 0.34)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    family = cls % 3
    if family == 0:
        mask = (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
    elif family == 1:
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2
    else:
        box = (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
        band = max(2, size // 8)
        mask = box & ((np.floor((ys - cy + radius) / band).astype(int) % 2) == 0)

    img = np.where(mask[None, :, :], color[:, None, None], img)
    return np.clip(img, 0.0, 255.0)


def _shuffled_flags(n: int, count_true: int, rng: np.random.Generator) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    flags[:count_true] = True
    return rng.permutation(flags)


def synth_generate(
    out_dir,
    n_triplets: int,
    n_classes: int,
    image_size: int,
    rng: np.random.Generator,
    in_class_fraction: float = 0.3,
    wild_fraction: float = 0.3,
    prefix: str = "t",
) -> list[TripletRecord]:
    """Write ``n_triplets`` rendered triplets plus manifest.jsonl into ``out_dir``.

    Wild/catalog and in/out-of-class mixes are exact (largest-remainder
    rounding). In-class negatives share the query's shape family but use a
    different hue class; if no family has two classes the in-class quota
    degrades to out-of-class with a warning.
    """
    if n_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {n_classes}")
    if not 0.0 <= in_class_fraction <= 1.0 or not 0.0 <= wild_fraction <= 1.0:
        raise ParameterError("fractions must lie in [0,1]")
    os.makedirs(out_dir, exist_ok=True)

    by_family: dict[int, list[int]] = {}
    for c in range(n_classes):
        by_family.setdefault(c % 3, []).append(c)
    in_eligible = sorted(c for fam in by_family.values() if len(fam) > 1 for c in fam)
    out_eligible = {
        c: [o for o in range(n_classes) if o % 3 != c % 3] for c in range(n_classes)
    }
    if not in_eligible and not any(out_eligible.values()):
        raise ParameterError("no valid negative pairings for this class count")

    n_in, _ = largest_remainder_counts(n_triplets, [in_class_fraction, 1.0 - in_class_fraction])
    if n_in and not in_eligible:
        warnings.warn(
            "no shape family has two classes; in-class triplets degrade to out-of-class",
            stacklevel=2,
        )
        n_in = 0
    n_wild, _ = largest_remainder_counts(n_triplets, [wild_fraction, 1.0 - wild_fraction])
    in_flags = _shuffled_flags(n_triplets, n_in, rng)
    wild_flags = _shuffled_flags(n_triplets, n_wild, rng)

    records: list[TripletRecord] = []
    for i in range(n_triplets):
        if in_flags[i]:
            q_cls = in_eligible[i % len(in_eligible)]
            fam = [c for c in by_family[q_cls % 3] if c != q_cls]
            n_cls = int(fam[rng.integers(len(fam))])
        else:
            q_cls = i % n_classes
            others = out_eligible[q_cls]
            if not others:
                others = [c for c in range(n_classes) if c != q_cls]
            n_cls = int(others[rng.integers(len(others))])

        paths = []
        for role, cls in (("q", q_cls), ("p", q_cls), ("n", n_cls)):
            wild = bool(wild_flags[i]) and role == "q"
            img = render_example(cls, n_classes, image_size, rng, wild=wild)
            name = f"{prefix}{i:05d}_{role}_c{cls:02d}.ppm"
            path = os.path.join(out_dir, name)
            write_image(path, img)
            paths.append(path)

        records.append(
            TripletRecord(
                q_path=paths[0],
                p_path=paths[1],
                n_path=paths[2],
                category_key=family_name(q_cls),
                q_source="wild" if wild_flags[i] else "catalog",
                in_class=bool(in_flags[i]),
            )
        )

    save_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records
