"""Triplet manifests and stratified triplet sampling.

A manifest is JSON lines, one triplet per line, with fields ``q``, ``p``,
``n`` (image paths), ``category_key``, ``q_source`` ("catalog" or "wild"),
``in_class`` (bool), and an optional ``split`` tag ("train"/"val"). A
query image may not appear in both splits of one manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ops import ParameterError

Q_SOURCES = ("catalog", "wild")
SPLITS = ("train", "val")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


@dataclass(frozen=True)
class TripletRecord:
    q_path: str
    p_path: str
    n_path: str
    category_key: str
    q_source: str = "catalog"
    in_class: bool = False
    split: str | None = None

    def __post_init__(self):
        paths = (self.q_path, self.p_path, self.n_path)
        if len(set(paths)) != 3:
            raise ParameterError(f"triplet paths must be distinct, got {paths}")
        if not self.category_key:
            raise ParameterError("category_key must be non-empty")
        if self.q_source not in Q_SOURCES:
            raise ParameterError(f"q_source must be one of {Q_SOURCES}, got {self.q_source!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ParameterError(f"split must be one of {SPLITS}, got {self.split!r}")


def save_manifest(records: list[TripletRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {
                "q": rec.q_path,
                "p": rec.p_path,
                "n": rec.n_path,
                "category_key": rec.category_key,
                "q_source": rec.q_source,
                "in_class": rec.in_class,
            }
            if rec.split is not None:
                row["split"] = rec.split
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> list[TripletRecord]:
    records: list[TripletRecord] = []
    split_queries: dict[str, set[str]] = {s: set() for s in SPLITS}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            if not isinstance(row, dict):
                raise ManifestError(f"{path}:{lineno}: expected an object")
            try:
                rec = TripletRecord(
                    q_path=row["q"],
                    p_path=row["p"],
                    n_path=row["n"],
                    category_key=row["category_key"],
                    q_source=row.get("q_source", "catalog"),
                    in_class=bool(row.get("in_class", False)),
                    split=row.get("split"),
                )
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except (ParameterError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if rec.split is not None:
                split_queries[rec.split].add(rec.q_path)
            records.append(rec)
    overlap = split_queries["train"] & split_queries["val"]
    if overlap:
        sample = sorted(overlap)[0]
        raise ManifestError(f"{path}: query {sample!r} appears in both train and val splits")
    return records


def split_records(records: list[TripletRecord], split: str) -> list[TripletRecord]:
    """Records tagged with ``split``; untagged records belong to train."""
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}, got {split!r}")
    if split == "train":
        return [r for r in records if r.split in (None, "train")]
    return [r for r in records if r.split == "val"]


def largest_remainder_counts(total: int, ratios: list[float]) -> list[int]:
    """Integer stratum sizes that sum to ``total``.

    Floors of total*ratio first, then the leftover goes to the largest
    fractional remainders; remainder ties break toward the earlier stratum.
    """
    if total < 0:
        raise ParameterError(f"total must be >= 0, got {total}")
    if not ratios:
        raise ParameterError("ratios must be non-empty")
    if any(r < 0 for r in ratios):
        raise ParameterError("ratios must be >= 0")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must sum to 1, got {sum(ratios)}")
    exact = [total * r for r in ratios]
    counts = [int(e) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    leftover = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def sample_triplets(
    pool: list[TripletRecord],
    n: int,
    ratios: dict,
    rng: np.random.Generator,
    field: str = "in_class",
) -> list[TripletRecord]:
    """Sample ``n`` records stratified by ``field`` at the given ratios.

    ``ratios`` maps field values to fractions summing to 1. Stratum sizes
    come from largest-remainder rounding, so they are exact for any n.
    Sampling within a stratum is without replacement.
    """
    keys = list(ratios.keys())
    counts = largest_remainder_counts(n, [ratios[k] for k in keys])
    out: list[TripletRecord] = []
    for key, count in zip(keys, counts):
        stratum = [r for r in pool if getattr(r, field) == key]
        if count > len(stratum):
            raise ParameterError(
                f"stratum {field}={key!r} needs {count} records but only {len(stratum)} available"
            )
        if count == 0:
            continue
        idx = rng.choice(len(stratum), size=count, replace=False)
        out.extend(stratum[i] for i in idx)
    return out
