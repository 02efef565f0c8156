"""Batch catalog retrieval: partitions, neighbor tables, incremental runs.

The catalog is partitioned by (gender, category_key); similarity only
ever relates items inside one partition. Each run produces, per item,
the top-N nearest neighbors by fused feature distance.

A run is incremental against the previous run's state. Per partition a
content hash (sha256 over sorted "id<TAB>image-sha256" lines) decides
whether anything changed; unchanged partitions carry their stored rows
verbatim and touch no image. Inside a changed partition, an item is a
"keep" if this exact (partition, id, image digest) was extracted in an
earlier run and it has a stored row; everything else (new items,
changed images, items moved between partitions) is fresh. A keep row is
patched by merging its stored neighbors with distances to the fresh
items only; the merge is exact because the stored entries are the true
nearest among surviving keeps. If a stored neighbor is itself no longer
a keep (deleted, changed, or departed), the row is recomputed in full.
All distances are computed row-wise on the float32 values held in the
feature cache, so incremental and from-scratch runs emit byte-identical
result and state files.

Results and state files are only reusable across runs with the same
pipeline configuration.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .ann import IndexConfig, build_index, collect_candidates
from .dataset import TripletRecord, largest_remainder_counts
from .features import (
    EmbeddingStore,
    FusionWeights,
    extract_fused,
    fused_distances_to,
    pack_fused,
)
from .images import decode_image
from .ops import ParameterError

GENDERS = ("men", "women", "girl", "boy")


class CatalogError(ValueError):
    """Raised for malformed catalogs or inconsistent run inputs."""


@dataclass(frozen=True)
class CatalogItem:
    id: str
    image_path: str
    gender: str
    category_key: str

    def __post_init__(self):
        if not self.id:
            raise ParameterError("item id must be non-empty")
        if not self.category_key:
            raise ParameterError("category_key must be non-empty")
        if self.gender not in GENDERS:
            raise ParameterError(f"gender must be one of {GENDERS}, got {self.gender!r}")


def load_catalog(path) -> list[CatalogItem]:
    items: list[CatalogItem] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            try:
                item = CatalogItem(
                    id=row["id"],
                    image_path=row["image_path"],
                    gender=row["gender"],
                    category_key=row["category_key"],
                )
            except KeyError as exc:
                raise CatalogError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except ParameterError as exc:
                raise CatalogError(f"{path}:{lineno}: {exc}") from None
            if item.id in seen:
                raise CatalogError(f"{path}:{lineno}: duplicate item id {item.id!r}")
            seen.add(item.id)
            items.append(item)
    return items


def save_catalog(items: list[CatalogItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(asdict(item), sort_keys=True) + "\n")


def partition_catalog(items: list[CatalogItem]) -> dict[tuple[str, str], list[CatalogItem]]:
    parts: dict[tuple[str, str], list[CatalogItem]] = {}
    for item in items:
        parts.setdefault((item.gender, item.category_key), []).append(item)
    return parts


def partition_key_str(key: tuple[str, str]) -> str:
    return f"{key[0]}|{key[1]}"


@dataclass(frozen=True)
class PipelineConfig:
    weights: FusionWeights = field(default_factory=FusionWeights)
    top_n: int = 10
    n_trees: int = 8
    leaf_capacity: int = 16
    forest_seed: int = 0

    def __post_init__(self):
        if self.top_n < 1:
            raise ParameterError(f"top_n must be >= 1, got {self.top_n}")


@dataclass
class RunStats:
    partitions_total: int = 0
    partitions_changed: int = 0
    features_extracted: int = 0
    rows_full: int = 0
    rows_merged: int = 0
    rows_carried: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _feature_key(item: CatalogItem, digest: str) -> str:
    return f"{item.gender}|{item.category_key}|{item.id}@{digest}"


def _partition_hash(pairs: list[tuple[str, str]]) -> str:
    lines = "\n".join(f"{item_id}\t{digest}" for item_id, digest in sorted(pairs))
    return hashlib.sha256(lines.encode()).hexdigest()


def _rank_rows(
    row_indices: list[int],
    mat: np.ndarray,
    ids: list[str],
    forest,
    config: PipelineConfig,
) -> dict[str, list[tuple[str, float]]]:
    """Exact top-N per row: exhaustive forest candidates, fused re-rank."""
    out: dict[str, list[tuple[str, float]]] = {}
    m = len(ids)
    for r in row_indices:
        if m == 1:
            out[ids[r]] = []
            continue
        cand = collect_candidates(forest, mat[r].astype(np.float32), budget=m)
        dists = fused_distances_to(mat[r], mat[cand], config.weights)
        ranked = sorted(
            (float(d), ids[o]) for d, o in zip(dists, cand) if o != r
        )
        out[ids[r]] = [(i, d) for d, i in ranked[: config.top_n]]
    return out


def run_batch(
    catalog: list[CatalogItem],
    cache: EmbeddingStore,
    config: PipelineConfig | None = None,
    prev_hashes: dict | None = None,
    prev_results: dict | None = None,
    extractors: dict | None = None,
) -> tuple[dict, dict, RunStats]:
    """One batch run; returns (results, partition hashes, stats).

    ``results`` maps item id to its neighbor list of (id, distance),
    distance ascending with ties broken by id. Pass the previous run's
    hashes and results to run incrementally; outputs are byte-for-byte
    the same either way.
    """
    if config is None:
        config = PipelineConfig()
    prev_hashes = prev_hashes or {}
    prev_results = prev_results or {}
    seen_ids: set[str] = set()
    for item in catalog:
        if item.id in seen_ids:
            raise CatalogError(f"duplicate item id {item.id!r}")
        seen_ids.add(item.id)

    stats = RunStats()
    results: dict[str, list[tuple[str, float]]] = {}
    hashes: dict[str, str] = {}
    cached_at_start = set(cache.ids())
    parts = partition_catalog(catalog)
    stats.partitions_total = len(parts)

    for key in sorted(parts):
        key_str = partition_key_str(key)
        items = sorted(parts[key], key=lambda it: it.id)
        digests = {}
        raw_bytes = {}
        for item in items:
            with open(item.image_path, "rb") as fh:
                data = fh.read()
            digests[item.id] = hashlib.sha256(data).hexdigest()
            raw_bytes[item.id] = data
        part_hash = _partition_hash([(it.id, digests[it.id]) for it in items])
        hashes[key_str] = part_hash

        if prev_hashes.get(key_str) == part_hash:
            for item in items:
                if item.id not in prev_results:
                    raise CatalogError(
                        f"state says partition {key_str!r} is unchanged but no stored "
                        f"row exists for item {item.id!r}"
                    )
                results[item.id] = list(prev_results[item.id])
                stats.rows_carried += 1
            continue

        stats.partitions_changed += 1
        keys = {it.id: _feature_key(it, digests[it.id]) for it in items}
        keep_ids: set[str] = set()
        for item in items:
            fk = keys[item.id]
            if fk in cached_at_start and item.id in prev_results:
                keep_ids.add(item.id)
            elif fk not in cache:
                vec = pack_fused(extract_fused(decode_image(raw_bytes[item.id]), extractors))
                cache.put(fk, vec)
                stats.features_extracted += 1

        ids = [it.id for it in items]
        mat = np.stack([cache.get(keys[i]) for i in ids]).astype(np.float64)
        forest = None
        if len(ids) > 1:
            forest = build_index(
                list(zip(ids, mat)),
                IndexConfig(n_trees=config.n_trees, leaf_capacity=config.leaf_capacity),
                seed=config.forest_seed,
            )

        fresh_rows: list[int] = []
        id_to_row = {i: r for r, i in enumerate(ids)}
        arrived = {i for i in ids if i not in keep_ids}  # new, changed, or moved in
        fresh_set = set(arrived)
        for r, item_id in enumerate(ids):
            if item_id in fresh_set:
                fresh_rows.append(r)
                continue
            stored = prev_results[item_id]
            if any(nid not in keep_ids for nid, _ in stored):
                # a stored neighbor vanished or went stale; the old row no
                # longer bounds the true top-N, so recompute it outright
                fresh_rows.append(r)
                fresh_set.add(item_id)

        computed = _rank_rows(fresh_rows, mat, ids, forest, config)
        results.update(computed)
        stats.rows_full += len(fresh_rows)

        # merged rows only need distances to arrivals: a keep demoted to a
        # full recompute above kept its old vector, so wherever it appears
        # in a stored row that entry is still correct, and wherever it does
        # not, the stored worst distance still bounds it
        new_rows = [id_to_row[i] for i in sorted(arrived)]
        for item_id in ids:
            if item_id in fresh_set:
                continue
            stored = prev_results[item_id]
            merged = [(d, nid) for nid, d in stored]
            if new_rows:
                dists = fused_distances_to(mat[id_to_row[item_id]], mat[new_rows], config.weights)
                merged.extend((float(d), ids[new_rows[k]]) for k, d in enumerate(dists))
            merged.sort()
            limit = min(config.top_n, len(ids) - 1)
            results[item_id] = [(nid, d) for d, nid in merged[:limit]]
            stats.rows_merged += 1

    return results, hashes, stats


def save_results(results: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(results):
            row = {
                "query_id": qid,
                "neighbors": [{"id": nid, "distance": d} for nid, d in results[qid]],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_results(path) -> dict:
    results: dict[str, list[tuple[str, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                results[row["query_id"]] = [
                    (n["id"], float(n["distance"])) for n in row["neighbors"]
                ]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CatalogError(f"{path}:{lineno}: bad results row: {exc}") from None
    return results


def save_state(hashes: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(hashes, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_state(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    if not isinstance(state, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in state.items()
    ):
        raise CatalogError(f"{path}: state must map partition keys to hashes")
    return state


@dataclass(frozen=True)
class MiningBounds:
    top_p: int = 5
    neg_rank_lo: int = 50
    neg_rank_hi: int = 100

    def __post_init__(self):
        if self.top_p < 1:
            raise ParameterError(f"top_p must be >= 1, got {self.top_p}")
        if not 1 <= self.neg_rank_lo <= self.neg_rank_hi:
            raise ParameterError(
                f"need 1 <= neg_rank_lo <= neg_rank_hi, got [{self.neg_rank_lo}, {self.neg_rank_hi}]"
            )


def mine_triplets(
    results: dict,
    catalog: list[CatalogItem],
    cache: EmbeddingStore,
    rng: np.random.Generator,
    n_triplets: int,
    ratios: dict | None = None,
    bounds: MiningBounds | None = None,
    weights: FusionWeights | None = None,
) -> list[TripletRecord]:
    """Mine training triplets from a finished batch run.

    Positives come from the query's top-P neighbors. In-class negatives
    are drawn from the query's fused-distance ranks [lo, hi] within its
    own partition (clamped to the partition size, with a warning);
    out-of-class negatives are drawn uniformly from other categories.
    The in/out mix follows ``ratios`` exactly via largest-remainder
    rounding.
    """
    if bounds is None:
        bounds = MiningBounds()
    if ratios is None:
        ratios = {"in_class": 0.3, "out_of_class": 0.7}
    if set(ratios) != {"in_class", "out_of_class"}:
        raise ParameterError("ratios must have exactly the keys in_class and out_of_class")
    if weights is None:
        weights = FusionWeights()

    by_id = {it.id: it for it in catalog}
    missing = [it.id for it in catalog if it.id not in results]
    if missing:
        raise CatalogError(f"results missing rows for {len(missing)} items, e.g. {missing[0]!r}")

    parts = partition_catalog(catalog)
    part_of = {it.id: (it.gender, it.category_key) for it in catalog}
    mats: dict[tuple[str, str], tuple[list[str], np.ndarray]] = {}

    # latest cache entry per (partition, id); insertion order means the
    # most recent digest wins when an image changed across runs
    latest_key: dict[str, str] = {}
    for fk in cache.ids():
        latest_key[fk.split("@", 1)[0]] = fk

    def partition_matrix(key):
        if key not in mats:
            items = sorted(parts[key], key=lambda it: it.id)
            vecs = []
            for it in items:
                fk = latest_key.get(f"{it.gender}|{it.category_key}|{it.id}")
                if fk is None:
                    raise CatalogError(f"feature cache has no entry for item {it.id!r}")
                vecs.append(cache.get(fk))
            mats[key] = ([it.id for it in items], np.stack(vecs).astype(np.float64))
        return mats[key]

    n_in, n_out = largest_remainder_counts(
        n_triplets, [ratios["in_class"], ratios["out_of_class"]]
    )

    lo_nominal = max(bounds.neg_rank_lo, bounds.top_p + 1)
    in_eligible = []
    clamped = False
    for item in catalog:
        m = len(parts[part_of[item.id]])
        hi = min(bounds.neg_rank_hi, m - 1)
        if results[item.id] and hi >= lo_nominal:
            in_eligible.append(item.id)
            if bounds.neg_rank_hi > m - 1:
                clamped = True
    in_eligible.sort()
    if clamped:
        warnings.warn(
            "negative rank range clamped to partition size for some queries", stacklevel=2
        )

    categories = sorted({it.category_key for it in catalog})
    others_by_cat = {
        c: sorted(it.id for it in catalog if it.category_key != c) for c in categories
    }
    out_eligible = sorted(
        it.id for it in catalog if results[it.id] and others_by_cat[it.category_key]
    )

    records: list[TripletRecord] = []
    for stratum, count, eligible in (
        ("in_class", n_in, in_eligible),
        ("out_of_class", n_out, out_eligible),
    ):
        if count == 0:
            continue
        if not eligible:
            raise ParameterError(f"no eligible queries for stratum {stratum!r}")
        for _ in range(count):
            qid = eligible[int(rng.integers(len(eligible)))]
            q = by_id[qid]
            neighbors = results[qid]
            pid = neighbors[int(rng.integers(min(bounds.top_p, len(neighbors))))][0]
            if stratum == "in_class":
                ids, mat = partition_matrix(part_of[qid])
                row = ids.index(qid)
                dists = fused_distances_to(mat[row], mat, weights)
                ranked = sorted(
                    (float(d), ids[k]) for k, d in enumerate(dists) if k != row
                )
                hi = min(bounds.neg_rank_hi, len(ranked))
                rank = int(rng.integers(lo_nominal, hi + 1))
                nid = ranked[rank - 1][1]
            else:
                others = others_by_cat[q.category_key]
                nid = others[int(rng.integers(len(others)))]
            records.append(
                TripletRecord(
                    q_path=q.image_path,
                    p_path=by_id[pid].image_path,
                    n_path=by_id[nid].image_path,
                    category_key=q.category_key,
                    q_source="catalog",
                    in_class=(stratum == "in_class"),
                )
            )
    return records
