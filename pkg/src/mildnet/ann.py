"""Approximate nearest neighbours via a forest of random hyperplane trees.

Each tree recursively splits the points: pick two distinct points at
random, split by the hyperplane equidistant to them (normal = their
difference, offset at the midpoint), and recurse until a node holds at
most ``leaf_capacity`` points. If a hyperplane fails to separate the
points (duplicates), the node falls back to a random balanced split.

Queries walk all trees through one shared max-priority queue keyed by
the minimum margin along the path, collect unique candidate ordinals
until the search budget is reached, then rank candidates by exact
euclidean distance. Vectors are stored as float32; distances are
computed in float64 on the stored values, so results are identical
before and after an index round trip through disk.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .binio import FormatError
from .ops import DimensionError, ParameterError

INDEX_MAGIC = b"MLDI"
INDEX_VERSION = 1

_INNER = 0
_LEAF = 1


@dataclass(frozen=True)
class IndexConfig:
    n_trees: int = 10
    leaf_capacity: int = 16
    search_budget: int | None = None  # None: n_trees * leaf_capacity * top_k at query time
    metric: str = "euclidean"

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.leaf_capacity < 1:
            raise ParameterError(f"leaf_capacity must be >= 1, got {self.leaf_capacity}")
        if self.search_budget is not None and self.search_budget < 1:
            raise ParameterError(f"search_budget must be >= 1, got {self.search_budget}")
        if self.metric != "euclidean":
            raise ParameterError(f"only the euclidean metric is supported, got {self.metric!r}")


class _Inner:
    __slots__ = ("normal", "offset", "left", "right")

    def __init__(self, normal, offset, left, right):
        self.normal = normal
        self.offset = offset
        self.left = left
        self.right = right


class _Leaf:
    __slots__ = ("ordinals",)

    def __init__(self, ordinals):
        self.ordinals = ordinals


@dataclass
class AnnForest:
    config: IndexConfig
    seed: int
    ids: list[str]
    vectors: np.ndarray  # (n, dim) float32
    trees: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def _build_tree(vectors: np.ndarray, ordinals: np.ndarray, capacity: int, rng) -> object:
    if len(ordinals) <= capacity:
        return _Leaf(ordinals)
    i, j = rng.choice(len(ordinals), size=2, replace=False)
    a = vectors[ordinals[i]]
    b = vectors[ordinals[j]]
    normal = a - b
    offset = np.float32(normal @ ((a + b) * np.float32(0.5)))
    margins = vectors[ordinals] @ normal - offset
    left_mask = margins < 0
    if left_mask.all() or not left_mask.any():
        # duplicates or a degenerate hyperplane: random balanced split
        perm = rng.permutation(len(ordinals))
        half = len(ordinals) // 2
        left_ord = ordinals[np.sort(perm[:half])]
        right_ord = ordinals[np.sort(perm[half:])]
    else:
        left_ord = ordinals[left_mask]
        right_ord = ordinals[~left_mask]
    left = _build_tree(vectors, left_ord, capacity, rng)
    right = _build_tree(vectors, right_ord, capacity, rng)
    return _Inner(normal, float(offset), left, right)


def build_index(items: list[tuple[str, np.ndarray]], config: IndexConfig, seed: int) -> AnnForest:
    """Build a forest over ``items`` (id, vector). Tree t seeds from seed^t."""
    if not items:
        raise ParameterError("cannot index an empty item list")
    ids = [item_id for item_id, _ in items]
    if len(set(ids)) != len(ids):
        raise ParameterError("item ids must be unique")
    dim = len(np.asarray(items[0][1]).ravel())
    vectors = np.empty((len(items), dim), dtype=np.float32)
    for row, (item_id, vec) in enumerate(items):
        arr = np.asarray(vec, dtype=np.float32).ravel()
        if arr.shape != (dim,):
            raise DimensionError(
                f"item {item_id!r} has dim {arr.shape[0]}, expected {dim}"
            )
        vectors[row] = arr
    forest = AnnForest(config=config, seed=seed, ids=ids, vectors=vectors)
    all_ordinals = np.arange(len(items), dtype=np.int64)
    for t in range(config.n_trees):
        rng = np.random.default_rng(seed ^ t)
        forest.trees.append(_build_tree(vectors, all_ordinals, config.leaf_capacity, rng))
    return forest


def default_budget(config: IndexConfig, top_k: int) -> int:
    if config.search_budget is not None:
        return config.search_budget
    return config.n_trees * config.leaf_capacity * top_k


def collect_candidates(forest: AnnForest, query: np.ndarray, budget: int) -> list[int]:
    """Unique candidate ordinals gathered across all trees, best-margin first.

    All tree roots share one priority queue; an inner node pushes both
    children keyed by min(parent key, |margin|) with the query's side
    preferred. Collection stops once ``budget`` unique ordinals are seen.
    """
    if budget < 1:
        raise ParameterError(f"budget must be >= 1, got {budget}")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape != (forest.dim,):
        raise DimensionError(f"query dim {q.shape[0]} != index dim {forest.dim}")
    heap: list[tuple[float, int, object]] = []
    counter = 0
    for root in forest.trees:
        heap.append((-math.inf, counter, root))
        counter += 1
    heapq.heapify(heap)
    seen: set[int] = set()
    out: list[int] = []
    while heap and len(out) < budget:
        neg_key, _, node = heapq.heappop(heap)
        key = -neg_key
        if isinstance(node, _Leaf):
            for ordinal in node.ordinals:
                o = int(ordinal)
                if o not in seen:
                    seen.add(o)
                    out.append(o)
                    if len(out) >= budget:
                        break
            continue
        margin = float(node.normal.astype(np.float64) @ q) - node.offset
        near, far = (node.right, node.left) if margin >= 0 else (node.left, node.right)
        heapq.heappush(heap, (-min(key, abs(margin)), counter, near))
        counter += 1
        heapq.heappush(heap, (-min(key, -abs(margin)), counter, far))
        counter += 1
    return out


def query_knn(
    forest: AnnForest,
    query: np.ndarray,
    top_k: int,
    budget: int | None = None,
) -> list[tuple[str, float]]:
    """Top ``top_k`` (id, distance), distance ascending, ties by id."""
    if top_k < 1:
        raise ParameterError(f"top_k must be >= 1, got {top_k}")
    if budget is None:
        budget = default_budget(forest.config, top_k)
    ordinals = collect_candidates(forest, query, budget)
    q = np.asarray(query, dtype=np.float64).ravel()
    cand = forest.vectors[ordinals].astype(np.float64)
    diffs = cand - q
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    ranked = sorted((float(d), forest.ids[o]) for d, o in zip(dists, ordinals))
    return [(item_id, d) for d, item_id in ranked[:top_k]]


def brute_force_knn(
    items: list[tuple[str, np.ndarray]],
    query: np.ndarray,
    top_k: int,
) -> list[tuple[str, float]]:
    """Exact baseline with the same float32 storage convention as the forest."""
    if top_k < 1:
        raise ParameterError(f"top_k must be >= 1, got {top_k}")
    if not items:
        raise ParameterError("cannot search an empty item list")
    q = np.asarray(query, dtype=np.float64).ravel()
    ranked = []
    for item_id, vec in items:
        v = np.asarray(vec, dtype=np.float32).astype(np.float64).ravel()
        if v.shape != q.shape:
            raise DimensionError(f"item {item_id!r} dim {v.shape[0]} != query dim {q.shape[0]}")
        d = v - q
        # elementwise square + pairwise sum, the same reduction query_knn
        # applies row-wise, so exhaustive searches agree bitwise
        ranked.append((float(np.sqrt((d * d).sum())), item_id))
    ranked.sort()
    return [(item_id, d) for d, item_id in ranked[:top_k]]


def _write_node(fh, node) -> None:
    if isinstance(node, _Leaf):
        binio.write_u8(fh, _LEAF)
        binio.write_u32(fh, len(node.ordinals))
        fh.write(np.asarray(node.ordinals, dtype="<u4").tobytes())
    else:
        binio.write_u8(fh, _INNER)
        binio.write_floats(fh, node.normal, "<f4")
        binio.write_f32(fh, node.offset)
        _write_node(fh, node.left)
        _write_node(fh, node.right)


def _read_node(fh, dim: int, n_items: int):
    tag = binio.read_u8(fh)
    if tag == _LEAF:
        count = binio.read_u32(fh)
        raw = binio.read_exact(fh, 4 * count, "leaf ordinals")
        ordinals = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        if len(ordinals) and ordinals.max() >= n_items:
            raise FormatError(f"leaf ordinal {int(ordinals.max())} out of range")
        return _Leaf(ordinals)
    if tag == _INNER:
        normal = binio.read_floats(fh, dim, "<f4", "split normal")
        offset = binio.read_f32(fh)
        left = _read_node(fh, dim, n_items)
        right = _read_node(fh, dim, n_items)
        return _Inner(normal, offset, left, right)
    raise FormatError(f"bad node tag {tag}")


def save_index(forest: AnnForest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        binio.write_u32(fh, INDEX_VERSION)
        binio.write_u32(fh, forest.config.n_trees)
        binio.write_u32(fh, forest.config.leaf_capacity)
        binio.write_u64(fh, forest.seed)
        binio.write_u32(fh, forest.dim)
        binio.write_u64(fh, len(forest))
        for item_id in forest.ids:
            binio.write_str(fh, item_id)
        fh.write(forest.vectors.astype("<f4").tobytes())
        for tree in forest.trees:
            _write_node(fh, tree)


def load_index(path) -> AnnForest:
    with open(path, "rb") as fh:
        binio.expect_magic(fh, INDEX_MAGIC)
        version = binio.read_u32(fh)
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported index version {version}")
        n_trees = binio.read_u32(fh)
        leaf_capacity = binio.read_u32(fh)
        seed = binio.read_u64(fh)
        dim = binio.read_u32(fh)
        count = binio.read_u64(fh)
        if dim < 1 or count < 1:
            raise FormatError(f"bad index header: dim={dim} count={count}")
        ids = [binio.read_str(fh) for _ in range(count)]
        raw = binio.read_exact(fh, 4 * dim * count, "index vectors")
        vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
        config = IndexConfig(n_trees=n_trees, leaf_capacity=leaf_capacity)
        forest = AnnForest(config=config, seed=seed, ids=ids, vectors=vectors)
        for _ in range(n_trees):
            forest.trees.append(_read_node(fh, dim, count))
        if fh.read(1):
            raise FormatError("trailing bytes after index payload")
    return forest
