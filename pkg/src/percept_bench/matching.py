"""Descriptor database, exact and best-bin-first search, ratio-test matching."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IndexBuildError, ModelFileError
from .features import DESCRIPTOR_DIM, FeatureSet
from .persistence import load_bundle, save_bundle

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 2
# bumped whenever the descriptor layout in features.py changes
DESCRIPTOR_FORMAT_VERSION = 1

_SAMPLE_ROWS = 100
_TOP_DIMS = 5


@dataclass(eq=False)
class DescriptorSet:
    """Descriptor rows plus the owner tag (model id, keypoint index) of each.

    ``site`` gives every row a keypoint-site id; rows sharing one (the extra
    orientations of a single keypoint) never serve as each other's second
    best in the ratio test. Defaults to one site per row.
    """

    descriptors: np.ndarray
    owner_model: np.ndarray
    owner_keypoint: np.ndarray
    model_ids: tuple[str, ...] = ()
    site: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2:
            raise ConfigError(f"Descriptor matrix must be 2-D, got shape {self.descriptors.shape}")
        m = self.descriptors.shape[0]
        self.owner_model = np.asarray(self.owner_model, dtype=np.int64).reshape(m)
        self.owner_keypoint = np.asarray(self.owner_keypoint, dtype=np.int64).reshape(m)
        if self.site is None:
            self.site = np.arange(m, dtype=np.int64)
        self.site = np.asarray(self.site, dtype=np.int64).reshape(m)
        if m and not self.model_ids:
            self.model_ids = tuple(str(i) for i in range(int(self.owner_model.max()) + 1))

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def owner(self, i: int) -> tuple[str, int]:
        return self.model_ids[self.owner_model[i]], int(self.owner_keypoint[i])

    @classmethod
    def from_array(cls, descriptors: np.ndarray, model_id: str = "query") -> DescriptorSet:
        m = len(descriptors)
        return cls(descriptors, np.zeros(m, dtype=np.int64), np.arange(m), (model_id,))

    @classmethod
    def from_features(cls, features: FeatureSet, model_id: str = "query") -> DescriptorSet:
        return cls.from_array(features.descriptors, model_id)

    @classmethod
    def concat(
        cls, named: list[tuple[str, np.ndarray]], sites: list[np.ndarray] | None = None
    ) -> DescriptorSet:
        """Pool several models' descriptors, preserving each row's owner tag.

        ``sites`` holds per-model local site ids (see :func:`keypoint_sites`);
        they are offset so no two models share a site.
        """
        if not named:
            return cls(np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32), [], [], ())
        if sites is not None and len(sites) != len(named):
            raise ConfigError(f"Got {len(sites)} site arrays for {len(named)} models")
        blocks, owners, kps, groups = [], [], [], []
        offset = 0
        for code, (_, desc) in enumerate(named):
            blocks.append(np.asarray(desc, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM))
            n = len(blocks[-1])
            owners.append(np.full(n, code, dtype=np.int64))
            kps.append(np.arange(n, dtype=np.int64))
            local = np.arange(n, dtype=np.int64) if sites is None else np.asarray(sites[code], dtype=np.int64)
            groups.append(local + offset)
            offset += int(local.max()) + 1 if n else 0
        return cls(
            np.concatenate(blocks),
            np.concatenate(owners),
            np.concatenate(kps),
            tuple(name for name, _ in named),
            np.concatenate(groups),
        )


def keypoint_sites(features: FeatureSet) -> np.ndarray:
    """Site id per keypoint: equal for keypoints at the same (x, y, scale)."""
    if len(features) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.array([(k.x, k.y, k.scale) for k in features.keypoints], dtype=np.float64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


@dataclass(frozen=True)
class MatchConfig:
    distance_ratio: float = 0.8
    approx: bool = True
    approx_checks: int | None = 64
    trees: int = 4
    leaf_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.distance_ratio <= 1.0:
            raise ConfigError(f"distance_ratio must be in (0, 1], got {self.distance_ratio}")
        if self.approx_checks is not None and self.approx_checks < 1:
            raise ConfigError("approx_checks must be >= 1 or None for unlimited")
        if self.trees < 1 or self.leaf_size < 1:
            raise ConfigError("trees and leaf_size must be >= 1")


@dataclass(frozen=True)
class Match:
    query_index: int
    model_id: str
    model_keypoint_index: int
    distance: float
    ratio: float
    db_index: int = -1


def _sq_dists(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances in float64; shared by every search path."""
    diff = rows.astype(np.float64) - q
    return np.einsum("ij,ij->i", diff, diff)


class _Top2:
    """Running best and second-best (distance, index), ties to the lower index.

    The second best is the nearest row from a site other than the best's.
    """

    __slots__ = ("d1", "i1", "s1", "d2", "i2")

    def __init__(self) -> None:
        self.d1 = self.d2 = np.inf
        self.i1 = self.i2 = self.s1 = -1

    def offer(self, dists: np.ndarray, idx: np.ndarray, sites: np.ndarray) -> None:
        for d, i, s in zip(dists.tolist(), idx.tolist(), sites.tolist()):
            if d < self.d1 or (d == self.d1 and i < self.i1):
                # the old best is the nearest row seen outside the new best's site
                if s != self.s1:
                    self.d2, self.i2 = self.d1, self.i1
                self.d1, self.i1, self.s1 = d, i, s
            elif s == self.s1:
                continue
            elif d < self.d2 or (d == self.d2 and i < self.i2):
                self.d2, self.i2 = d, i


def brute_force_top2(
    queries: np.ndarray, db: np.ndarray, sites: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact nearest and second-nearest rows for every query.

    The second row is the nearest one whose site differs from the nearest's
    (every row its own site when ``sites`` is None). Returns (nn index, nn
    squared distance, second index, second squared distance).
    """
    queries = np.asarray(queries, dtype=np.float64)
    db = np.asarray(db)
    sites = np.arange(len(db)) if sites is None else np.asarray(sites)
    n = len(queries)
    i1 = np.full(n, -1, dtype=np.int64)
    i2 = np.full(n, -1, dtype=np.int64)
    d1 = np.full(n, np.inf)
    d2 = np.full(n, np.inf)
    for qi, q in enumerate(queries):
        dists = _sq_dists(db, q)
        if len(dists) == 0:
            continue
        # stable sort keeps the lowest index first among equal distances
        order = np.argsort(dists, kind="stable")
        i1[qi], d1[qi] = order[0], dists[order[0]]
        rest = order[sites[order] != sites[order[0]]]
        if len(rest):
            i2[qi], d2[qi] = rest[0], dists[rest[0]]
    return i1, d1, i2, d2


# ---------------------------------------------------------------------------
# Randomized kd-forest
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _KDTree:
    split_dim: np.ndarray
    split_val: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    perm: np.ndarray


def _build_tree(data: np.ndarray, leaf_size: int, rng: np.random.Generator) -> _KDTree:
    perm = np.arange(len(data), dtype=np.int64)
    split_dim: list[int] = []
    split_val: list[float] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    end: list[int] = []

    def new_node(lo: int, hi: int) -> int:
        split_dim.append(-1)
        split_val.append(0.0)
        left.append(-1)
        right.append(-1)
        start.append(lo)
        end.append(hi)
        return len(split_dim) - 1

    stack = [new_node(0, len(data))]
    while stack:
        node = stack.pop()
        lo, hi = start[node], end[node]
        if hi - lo <= leaf_size:
            continue
        idx = perm[lo:hi]
        pts = data[idx].astype(np.float64)
        sample = pts if len(pts) <= _SAMPLE_ROWS else pts[rng.choice(len(pts), _SAMPLE_ROWS, replace=False)]
        var = sample.var(axis=0)
        if var.max() <= 0.0:
            var = pts.var(axis=0)
            if var.max() <= 0.0:
                continue
        top = np.argsort(-var, kind="stable")[:_TOP_DIMS]
        top = top[var[top] > 0.0]
        dim = int(top[rng.integers(len(top))])
        val = float(sample[:, dim].mean())
        goes_left = pts[:, dim] < val
        n_left = int(goes_left.sum())
        if n_left == 0 or n_left == len(pts):
            val = float(pts[:, dim].mean())
            goes_left = pts[:, dim] < val
            n_left = int(goes_left.sum())
            if n_left == 0 or n_left == len(pts):
                continue
        perm[lo:hi] = np.concatenate([idx[goes_left], idx[~goes_left]])
        split_dim[node] = dim
        split_val[node] = val
        left[node] = new_node(lo, lo + n_left)
        right[node] = new_node(lo + n_left, hi)
        stack.append(right[node])
        stack.append(left[node])

    return _KDTree(
        np.array(split_dim, dtype=np.int64),
        np.array(split_val, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64),
        np.array(end, dtype=np.int64),
        perm,
    )


@dataclass(eq=False)
class KDForestIndex:
    """Randomized kd-trees searched best-bin-first with a shared priority queue.

    ``checks`` counts leaf visits across all trees; ``None`` searches until
    every remaining branch is provably farther than the current second best,
    which reproduces the exact scan.
    """

    db: DescriptorSet
    trees: list[_KDTree] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.db)

    def top2(self, q: np.ndarray, checks: int | None) -> tuple[int, float, int, float]:
        data = self.db.descriptors
        q = np.asarray(q, dtype=np.float64)
        best = _Top2()
        visited = np.zeros(len(data), dtype=bool)
        n_visited = 0
        heap: list[tuple[float, int, int]] = [(0.0, t, 0) for t in range(len(self.trees))]
        leaves = 0
        while heap:
            bound, t, node = heapq.heappop(heap)
            if bound > best.d2:
                break
            if checks is not None and leaves >= checks:
                break
            tree = self.trees[t]
            while tree.split_dim[node] >= 0:
                diff = q[tree.split_dim[node]] - tree.split_val[node]
                if diff < 0:
                    near, far = tree.left[node], tree.right[node]
                else:
                    near, far = tree.right[node], tree.left[node]
                heapq.heappush(heap, (max(bound, diff * diff), t, int(far)))
                node = int(near)
            leaves += 1
            pts = tree.perm[tree.start[node]:tree.end[node]]
            pts = pts[~visited[pts]]
            if len(pts):
                visited[pts] = True
                n_visited += len(pts)
                best.offer(_sq_dists(data[pts], q), pts, self.db.site[pts])
                if n_visited == len(data):
                    break
        return best.i1, best.d1, best.i2, best.d2

    def query_top2(
        self, queries: np.ndarray, checks: int | None = 64
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        queries = np.asarray(queries)
        n = len(queries)
        out_i1 = np.full(n, -1, dtype=np.int64)
        out_i2 = np.full(n, -1, dtype=np.int64)
        out_d1 = np.full(n, np.inf)
        out_d2 = np.full(n, np.inf)
        for qi in range(n):
            out_i1[qi], out_d1[qi], out_i2[qi], out_d2[qi] = self.top2(queries[qi], checks)
        return out_i1, out_d1, out_i2, out_d2


def build_index(db: DescriptorSet, seed: int = 0, trees: int = 4, leaf_size: int = 8) -> KDForestIndex:
    if len(db) < 2:
        raise IndexBuildError(f"Need at least 2 descriptors to index, got {len(db)}")
    rng = np.random.default_rng(seed)
    forest = [_build_tree(db.descriptors, leaf_size, rng) for _ in range(trees)]
    logger.info("Built %d kd-trees over %d descriptors", trees, len(db))
    return KDForestIndex(db=db, trees=forest, seed=seed)


def match_descriptors(
    query: DescriptorSet | FeatureSet,
    db: DescriptorSet | KDForestIndex,
    cfg: MatchConfig | None = None,
) -> list[Match]:
    """Nearest-neighbour matches that pass the distance-ratio test.

    The second-best neighbour is the nearest one over the whole pool that
    belongs to a different keypoint site than the best.
    """
    cfg = cfg or MatchConfig()
    queries = query.descriptors
    dset = db.db if isinstance(db, KDForestIndex) else db
    if len(queries) == 0:
        return []
    if len(dset) < 2:
        logger.warning("Database holds %d descriptors; ratio test needs two", len(dset))
        return []

    if cfg.approx:
        index = db if isinstance(db, KDForestIndex) else build_index(dset, cfg.seed, cfg.trees, cfg.leaf_size)
        i1, d1, i2, d2 = index.query_top2(queries, cfg.approx_checks)
    else:
        i1, d1, i2, d2 = brute_force_top2(queries, dset.descriptors, dset.site)

    dist1 = np.sqrt(d1)
    dist2 = np.sqrt(d2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dist2 > 0, dist1 / dist2, 1.0)
    matches = []
    for qi in np.flatnonzero((i1 >= 0) & (i2 >= 0) & (ratios <= cfg.distance_ratio)):
        model_id, kp = dset.owner(int(i1[qi]))
        matches.append(Match(int(qi), model_id, kp, float(dist1[qi]), float(ratios[qi]), int(i1[qi])))
    logger.debug("Kept %d of %d query descriptors", len(matches), len(queries))
    return matches


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_TREE_FIELDS = ("split_dim", "split_val", "left", "right", "start", "end", "perm")


def save_index(index: KDForestIndex, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {
        "descriptors": index.db.descriptors,
        "owner_model": index.db.owner_model,
        "owner_keypoint": index.db.owner_keypoint,
        "site": index.db.site,
        "model_ids": np.array(index.db.model_ids, dtype=str),
        "descriptor_format": np.array(DESCRIPTOR_FORMAT_VERSION),
        "seed": np.array(index.seed),
    }
    for t, tree in enumerate(index.trees):
        for name in _TREE_FIELDS:
            arrays[f"tree{t}_{name}"] = getattr(tree, name)
    save_bundle(path, "descriptor-index", INDEX_FORMAT_VERSION, arrays)


def load_index(path: str | Path) -> KDForestIndex:
    arrays = load_bundle(path, "descriptor-index", INDEX_FORMAT_VERSION)
    if int(arrays["descriptor_format"]) != DESCRIPTOR_FORMAT_VERSION:
        raise ModelFileError(f"{path} was built for descriptor format v{int(arrays['descriptor_format'])}")
    db = DescriptorSet(
        arrays["descriptors"],
        arrays["owner_model"],
        arrays["owner_keypoint"],
        tuple(str(m) for m in arrays["model_ids"]),
        arrays["site"],
    )
    trees = []
    t = 0
    while f"tree{t}_perm" in arrays:
        trees.append(_KDTree(*(arrays[f"tree{t}_{name}"] for name in _TREE_FIELDS)))
        t += 1
    return KDForestIndex(db=db, trees=trees, seed=int(arrays["seed"]))
