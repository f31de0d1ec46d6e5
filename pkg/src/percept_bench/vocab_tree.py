"""Hierarchical k-means vocabulary, weighted signatures, inverted-file retrieval
and kNN window classification."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigError, EmptySignatureError, NormMismatchError, TrainingError
from .features import FeatureSet, ScaleSpaceConfig, extract_features
from .imaging import Image, IntegralImage, Window
from .models import Detection
from .persistence import load_bundle, save_bundle
from .segmentation import (
    CellGrid,
    ProposalConfig,
    StereoCalibration,
    canny,
    depth_grid_proposals,
    floodcanny,
    region_windows,
    sliding_windows,
    stereo_match,
    words_near_matches,
)

logger = logging.getLogger(__name__)

VOCAB_FORMAT_VERSION = 1
BACKGROUND = "background"


@dataclass(frozen=True)
class TreeConfig:
    k: int = 10
    depth: int = 4
    max_iters: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError(f"branch factor k must be >= 2, got {self.k}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


TREE_PRESETS: dict[str, TreeConfig] = {
    "detection": TreeConfig(k=10, depth=4),
    "final": TreeConfig(k=9, depth=4),
}


class Norm(Enum):
    L1 = "l1"
    L2 = "l2"


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VocabularyTree:
    """Nodes in breadth-first order; node 0 is the root.

    Children of a node are contiguous: ``first_child[i] .. first_child[i] + n_children[i]``.
    """

    centroids: np.ndarray
    first_child: np.ndarray
    n_children: np.ndarray
    parent: np.ndarray
    k: int
    depth: int
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if self.weights.shape != (self.n_nodes,):
            self.weights = np.zeros(self.n_nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.centroids)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.n_children == 0)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.n_children == 0))

    def children(self, node: int) -> np.ndarray:
        start = int(self.first_child[node])
        return np.arange(start, start + int(self.n_children[node]))

    @property
    def node_levels(self) -> np.ndarray:
        """Depth of every node, root at 0."""
        levels = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(1, self.n_nodes):
            levels[i] = levels[self.parent[i]] + 1
        return levels

    def ancestors(self, node: int) -> list[int]:
        """Path from the first level down to ``node`` (root excluded unless it is ``node``)."""
        path = [node]
        while self.parent[path[-1]] > 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        idx = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _kmeans(x: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeds. Returned labels are the nearest-centre
    assignment for the returned centres."""
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iters):
        dist = _sq_dists(x, centers)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            largest = int(np.argmax(counts))
            members = np.flatnonzero(labels == largest)
            far = members[int(np.argmax(dist[members, largest]))]
            labels[far] = j
            counts[largest] -= 1
            counts[j] = 1
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        centers = sums / counts[:, None]
    return centers, np.argmin(_sq_dists(x, centers), axis=1)


def _distinct_count(x: np.ndarray, cap: int) -> int:
    if len(x) == 0:
        return 0
    if not (x != x[0]).any():
        return 1
    return min(cap, len(np.unique(x, axis=0)))


def train_tree(descriptors: np.ndarray, cfg: TreeConfig | None = None) -> VocabularyTree:
    """Recursive k-means; a node stays a leaf at full depth, when it holds
    fewer than ``k`` descriptors, or when its descriptors are all identical."""
    cfg = cfg or TreeConfig()
    x = np.asarray(descriptors, dtype=np.float64)
    if len(x) < cfg.k:
        raise TrainingError(f"Need at least k={cfg.k} descriptors, got {len(x)}")

    centroids = [x.mean(axis=0)]
    parent = [-1]
    first_child = [0]
    n_children = [0]
    queue: list[tuple[int, np.ndarray, int]] = [(0, np.arange(len(x)), 0)]
    head = 0
    while head < len(queue):
        node, idx, level = queue[head]
        head += 1
        if level >= cfg.depth or len(idx) < cfg.k:
            continue
        pts = x[idx]
        k_eff = _distinct_count(pts, cfg.k)
        if k_eff < 2:
            continue
        rng = np.random.default_rng([cfg.seed, node])
        centers, labels = _kmeans(pts, k_eff, cfg.max_iters, rng)
        first_child[node] = len(centroids)
        for j in range(k_eff):
            members = idx[labels == j]
            if len(members) == 0:
                continue
            child = len(centroids)
            centroids.append(centers[j])
            parent.append(node)
            first_child.append(0)
            n_children.append(0)
            n_children[node] += 1
            queue.append((child, members, level + 1))

    tree = VocabularyTree(
        centroids=np.array(centroids),
        first_child=np.array(first_child, dtype=np.int64),
        n_children=np.array(n_children, dtype=np.int64),
        parent=np.array(parent, dtype=np.int64),
        k=cfg.k,
        depth=cfg.depth,
    )
    logger.info("Trained %dx%d vocabulary: %d nodes, %d leaves", cfg.k, cfg.depth, tree.n_nodes, tree.n_leaves)
    return tree


def quantize_many(descriptors: np.ndarray, tree: VocabularyTree) -> tuple[np.ndarray, np.ndarray]:
    """Greedy descent for a batch.

    Returns leaf ids and an ``(n, depth)`` path matrix padded with -1.
    """
    x = np.asarray(descriptors, dtype=np.float64).reshape(-1, tree.centroids.shape[1])
    n = len(x)
    node = np.zeros(n, dtype=np.int64)
    paths = np.full((n, tree.depth), -1, dtype=np.int64)
    if tree.n_children[0] == 0:
        paths[:, 0] = 0
        return node, paths
    for level in range(tree.depth):
        internal = tree.n_children[node] > 0
        if not internal.any():
            break
        for p in np.unique(node[internal]):
            sel = np.flatnonzero(node == p)
            ch = tree.children(int(p))
            node[sel] = ch[np.argmin(_sq_dists(x[sel], tree.centroids[ch]), axis=1)]
        paths[internal, level] = node[internal]
    return node, paths


def quantize(descriptor: np.ndarray, tree: VocabularyTree) -> tuple[int, list[int]]:
    leaves, paths = quantize_many(np.asarray(descriptor)[None, :], tree)
    return int(leaves[0]), [int(p) for p in paths[0] if p >= 0]


def node_counts(tree: VocabularyTree, paths: np.ndarray) -> np.ndarray:
    """n_i: descriptors whose path passes through each node."""
    flat = paths[paths >= 0]
    return np.bincount(flat, minlength=tree.n_nodes).astype(np.float64)


def compute_weights(tree: VocabularyTree, images: list[np.ndarray]) -> np.ndarray:
    """Entropy weights ln(N / N_i) over every node; nodes no image reaches get 0."""
    n_images = len(images)
    reached = np.zeros(tree.n_nodes, dtype=np.int64)
    for desc in images:
        if len(desc) == 0:
            continue
        _, paths = quantize_many(desc, tree)
        reached += node_counts(tree, paths) > 0
    weights = np.zeros(tree.n_nodes)
    hit = reached > 0
    if n_images:
        weights[hit] = np.log(n_images / reached[hit])
    return weights


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Signature:
    """Sparse weighted histogram, sorted by node id, normalised in ``norm``."""

    nodes: np.ndarray
    values: np.ndarray
    norm: Norm = Norm.L1

    def as_dict(self) -> dict[int, float]:
        return {int(n): float(v) for n, v in zip(self.nodes, self.values)}

    def __len__(self) -> int:
        return len(self.nodes)


# largest distance between two normalised non-negative signatures
MAX_DISTANCE = {Norm.L1: 2.0, Norm.L2: float(np.sqrt(2.0))}


def _normalize(values: np.ndarray, norm: Norm) -> np.ndarray:
    total = np.abs(values).sum() if norm is Norm.L1 else np.sqrt(np.dot(values, values))
    if total == 0:
        return np.zeros_like(values, dtype=np.float64)
    return values / total


def signature_from_counts(
    tree: VocabularyTree,
    counts: np.ndarray,
    norm: Norm = Norm.L1,
    leaves_only: bool = False,
    weights: np.ndarray | None = None,
) -> Signature:
    """Weighted signature from per-node counts.

    Counts given only at leaves are propagated to every ancestor unless
    ``leaves_only`` is set. Words that all weigh zero give an empty signature;
    no words at all is an error.
    """
    weights = tree.weights if weights is None else weights
    counts = np.where(tree.n_children == 0, np.asarray(counts, dtype=np.float64), 0.0)
    if not counts.any():
        raise EmptySignatureError("No visual words counted")
    if not leaves_only:
        levels = tree.node_levels
        for level in range(int(levels.max()), 1, -1):
            at = np.flatnonzero(levels == level)
            np.add.at(counts, tree.parent[at], counts[at])
    q = counts * weights
    nodes = np.flatnonzero(q > 0)
    return Signature(nodes.astype(np.int64), _normalize(q[nodes], norm), norm)


def make_signature(
    descriptors: np.ndarray,
    tree: VocabularyTree,
    norm: Norm = Norm.L1,
    leaves_only: bool = False,
) -> Signature:
    """q_i = n_i * w_i over every visited node (or leaves only), then normalised.

    An image whose words all have zero weight (every database image holds
    them) gets an empty signature, which scores at the maximal distance.
    """
    if len(descriptors) == 0:
        raise EmptySignatureError("Image has no features")
    _, paths = quantize_many(descriptors, tree)
    counts = node_counts(tree, paths)
    if leaves_only:
        counts = np.where(tree.n_children == 0, counts, 0.0)
    q = counts * tree.weights
    nodes = np.flatnonzero(q > 0)
    if len(nodes) == 0:
        logger.debug("Signature over %d descriptors has no weighted word", len(descriptors))
    return Signature(nodes.astype(np.int64), _normalize(q[nodes], norm), norm)


def _aligned(q: Signature, d: Signature) -> tuple[np.ndarray, np.ndarray]:
    nodes = np.union1d(q.nodes, d.nodes)
    qa = np.zeros(len(nodes))
    da = np.zeros(len(nodes))
    qa[np.searchsorted(nodes, q.nodes)] = q.values
    da[np.searchsorted(nodes, d.nodes)] = d.values
    return qa, da


def score(q: Signature, d: Signature) -> float:
    """Distance between normalised signatures in their shared norm.

    An empty signature matches nothing, itself included.
    """
    if q.norm is not d.norm:
        raise NormMismatchError(f"Cannot score {q.norm.value} against {d.norm.value}")
    if len(q) == 0 or len(d) == 0:
        return MAX_DISTANCE[q.norm]
    qa, da = _aligned(q, d)
    diff = _normalize(qa, q.norm) - _normalize(da, d.norm)
    if q.norm is Norm.L1:
        return float(np.abs(diff).sum())
    return float(np.sqrt(np.dot(diff, diff)))


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankedImage:
    image_id: int
    product: float
    distance: float


@dataclass(eq=False)
class InvertedFile:
    """Per-leaf posting lists of (image id, d_i) over L2-normalised signatures."""

    postings: dict[int, tuple[np.ndarray, np.ndarray]]
    n_images: int

    @classmethod
    def build(cls, signatures: list[Signature]) -> InvertedFile:
        lists: dict[int, tuple[list[int], list[float]]] = {}
        for image_id, sig in enumerate(signatures):
            if sig.norm is not Norm.L2:
                raise NormMismatchError("Inverted file needs L2-normalised signatures")
            for node, value in zip(sig.nodes.tolist(), sig.values.tolist()):
                ids, vals = lists.setdefault(node, ([], []))
                ids.append(image_id)
                vals.append(value)
        postings = {
            node: (np.array(ids, dtype=np.int64), np.array(vals))
            for node, (ids, vals) in sorted(lists.items())
        }
        return cls(postings, len(signatures))


def _rank(distances: np.ndarray, products: np.ndarray) -> list[RankedImage]:
    keys = np.round(distances, 10)
    order = np.lexsort((np.arange(len(keys)), keys))
    return [RankedImage(int(i), float(products[i]), float(distances[i])) for i in order]


def query_inverted(q: Signature, inv: InvertedFile) -> list[RankedImage]:
    """Rank database images by 2 - 2 * sum(q_i d_i), touching only shared postings."""
    if q.norm is not Norm.L2:
        raise NormMismatchError("Inverted-file queries must be L2-normalised")
    if inv.n_images == 0:
        return []
    products = np.zeros(inv.n_images)
    for node, value in zip(q.nodes.tolist(), q.values.tolist()):
        posting = inv.postings.get(node)
        if posting is not None:
            np.add.at(products, posting[0], value * posting[1])
    return _rank(2.0 - 2.0 * products, products)


def rank_exhaustive(q: Signature, database: list[Signature]) -> list[RankedImage]:
    """Score against every database signature. L2 rankings use the squared distance."""
    distances = np.array([score(q, d) for d in database])
    if q.norm is Norm.L2:
        distances = distances ** 2
    products = np.array([float(np.dot(*_aligned(q, d))) for d in database])
    return _rank(distances, products)


@dataclass(frozen=True)
class KnnVote:
    label: str
    votes: dict[str, int]
    summed_distance: dict[str, float]


def classify_knn(ranking: list[RankedImage], labels: list[str], k_nn: int = 10) -> KnnVote:
    """Majority label among the top ``k_nn``; ties go to the smaller summed
    distance, then to the lexicographically first label."""
    if k_nn < 1:
        raise ConfigError(f"k_nn must be >= 1, got {k_nn}")
    top = ranking[:k_nn]
    votes: Counter[str] = Counter()
    dist: dict[str, float] = {}
    for r in top:
        label = labels[r.image_id]
        votes[label] += 1
        dist[label] = dist.get(label, 0.0) + r.distance
    if not votes:
        return KnnVote(BACKGROUND, {}, {})
    winner = min(votes, key=lambda c: (-votes[c], dist[c], c))
    return KnnVote(winner, dict(votes), dist)


# ---------------------------------------------------------------------------
# Window histograms
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class WordIntegralImages:
    """One summed-area table of word occurrences per word present in the image.

    ``tables[j]`` belongs to ``words[j]``.
    """

    words: np.ndarray
    tables: np.ndarray
    width: int
    height: int
    n_features: int = 0

    @property
    def vocabulary_size(self) -> int:
        return len(self.words)

    def integral(self, word: int) -> IntegralImage:
        j = int(np.searchsorted(self.words, word))
        return IntegralImage(self.tables[j])


def _pixel_coords(positions: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    xs = np.clip(np.floor(pos[:, 0]).astype(np.int64), 0, width - 1)
    ys = np.clip(np.floor(pos[:, 1]).astype(np.int64), 0, height - 1)
    return xs, ys


def integral_memory_bytes(n_words: int, width: int, height: int) -> int:
    return n_words * (width + 1) * (height + 1) * 4


def build_word_integrals(
    positions: np.ndarray, words: np.ndarray, width: int, height: int
) -> WordIntegralImages:
    """Per-word count images at the feature locations, integrated."""
    words = np.asarray(words, dtype=np.int64)
    present = np.unique(words)
    xs, ys = _pixel_coords(positions, width, height)
    counts = np.zeros((len(present), height, width), dtype=np.int32)
    np.add.at(counts, (np.searchsorted(present, words), ys, xs), 1)
    tables = np.zeros((len(present), height + 1, width + 1), dtype=np.int32)
    np.cumsum(np.cumsum(counts, axis=1, dtype=np.int32), axis=2, dtype=np.int32, out=tables[:, 1:, 1:])
    return WordIntegralImages(present, tables, width, height, len(words))


def window_histogram(wii: WordIntegralImages, w: Window) -> np.ndarray:
    """Per-word counts inside ``w`` (aligned with ``wii.words``), four lookups per word."""
    if not w.inside(wii.width, wii.height):
        raise BoundsError(f"Window {w} outside {wii.width}x{wii.height} image")
    t = wii.tables
    return (
        t[:, w.y_max, w.x_max].astype(np.int64)
        + t[:, w.y_min, w.x_min]
        - t[:, w.y_min, w.x_max]
        - t[:, w.y_max, w.x_min]
    )


def direct_window_histogram(
    positions: np.ndarray, words: np.ndarray, present: np.ndarray, w: Window, width: int, height: int
) -> np.ndarray:
    """Point-in-box counting over every feature; same result as :func:`window_histogram`."""
    xs, ys = _pixel_coords(positions, width, height)
    inside = (xs >= w.x_min) & (xs < w.x_max) & (ys >= w.y_min) & (ys < w.y_max)
    idx = np.searchsorted(present, np.asarray(words, dtype=np.int64)[inside])
    return np.bincount(idx, minlength=len(present)).astype(np.int64)


# ---------------------------------------------------------------------------
# Database and detector
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VocabularyDatabase:
    """Tree, weights, database signatures, inverted file and labels as one unit.

    ``signatures`` include internal nodes and use ``norm`` for exhaustive
    scoring; the inverted file holds leaf-only L2 signatures.
    """

    tree: VocabularyTree
    signatures: list[Signature]
    leaf_signatures: list[Signature]
    labels: list[str]
    inverted: InvertedFile
    norm: Norm = Norm.L1

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.labels))


def build_database(
    image_descriptors: list[np.ndarray],
    labels: list[str],
    cfg: TreeConfig | None = None,
    norm: Norm = Norm.L1,
    max_train_descriptors: int = 200_000,
) -> VocabularyDatabase:
    """Train the vocabulary on the pooled descriptors and index every image."""
    if len(image_descriptors) != len(labels):
        raise TrainingError("One label per database image is required")
    cfg = cfg or TreeConfig()
    pooled = np.concatenate([d for d in image_descriptors if len(d)]) if image_descriptors else np.zeros((0, 128))
    if len(pooled) > max_train_descriptors:
        rng = np.random.default_rng(cfg.seed)
        pooled = pooled[np.sort(rng.choice(len(pooled), max_train_descriptors, replace=False))]
    tree = train_tree(pooled, cfg)
    tree.weights = compute_weights(tree, image_descriptors)
    signatures = [make_signature(d, tree, norm) for d in image_descriptors]
    leaf_sigs = [make_signature(d, tree, Norm.L2, leaves_only=True) for d in image_descriptors]
    return VocabularyDatabase(tree, signatures, leaf_sigs, list(labels), InvertedFile.build(leaf_sigs), norm)


def train_database(
    images: list[tuple[Image, str]],
    cfg: TreeConfig | None = None,
    feature_cfg: ScaleSpaceConfig | None = None,
    norm: Norm = Norm.L1,
) -> VocabularyDatabase:
    descs, labels = [], []
    for img, label in images:
        features = extract_features(img, feature_cfg)
        if len(features) == 0:
            logger.warning("Skipping %s training image without features", label)
            continue
        descs.append(features.descriptors)
        labels.append(label)
    return build_database(descs, labels, cfg, norm)


def _pack_signatures(prefix: str, sigs: list[Signature]) -> dict[str, np.ndarray]:
    offsets = np.cumsum([0] + [len(s) for s in sigs]).astype(np.int64)
    return {
        f"{prefix}_nodes": np.concatenate([s.nodes for s in sigs]) if sigs else np.zeros(0, dtype=np.int64),
        f"{prefix}_values": np.concatenate([s.values for s in sigs]) if sigs else np.zeros(0),
        f"{prefix}_offsets": offsets,
    }


def _unpack_signatures(prefix: str, arrays: dict[str, np.ndarray], norm: Norm) -> list[Signature]:
    nodes, values, offsets = (arrays[f"{prefix}_{name}"] for name in ("nodes", "values", "offsets"))
    return [
        Signature(nodes[a:b].astype(np.int64), values[a:b].astype(np.float64), norm)
        for a, b in zip(offsets[:-1], offsets[1:])
    ]


def save_database(db: VocabularyDatabase, path: str | Path) -> None:
    t = db.tree
    arrays = {
        "centroids": t.centroids,
        "first_child": t.first_child,
        "n_children": t.n_children,
        "parent": t.parent,
        "weights": t.weights,
        "shape": np.array([t.k, t.depth], dtype=np.int64),
        "labels": np.array(db.labels, dtype=str),
        "norm": np.array(db.norm.value),
    }
    arrays.update(_pack_signatures("sig", db.signatures))
    arrays.update(_pack_signatures("leaf", db.leaf_signatures))
    save_bundle(path, "vocabulary", VOCAB_FORMAT_VERSION, arrays)


def load_database(path: str | Path) -> VocabularyDatabase:
    arrays = load_bundle(path, "vocabulary", VOCAB_FORMAT_VERSION)
    k, depth = (int(v) for v in arrays["shape"])
    tree = VocabularyTree(
        arrays["centroids"], arrays["first_child"], arrays["n_children"], arrays["parent"], k, depth,
        arrays["weights"],
    )
    norm = Norm(str(arrays["norm"]))
    leaf = _unpack_signatures("leaf", arrays, Norm.L2)
    return VocabularyDatabase(
        tree,
        _unpack_signatures("sig", arrays, norm),
        leaf,
        [str(s) for s in arrays["labels"]],
        InvertedFile.build(leaf),
        norm,
    )


def dump_centroids(tree: VocabularyTree, path: str | Path) -> None:
    """Text dump: node id, parent, weight, then the centroid."""
    lines = []
    for i in range(tree.n_nodes):
        values = " ".join(f"{v:.6f}" for v in tree.centroids[i])
        lines.append(f"{i} {tree.parent[i]} {tree.weights[i]:.6f} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class VocabDetectorConfig:
    k_nn: int = 10
    proposals: str = "floodcanny"
    min_words: int = 5
    memory_budget_bytes: int = 256 * 1024 * 1024
    # sliding-grid settings used when proposals == "sliding"
    window_step: int = 32
    window_sizes: tuple[int, ...] = (64, 96, 128, 192)

    def __post_init__(self) -> None:
        if self.k_nn < 1 or self.min_words < 1:
            raise ConfigError("k_nn and min_words must be >= 1")
        if self.proposals not in ("floodcanny", "sliding"):
            raise ConfigError(f"Unknown proposal source {self.proposals!r}")


class VocabTreeDetector:
    """Proposal windows classified by inverted-file kNN over their word histogram."""

    def __init__(
        self,
        db: VocabularyDatabase,
        cfg: VocabDetectorConfig | None = None,
        feature_cfg: ScaleSpaceConfig | None = None,
        proposal_cfg: ProposalConfig | None = None,
    ) -> None:
        self.db = db
        self.cfg = cfg or VocabDetectorConfig()
        self.feature_cfg = feature_cfg
        self.proposal_cfg = proposal_cfg if proposal_cfg is not None else ProposalConfig()

    def proposals(self, img: Image) -> list[list[Window]]:
        """Window groups; a detection is reported at most once per group."""
        if self.cfg.proposals == "sliding":
            windows = sliding_windows(
                (img.width, img.height), self.cfg.window_step, self.cfg.window_sizes, (1.0,)
            )
            return [[w] for w in windows]
        pcfg = self.proposal_cfg
        edges = canny(img, pcfg.canny_low, pcfg.canny_high, pcfg.canny_sigma)
        return [region_windows(r, pcfg, (img.width, img.height)) for r in floodcanny(img, edges, pcfg)]

    def classify_counts(self, leaf_counts: np.ndarray) -> tuple[KnnVote, list[RankedImage]] | None:
        try:
            sig = signature_from_counts(self.db.tree, leaf_counts, Norm.L2, leaves_only=True)
        except EmptySignatureError:
            return None
        if len(sig) == 0:
            return None
        ranking = query_inverted(sig, self.db.inverted)
        return classify_knn(ranking, self.db.labels, self.cfg.k_nn), ranking

    def detect(
        self,
        img: Image,
        frame_id: str = "",
        features: FeatureSet | None = None,
        groups: list[list[Window]] | None = None,
    ) -> list[Detection]:
        return self.detect_counted(img, frame_id, features, groups)[0]

    def detect_counted(
        self,
        img: Image,
        frame_id: str = "",
        features: FeatureSet | None = None,
        groups: list[list[Window]] | None = None,
    ) -> tuple[list[Detection], int]:
        """Detections plus the number of windows classified for this frame."""
        features = features if features is not None else extract_features(img, self.feature_cfg)
        groups = groups if groups is not None else self.proposals(img)
        if len(features) == 0 or not groups:
            return [], 0
        leaves, _ = quantize_many(features.descriptors, self.db.tree)
        positions = features.positions()
        present = np.unique(leaves)
        use_integral = integral_memory_bytes(len(present), img.width, img.height) <= self.cfg.memory_budget_bytes
        wii = build_word_integrals(positions, leaves, img.width, img.height) if use_integral else None
        if not use_integral:
            logger.debug("Word integrals for %d words exceed budget; counting directly", len(present))

        detections = []
        evaluated = 0
        for group in groups:
            best: tuple[float, Window, str] | None = None
            for window in group:
                evaluated += 1
                if wii is not None:
                    hist = window_histogram(wii, window)
                else:
                    hist = direct_window_histogram(positions, leaves, present, window, img.width, img.height)
                if hist.sum() < self.cfg.min_words:
                    continue
                counts = np.zeros(self.db.tree.n_nodes)
                counts[present] = hist
                result = self.classify_counts(counts)
                if result is None:
                    continue
                vote, ranking = result
                if vote.label == BACKGROUND:
                    continue
                top = ranking[: self.cfg.k_nn]
                # vote share, with the mean winner product breaking ties
                mean_product = float(np.mean([
                    r.product for r in top if self.db.labels[r.image_id] == vote.label
                ]))
                conf = vote.votes[vote.label] / max(1, len(top)) + 0.01 * mean_product
                if best is None or conf > best[0]:
                    best = (conf, window, vote.label)
            if best is not None:
                conf, window, label = best
                detections.append(Detection(frame_id, label, window.box, conf))
        return detections, evaluated

    def detect_stereo(
        self,
        left: Image,
        right: Image,
        calib: StereoCalibration,
        grid: CellGrid | None = None,
        frame_id: str = "",
        radius: float = 20.0,
    ) -> list[Detection]:
        """Depth-cell proposals; each window counts only the words close to the
        cell's member matches."""
        lf = extract_features(left, self.feature_cfg)
        rf = extract_features(right, self.feature_cfg)
        matches = stereo_match(lf, rf)
        proposals = depth_grid_proposals(matches, calib, grid, (left.width, left.height))
        if not proposals:
            return []
        leaves, _ = quantize_many(lf.descriptors, self.db.tree)
        positions = lf.positions()
        present = np.unique(leaves)
        detections = []
        for prop in proposals:
            near = words_near_matches(positions, matches, prop.members, radius)
            hist = direct_window_histogram(
                positions[near], leaves[near], present, prop.window, left.width, left.height
            )
            if hist.sum() < self.cfg.min_words:
                continue
            counts = np.zeros(self.db.tree.n_nodes)
            counts[present] = hist
            result = self.classify_counts(counts)
            if result is None or result[0].label == BACKGROUND:
                continue
            vote = result[0]
            detections.append(Detection(frame_id, vote.label, prop.window.box, vote.votes[vote.label] / self.cfg.k_nn))
        return detections
