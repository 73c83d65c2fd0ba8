"""Merge-and-split re-classification of confusing classes.

Each mixed confusion set is bisected recursively by 2-means in VCNN-feature
space until a node is tight (variance < zeta) or small (size <= eta). Leaves
holding one class answer directly; leaves holding several carry a
class-weighted random forest. At test time a sample goes to the confusion set
of its network prediction, descends to the nearest leaf, and is labelled by
that leaf.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .confusion import ConfusionSet, ConfusionSetPartition
from .design import kmeans

REFINE_MAGIC = b"VCNR"
REFINE_VERSION = 1


class RefineFormatError(ValueError):
    pass


# ------------------------------------------------------------------ subset tree


@dataclass
class SubsetNode:
    members: np.ndarray  # sample ids
    centroid: np.ndarray
    variance: float
    classes: Tuple[int, ...]  # sorted distinct member labels
    children: List["SubsetNode"] = field(default_factory=list)
    forest: Optional["RandomForestModel"] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def kind(self) -> str:
        return "pure" if len(self.classes) == 1 else "mixed"

    def leaves(self) -> List["SubsetNode"]:
        out, stack = [], [self]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def _node(features, labels, ids) -> SubsetNode:
    x = features[ids].astype(np.float64)
    mu = x.mean(axis=0)
    var = float(((x - mu) ** 2).sum(axis=1).mean())
    return SubsetNode(np.asarray(ids), mu, var, tuple(int(c) for c in np.unique(labels[ids])))


def feature_variance(features: np.ndarray) -> float:
    """Mean squared distance of the rows to their centroid."""
    x = np.asarray(features, dtype=np.float64)
    return float(((x - x.mean(axis=0)) ** 2).sum(axis=1).mean())


def hierarchical_split(features, labels, zeta: float, eta: int, seed: int = 0,
                       ids: Optional[Sequence[int]] = None) -> SubsetNode:
    """Recursive 2-means bisection; a node splits iff variance >= zeta and size > eta."""
    if zeta <= 0 or eta < 1:
        raise ValueError("zeta must be > 0 and eta >= 1")
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(features)) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("no samples to split")
    root = _node(features, labels, ids)
    stack = [root]
    while stack:
        node = stack.pop()
        if node.variance < zeta or len(node.members) <= eta:
            continue
        res = kmeans(features[node.members].astype(np.float64), 2, seed=seed)
        sides = [node.members[res.assignments == g] for g in (0, 1)]
        if min(len(s) for s in sides) == 0:
            continue
        node.children = [_node(features, labels, s) for s in sides]
        stack.extend(node.children)
    return root


# ----------------------------------------------------------------- random forest


@dataclass
class ForestConfig:
    n_trees: int = 200
    max_depth: int = 0  # 0 = unlimited
    features_per_split: Optional[int] = None  # None = floor(sqrt(dim))
    seed: int = 0


@dataclass
class _Tree:
    # parallel arrays in pre-order; feature == -1 marks a leaf
    feature: List[int]
    threshold: List[float]
    left: List[int]
    right: List[int]
    hist: List[Optional[np.ndarray]]

    def leaf_hist(self, x: np.ndarray) -> np.ndarray:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return self.hist[i]


@dataclass
class RandomForestModel:
    classes: np.ndarray  # global class index per histogram slot
    class_weights: np.ndarray  # weight per slot
    dim: int
    trees: List[_Tree]
    seed: int = 0

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros((len(x), len(self.classes)))
        for t in self.trees:
            for i, row in enumerate(x):
                h = t.leaf_hist(row)
                out[i] += h / h.sum()
        return out / len(self.trees)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(x), axis=1)]


def _best_split(x, yw, feats):
    """Best weighted-Gini split over ``feats``; returns (gain, feature, threshold)."""
    n = len(x)
    xs = x[:, feats]
    order = np.argsort(xs, axis=0, kind="stable")
    sorted_x = np.take_along_axis(xs, order, axis=0)  # (n, f)
    cum = np.cumsum(yw[order], axis=0)  # (n, f, C)
    total = cum[-1, 0]
    wt = total.sum()
    parent = wt - (total ** 2).sum() / wt
    left = cum[:-1]
    right = total[None, None, :] - left
    wl = left.sum(axis=2)
    wr = right.sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        imp = (wl - (left ** 2).sum(axis=2) / wl) + (wr - (right ** 2).sum(axis=2) / wr)
    valid = (sorted_x[1:] > sorted_x[:-1]) & (wl > 0) & (wr > 0)
    imp = np.where(valid, imp, np.inf)
    flat = int(np.argmin(imp))
    pos, fi = divmod(flat, len(feats))
    if not np.isfinite(imp[pos, fi]):
        return 0.0, -1, 0.0
    gain = (parent - imp[pos, fi]) / wt
    thr = 0.5 * (sorted_x[pos, fi] + sorted_x[pos + 1, fi])
    return float(gain), int(feats[fi]), float(thr)


def _grow_tree(x, yw, cfg: ForestConfig, mtry: int, rng) -> _Tree:
    tree = _Tree([], [], [], [], [])
    d = x.shape[1]

    def grow(idx, depth):
        node = len(tree.feature)
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        hist = yw[idx].sum(axis=0)
        tree.hist.append(hist)
        if np.count_nonzero(hist) <= 1 or len(idx) < 2 or (cfg.max_depth and depth >= cfg.max_depth):
            return node
        perm = rng.permutation(d)
        gain, f, thr = _best_split(x[idx], yw[idx], perm[:mtry])
        if f < 0:
            # sampled features were constant here; fall back to the rest
            for start in range(mtry, d, mtry):
                gain, f, thr = _best_split(x[idx], yw[idx], perm[start:start + mtry])
                if f >= 0:
                    break
        if f < 0 or gain <= 0:
            return node
        go_left = x[idx, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.hist[node] = None
        tree.left[node] = grow(idx[go_left], depth + 1)
        tree.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(x)), 0)
    return tree


def inverse_frequency_weights(labels) -> Dict[int, float]:
    classes, counts = np.unique(np.asarray(labels), return_counts=True)
    n = counts.sum()
    return {int(c): float(n / (len(classes) * k)) for c, k in zip(classes, counts)}


def train_forest(features, labels, weights=None, config: Optional[ForestConfig] = None) -> RandomForestModel:
    """Bagged CART trees with weighted Gini splits on sqrt(dim) random features.

    ``weights`` maps class index -> weight (uniform when omitted). Each tree sees
    a uniform bootstrap sample whose multiplicities are scaled by the class
    weights; leaves keep weighted class histograms and the forest averages the
    normalized histograms.
    """
    cfg = config or ForestConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("a forest needs at least two classes")
    slot = np.searchsorted(classes, y)
    cw = np.array([1.0 if weights is None else float(weights[int(c)]) for c in classes])
    n, d = x.shape
    mtry = cfg.features_per_split or max(1, int(np.sqrt(d)))
    mtry = min(mtry, d)
    rng = np.random.default_rng(cfg.seed)
    trees = []
    for _ in range(cfg.n_trees):
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
        idx = np.flatnonzero(counts)
        yw = np.zeros((len(idx), len(classes)))
        yw[np.arange(len(idx)), slot[idx]] = counts[idx] * cw[slot[idx]]
        trees.append(_grow_tree(x[idx], yw, cfg, mtry, rng))
    return RandomForestModel(classes, cw, d, trees, cfg.seed)


# ------------------------------------------------------------------ refine model


@dataclass
class RefineModel:
    partition: ConfusionSetPartition
    class_count: int
    trees: Dict[Tuple[int, ...], SubsetNode]  # mixed set members -> subset tree
    zeta: float
    eta: int


def build_refine_model(partition: ConfusionSetPartition, features, labels, zeta: Optional[float] = None,
                       eta: int = 8, forest: Optional[ForestConfig] = None, seed: int = 0,
                       zeta_fraction: float = 0.1) -> RefineModel:
    """Split every mixed set over its own training samples and fit a forest per mixed leaf.

    ``zeta`` defaults to ``zeta_fraction`` times the variance of the whole
    training feature set.
    """
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    forest = forest or ForestConfig(seed=seed)
    if zeta is None:
        zeta = zeta_fraction * feature_variance(features)
        zeta = zeta if zeta > 0 else 1e-12
    class_count = sum(len(s.members) for s in partition.sets)
    trees = {}
    for si, s in enumerate(partition.sets):
        if s.kind == "pure":
            continue
        ids = np.flatnonzero(np.isin(labels, s.members))
        root = hierarchical_split(features, labels, zeta, eta, seed=seed, ids=ids)
        for li, leaf in enumerate(root.leaves()):
            if leaf.kind == "mixed":
                leaf_labels = labels[leaf.members]
                cfg = ForestConfig(forest.n_trees, forest.max_depth, forest.features_per_split,
                                   forest.seed + 1000 * si + li)
                leaf.forest = train_forest(features[leaf.members], leaf_labels,
                                           inverse_frequency_weights(leaf_labels), cfg)
        trees[s.members] = root
    return RefineModel(partition, class_count, trees, float(zeta), int(eta))


def assign_subset(model: RefineModel, feature, predicted_class: int, rule: str = "tree"):
    """Leaf for ``feature`` inside the confusion set of ``predicted_class``.

    ``rule="tree"`` descends by nearest child centroid; ``rule="leaf"`` takes the
    nearest leaf centroid of the set. A pure confusion set returns ``None``.
    """
    s = model.partition.set_of(int(predicted_class))
    if s.kind == "pure":
        return None
    node = model.trees[s.members]
    f = np.asarray(feature, dtype=np.float64)
    if rule == "leaf":
        leaves = node.leaves()
        d = [float(np.sum((f - l.centroid) ** 2)) for l in leaves]
        return leaves[int(np.argmin(d))]
    if rule != "tree":
        raise ValueError(f"unknown routing rule {rule!r}")
    while not node.is_leaf:
        d = [float(np.sum((f - c.centroid) ** 2)) for c in node.children]
        node = node.children[int(np.argmin(d))]
    return node


def refined_predict_detail(model: RefineModel, predicted_class: int, feature, rule: str = "tree"):
    """``(class, route)`` with route one of ``pure_set``, ``pure_leaf``, ``forest``."""
    leaf = assign_subset(model, feature, predicted_class, rule)
    if leaf is None:
        return int(predicted_class), "pure_set"
    if leaf.kind == "pure":
        return leaf.classes[0], "pure_leaf"
    return int(leaf.forest.predict(np.asarray(feature)[None])[0]), "forest"


def refined_predict(model: RefineModel, predicted_class: int, feature, rule: str = "tree") -> int:
    return refined_predict_detail(model, predicted_class, feature, rule)[0]


def refine_all(model: RefineModel, probs: np.ndarray, features: np.ndarray, rule: str = "tree"):
    """Refined labels and routes for a batch of network outputs."""
    base = np.argmax(probs, axis=1)
    out, routes = [], []
    for p, f in zip(base, features):
        c, r = refined_predict_detail(model, int(p), f, rule)
        out.append(c)
        routes.append(r)
    return np.array(out, dtype=np.int64), routes


# ------------------------------------------------------------------- persistence


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def f64s(self, arr):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def _take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise RefineFormatError("truncated refine model")
        v = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return v[0]

    def u8(self):
        return self._take("<B")

    def u32(self):
        return self._take("<I")

    def f64(self):
        return self._take("<d")

    def f64s(self, n):
        if self.pos + 8 * n > len(self.data):
            raise RefineFormatError("truncated refine model")
        a = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return a


def refine_model_bytes(model: RefineModel) -> bytes:
    """``VCNR`` container: header, partition, then every mixed set's subset tree in pre-order.

    Node records: u8 tag (0 internal, 1 pure leaf, 2 mixed leaf), centroid
    f64[dim], variance f64, member count u32, class list; mixed leaves are
    followed by their forest (trees in pre-order: u8 0 + u32 feature + f64
    threshold, or u8 1 + f64 histogram).
    """
    w = _Writer()
    w.parts.append(REFINE_MAGIC)
    w.u32(REFINE_VERSION)
    dim = 0
    for root in model.trees.values():
        dim = len(root.centroid)
        break
    w.u32(model.class_count)
    w.u32(dim)
    w.f64(model.zeta)
    w.u32(model.eta)
    w.u32(len(model.partition.sets))
    for s in model.partition.sets:
        w.u32(len(s.members))
        for c in s.members:
            w.u32(c)
    w.u32(len(model.trees))
    for members, root in model.trees.items():
        w.u32(len(members))
        for c in members:
            w.u32(c)
        for node in root.walk():
            w.u8(0 if not node.is_leaf else (1 if node.kind == "pure" else 2))
            w.f64s(node.centroid)
            w.f64(node.variance)
            w.u32(len(node.members))
            w.u32(len(node.classes))
            for c in node.classes:
                w.u32(c)
            if node.is_leaf and node.kind == "mixed":
                _write_forest(w, node.forest)
    return w.bytes()


def _write_forest(w: _Writer, f: RandomForestModel):
    w.u32(f.dim)
    w.u32(f.seed & 0xFFFFFFFF)
    w.u32(len(f.classes))
    for c in f.classes:
        w.u32(int(c))
    w.f64s(f.class_weights)
    w.u32(len(f.trees))
    for t in f.trees:
        stack = [0]
        while stack:
            i = stack.pop()
            if t.feature[i] < 0:
                w.u8(1)
                w.f64s(t.hist[i])
            else:
                w.u8(0)
                w.u32(t.feature[i])
                w.f64(t.threshold[i])
                stack.append(t.right[i])
                stack.append(t.left[i])


def _read_forest(r: _Reader) -> RandomForestModel:
    dim = r.u32()
    seed = r.u32()
    classes = np.array([r.u32() for _ in range(r.u32())], dtype=np.int64)
    weights = r.f64s(len(classes))
    trees = []
    for _ in range(r.u32()):
        t = _Tree([], [], [], [], [])

        def read_node():
            i = len(t.feature)
            t.feature.append(-1)
            t.threshold.append(0.0)
            t.left.append(-1)
            t.right.append(-1)
            t.hist.append(None)
            tag = r.u8()
            if tag == 1:
                t.hist[i] = r.f64s(len(classes))
            elif tag == 0:
                t.feature[i] = r.u32()
                t.threshold[i] = r.f64()
                t.left[i] = read_node()
                t.right[i] = read_node()
            else:
                raise RefineFormatError(f"bad tree node tag {tag}")
            return i

        read_node()
        trees.append(t)
    return RandomForestModel(classes, weights, dim, trees, seed)


def refine_model_from_bytes(data: bytes) -> RefineModel:
    if data[:4] != REFINE_MAGIC:
        raise RefineFormatError("bad magic: not a VCNR refine model")
    r = _Reader(data)
    r.pos = 4
    version = r.u32()
    if version != REFINE_VERSION:
        raise RefineFormatError(f"unsupported refine model version {version}")
    class_count = r.u32()
    dim = r.u32()
    zeta = r.f64()
    eta = r.u32()
    groups = []
    for _ in range(r.u32()):
        groups.append([r.u32() for _ in range(r.u32())])
    partition = ConfusionSetPartition([ConfusionSet(tuple(g)) for g in groups])
    trees = {}
    for _ in range(r.u32()):
        members = tuple(r.u32() for _ in range(r.u32()))

        def read_node():
            tag = r.u8()
            centroid = r.f64s(dim)
            variance = r.f64()
            n_members = r.u32()
            classes = tuple(r.u32() for _ in range(r.u32()))
            node = SubsetNode(np.zeros(n_members, dtype=np.int64), centroid, variance, classes)
            if tag == 0:
                node.children = [read_node(), read_node()]
            elif tag == 2:
                node.forest = _read_forest(r)
            elif tag != 1:
                raise RefineFormatError(f"bad subset node tag {tag}")
            return node

        trees[members] = read_node()
    if r.pos != len(data):
        raise RefineFormatError("trailing bytes after refine model")
    return RefineModel(partition, class_count, trees, zeta, eta)


def save_refine_model(model: RefineModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(refine_model_bytes(model))


def load_refine_model(path) -> RefineModel:
    with open(path, "rb") as fh:
        return refine_model_from_bytes(fh.read())
