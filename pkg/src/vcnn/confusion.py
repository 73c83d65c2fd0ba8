"""Confusion analysis over the shape anchor vectors (output-layer weight columns)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .design import kmeans
from .network import NetworkSpec, NetworkWeights, predict_probs


@dataclass
class SavMatrix:
    vectors: np.ndarray  # (K_f, C); column k is class k's anchor vector
    bias: np.ndarray  # (C,)

    @property
    def class_count(self) -> int:
        return self.vectors.shape[1]

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Correlation of each feature row with every SAV, plus the output bias."""
        return features.astype(np.float64) @ self.vectors.astype(np.float64) + self.bias

    def angles(self) -> np.ndarray:
        """Pairwise angles (radians) between SAVs; diagnostic only."""
        v = self.vectors.astype(np.float64)
        unit = v / np.maximum(np.linalg.norm(v, axis=0, keepdims=True), 1e-12)
        return np.arccos(np.clip(unit.T @ unit, -1.0, 1.0))


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (N, C) soft decision scores
    labels: np.ndarray  # (N,) ground truth

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or len(self.scores) != len(self.labels):
            raise ValueError("scores must be (N, C) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.scores.shape[1]):
            raise ValueError("label out of range")


@dataclass
class ConfusionSet:
    members: Tuple[int, ...]

    @property
    def kind(self) -> str:
        return "pure" if len(self.members) == 1 else "mixed"


@dataclass
class ConfusionSetPartition:
    sets: List[ConfusionSet]

    def __post_init__(self):
        seen = [c for s in self.sets for c in s.members]
        if len(seen) != len(set(seen)):
            raise ValueError("confusion sets overlap")

    @classmethod
    def from_groups(cls, groups) -> "ConfusionSetPartition":
        sets = [ConfusionSet(tuple(sorted(int(c) for c in g))) for g in groups if len(g)]
        sets.sort(key=lambda s: s.members[0])
        return cls(sets)

    @classmethod
    def all_pure(cls, class_count: int) -> "ConfusionSetPartition":
        return cls.from_groups([[c] for c in range(class_count)])

    def set_of(self, cls_index: int) -> ConfusionSet:
        for s in self.sets:
            if cls_index in s.members:
                return s
        raise KeyError(cls_index)

    def covers(self, class_count: int) -> bool:
        return sorted(c for s in self.sets for c in s.members) == list(range(class_count))

    def to_text(self, class_names: Optional[Sequence[str]] = None) -> str:
        """One set per line: ``kind<TAB>member,member,...``."""
        lines = []
        for s in self.sets:
            names = [class_names[c] if class_names else str(c) for c in s.members]
            lines.append(f"{s.kind}\t{','.join(names)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, class_names: Optional[Sequence[str]] = None) -> "ConfusionSetPartition":
        lookup = {n: i for i, n in enumerate(class_names)} if class_names else None
        groups = []
        for line in text.splitlines():
            if not line.strip():
                continue
            kind, members = line.split("\t")
            names = members.split(",")
            groups.append([lookup[n] if lookup else int(n) for n in names])
            if (kind == "pure") != (len(names) == 1):
                raise ValueError(f"set kind {kind!r} inconsistent with {len(names)} members")
        return cls.from_groups(groups)


def extract_savs(spec: NetworkSpec, weights: NetworkWeights) -> SavMatrix:
    if not spec.layers or spec.layers[-1].kind != "output":
        raise ValueError("network has no output layer")
    w, b = weights.params[-1]
    return SavMatrix(w.copy(), b.astype(np.float64).copy())


def soft_scores(spec: NetworkSpec, weights: NetworkWeights, grids, labels) -> ScoreMatrix:
    return ScoreMatrix(predict_probs(spec, weights, grids), labels)


def confusion_factor_matrix(scores: ScoreMatrix) -> np.ndarray:
    """Symmetric class-by-class confusion factors.

    ``CF(k, l) = mean_{i in k} s(y_i, l) / 2 + mean_{j in l} s(y_j, k) / 2``;
    the diagonal is left at zero (see :func:`affinity_from_cf`).
    """
    s, y = scores.scores, scores.labels
    c = s.shape[1]
    counts = np.bincount(y, minlength=c)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise ValueError(f"class {int(missing[0])} has no samples")
    # directional[k, l] = mean score toward l over samples of class k
    sums = np.zeros((c, c))
    np.add.at(sums, y, s)
    directional = sums / counts[:, None]
    cf = 0.5 * (directional + directional.T)
    np.fill_diagonal(cf, 0.0)
    return cf


def cf_to_csv(cf: np.ndarray, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(class_names)
    for row in cf:
        w.writerow([f"{v:.10g}" for v in row])
    return buf.getvalue()


def cf_from_csv(text: str) -> Tuple[np.ndarray, List[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[float(v) for v in r] for r in rows[1:]]), rows[0]


def affinity_from_cf(cf: np.ndarray) -> np.ndarray:
    """Affinity with each diagonal entry set to its row's largest off-diagonal value."""
    a = np.array(cf, dtype=np.float64)
    off = a.copy()
    np.fill_diagonal(off, -np.inf)
    np.fill_diagonal(a, off.max(axis=1) if len(a) > 1 else 0.0)
    return a


def eigengap_k(affinity: np.ndarray, k_min: int = 2, k_max: Optional[int] = None) -> int:
    """Cluster count at the largest gap of the normalized Laplacian spectrum."""
    lam = np.linalg.eigvalsh(normalized_laplacian(affinity))
    c = len(lam)
    k_max = c - 1 if k_max is None else min(k_max, c - 1)
    if k_max < k_min:
        return max(1, min(k_min, c))
    gaps = [lam[k] - lam[k - 1] for k in range(k_min, k_max + 1)]
    return k_min + int(np.argmax(gaps))


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    a = np.asarray(affinity, dtype=np.float64)
    deg = a.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(a)) - inv[:, None] * a * inv[None, :]


def spectral_cluster(cf: np.ndarray, k: Union[int, str] = "auto", seed: int = 0,
                     restarts: int = 10) -> ConfusionSetPartition:
    """Normalized spectral clustering of classes on the confusion-factor affinity.

    Classes with no confusion toward any other class are split out as pure sets
    first. ``k="auto"`` picks the count by the largest eigengap in ``[2, C-1]``.
    """
    cf = np.asarray(cf, dtype=np.float64)
    if cf.ndim != 2 or cf.shape[0] != cf.shape[1]:
        raise ValueError("affinity must be square")
    if np.any(cf < 0) or not np.allclose(cf, cf.T, atol=1e-9):
        raise ValueError("affinity must be symmetric and nonnegative")
    aff = affinity_from_cf(cf)
    off = cf.copy()
    np.fill_diagonal(off, 0.0)
    isolated = np.flatnonzero(off.sum(axis=1) == 0)
    active = np.flatnonzero(off.sum(axis=1) > 0)
    groups = [[int(i)] for i in isolated]
    if len(active) == 1:
        groups.append([int(active[0])])
    elif len(active) > 1:
        sub = aff[np.ix_(active, active)]
        n = len(active)
        if k == "auto":
            kk = eigengap_k(sub) if n > 2 else 1
        else:
            kk = int(k) - len(isolated)
        kk = max(1, min(kk, n))
        labels = _embed_and_cluster(sub, kk, seed, restarts)
        for g in range(kk):
            members = active[labels == g]
            if len(members):
                groups.append([int(i) for i in members])
    return ConfusionSetPartition.from_groups(groups)


def _embed_and_cluster(aff: np.ndarray, k: int, seed: int, restarts: int) -> np.ndarray:
    if k == 1:
        return np.zeros(len(aff), dtype=np.int64)
    deg = aff.sum(axis=1)
    inv = 1.0 / np.sqrt(deg)
    m = inv[:, None] * aff * inv[None, :]
    _, vecs = np.linalg.eigh(m)
    emb = vecs[:, -k:][:, ::-1]
    # fix eigenvector signs so the embedding does not depend on the solver
    signs = np.sign(emb[np.argmax(np.abs(emb), axis=0), np.arange(k)])
    emb = emb * np.where(signs == 0, 1.0, signs)
    emb /= np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return kmeans(emb, k, seed=seed, restarts=restarts).assignments


def identify_confusion_sets(spec: NetworkSpec, weights: NetworkWeights, grids, labels,
                            k: Union[int, str] = "auto", seed: int = 0):
    """Scores -> confusion factors -> spectral clustering. Returns ``(partition, cf)``."""
    cf = confusion_factor_matrix(soft_scores(spec, weights, grids, labels))
    return spectral_cluster(cf, k=k, seed=seed), cf


def class_spread(features: np.ndarray, labels: np.ndarray, class_count: int) -> np.ndarray:
    """Per-class mean squared distance of features to the class mean (diagnostic)."""
    out = np.zeros(class_count)
    for c in range(class_count):
        f = features[labels == c].astype(np.float64)
        if len(f):
            out[c] = float(((f - f.mean(axis=0)) ** 2).sum(axis=1).mean())
    return out
