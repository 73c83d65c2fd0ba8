"""Feed-forward, unsupervised selection of filter sizes and counts.

Each layer is designed from the patches it will see: patches are normalized
and screened for saliency, clustered with K-means over a grid of K, scored by
BIC, and the first valley of the BIC curve picks K. The edge whose valley is
lowest wins, its centroids become the layer's filters, and the resulting
activations feed the design of the next layer.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import LayerSpec, NetworkSpec, SpecError, im2col, maxpool_forward
from .voxelcore import DTYPE, row_variances

CONV_EDGES = (3, 5, 7)
CONV_K_GRID = (32, 64, 128, 256, 512, 768, 1024)
FC_K_GRID = (128, 256, 512, 1024, 2048)
VARIANCE_FLOOR = 1e-8


class EmptyCandidateError(ValueError):
    """Screening removed every patch; relax epsilon or top_percent."""


@dataclass
class ScreeningConfig:
    epsilon: float = 1e-4
    top_percent: float = 20.0
    max_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0 < self.top_percent <= 100:
            raise ValueError("top_percent must be in (0, 100]")
        if self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, C) unit rows
    layer: int = 1
    edge: int = 3

    def __len__(self):
        return len(self.patches)

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    sizes: np.ndarray
    converged: bool
    iterations: int
    wcss: float
    wcss_history: List[float] = field(default_factory=list)


@dataclass
class BicCurve:
    edge: int
    ks: List[int]
    scores: List[float]
    valley: Optional[int] = None
    flag: str = ""

    @property
    def valley_score(self) -> float:
        return self.scores[self.ks.index(self.valley)]


@dataclass
class DesignResult:
    conv: List[Tuple[int, int]]  # chosen (edge, count) per conv layer
    fc_count: int
    centroids: List[np.ndarray]  # per conv layer, (K, m^3 * K_prev)
    curves: List[List[BicCurve]]  # per conv layer, one curve per edge scanned
    fc_curve: BicCurve
    screening: ScreeningConfig
    notes: List[str] = field(default_factory=list)

    def network_spec(self, input_resolution: int, class_count: int) -> NetworkSpec:
        layers = [LayerSpec("conv3", k, m, True) for m, k in self.conv]
        layers += [LayerSpec("fc", self.fc_count), LayerSpec("output", class_count)]
        return NetworkSpec(input_resolution, layers, class_count)

    def report(self) -> str:
        """Plain-text report: chosen parameters, then each curve as ``K,score`` CSV rows."""
        out = io.StringIO()
        out.write("# design report\n")
        s = self.screening
        out.write(f"# screening epsilon={s.epsilon:g} top_percent={s.top_percent:g} "
                  f"max_samples={s.max_samples} seed={s.seed}\n")
        for j, (m, k) in enumerate(self.conv, 1):
            out.write(f"conv{j} edge={m} count={k}\n")
        out.write(f"fc count={self.fc_count}\n")
        for note in self.notes:
            out.write(f"# note: {note}\n")
        for j, layer_curves in enumerate(self.curves, 1):
            for c in layer_curves:
                out.write(f"\n[curve conv{j} edge={c.edge} valley={c.valley} flag={c.flag}]\nK,score\n")
                for k, v in zip(c.ks, c.scores):
                    out.write(f"{k},{v:.10g}\n")
        c = self.fc_curve
        out.write(f"\n[curve fc edge={c.edge} valley={c.valley} flag={c.flag}]\nK,score\n")
        for k, v in zip(c.ks, c.scores):
            out.write(f"{k},{v:.10g}\n")
        return out.getvalue()


# ----------------------------------------------------------------------- patches


def collect_patches(activations, m: int) -> np.ndarray:
    """Every valid m^3 window of every sample, flattened channel-fastest.

    ``activations`` is a ``(B, d, h, w, c)`` array or a list of ``(d, h, w, c)``
    / ``(d, h, w)`` volumes.
    """
    x = _batch(activations)
    if m % 2 == 0 or m < 1:
        raise ValueError("patch edge must be odd")
    if m > min(x.shape[1:4]):
        raise ValueError(f"patch edge {m} exceeds spatial extent {x.shape[1:4]}")
    return np.ascontiguousarray(im2col(x, m))


def _batch(activations) -> np.ndarray:
    if isinstance(activations, np.ndarray):
        x = activations
        if x.ndim == 3:
            x = x[None]
    else:
        x = np.stack([getattr(a, "values", a) for a in activations])
    if x.ndim == 4:
        x = x[..., None]
    return x


def _stage1(raw: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Drop zero rows, normalize, drop rows with variance < epsilon."""
    raw = np.asarray(raw)
    nz = np.any(raw != 0, axis=1)
    x = raw[nz].astype(np.float64)
    if len(x) == 0:
        return np.zeros((0, raw.shape[1]), DTYPE), np.zeros(0)
    x /= np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    var = row_variances(x)
    keep = var >= epsilon
    return x[keep].astype(DTYPE), var[keep]


def _stage2(patches: np.ndarray, var: np.ndarray, cfg: ScreeningConfig) -> np.ndarray:
    n = len(patches)
    if n == 0:
        raise EmptyCandidateError("no patch survives the variance floor")
    keep_n = max(1, int(round(n * cfg.top_percent / 100.0)))
    order = np.argsort(-var, kind="stable")[:keep_n]
    order.sort()
    out = patches[order]
    if len(out) > cfg.max_samples:
        rng = np.random.default_rng(cfg.seed)
        pick = np.sort(rng.choice(len(out), size=cfg.max_samples, replace=False))
        out = out[pick]
    return out


def screen_patches(raw: np.ndarray, cfg: ScreeningConfig, layer: int = 1, edge: int = 3) -> PatchSet:
    """Two-stage saliency screening of raw patches.

    Zero patches are dropped and the rest normalized to unit length; stage one
    removes patches whose element variance is below ``epsilon``, stage two keeps
    the ``top_percent`` highest-variance survivors; a uniform subsample caps the
    result at ``max_samples``. Kept patches stay in input order.
    """
    if len(raw) == 0:
        raise EmptyCandidateError("no raw patches")
    patches, var = _stage1(raw, cfg.epsilon)
    return PatchSet(_stage2(patches, var, cfg), layer, edge)


def screen_stream(activations: np.ndarray, m: int, cfg: ScreeningConfig, layer: int = 1,
                  chunk: int = 8) -> PatchSet:
    """``screen_patches(collect_patches(activations, m))`` without holding every raw patch."""
    x = _batch(activations)
    parts, variances = [], []
    for i in range(0, len(x), chunk):
        p, v = _stage1(collect_patches(x[i:i + chunk], m), cfg.epsilon)
        parts.append(p)
        variances.append(v)
    patches = np.concatenate(parts) if parts else np.zeros((0, m ** 3 * x.shape[4]), DTYPE)
    var = np.concatenate(variances) if variances else np.zeros(0)
    return PatchSet(_stage2(patches, var, cfg), layer, m)


# ----------------------------------------------------------------------- k-means


def _sq_dist(x: np.ndarray, x_sq: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _kmeanspp(x: np.ndarray, x_sq: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding by inverse-CDF draws (one uniform per centre)."""
    n = len(x)
    idx = [min(int(rng.random() * n), n - 1)]
    closest = _sq_dist(x, x_sq, x[idx[-1]][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centre
            cand = np.flatnonzero(~np.isin(np.arange(n), idx))
            idx.append(int(cand[0]))
        else:
            cdf = np.cumsum(closest)
            j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            idx.append(min(j, n - 1))
        closest = np.minimum(closest, _sq_dist(x, x_sq, x[idx[-1]][None])[:, 0])
    return x[idx].copy()


def _lloyd(x, x_sq, centroids, max_iter):
    n, k = len(x), len(centroids)
    assign = np.full(n, -1)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dist(x, x_sq, centroids)
        new = np.argmin(d, axis=1)
        dist = d[np.arange(n), new]
        sizes = np.bincount(new, minlength=k)
        for e in np.flatnonzero(sizes == 0):
            # re-seed an empty cluster with the point farthest from its centre,
            # taken from a cluster that keeps at least one member
            movable = sizes[new] > 1
            far = int(np.argmax(np.where(movable, dist, -1.0)))
            sizes[new[far]] -= 1
            new[far] = e
            sizes[e] = 1
            centroids[e] = x[far]
            dist[far] = 0.0
        history.append(float(dist.sum()))
        if np.array_equal(new, assign):
            converged = True
            break
        assign = new
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        centroids = sums / np.bincount(assign, minlength=k)[:, None]
    if not converged:
        d = _sq_dist(x, x_sq, centroids)
        assign = np.argmin(d, axis=1)
    return centroids, assign, converged, it, history


def kmeans(patches, k: int, seed: int = 0, restarts: int = 3, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeded Lloyd iterations; best of ``restarts`` by within-cluster SS."""
    x = np.asarray(getattr(patches, "patches", patches), dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"K={k} must be between 1 and the sample count {n}")
    x_sq = np.einsum("ij,ij->i", x, x)
    best = None
    for seq in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(seq)
        c0 = _kmeanspp(x, x_sq, k, rng)
        cent, assign, conv, it, hist = _lloyd(x, x_sq, c0, max_iter)
        wcss = float(_sq_dist(x, x_sq, cent)[np.arange(n), assign].sum())
        if best is None or wcss < best.wcss:
            best = KMeansResult(cent, assign, np.bincount(assign, minlength=k), conv, it, wcss, hist)
    return best


# --------------------------------------------------------------------------- BIC


def bic_score(result: KMeansResult, patches, normalize_by: Optional[float] = None) -> float:
    """``-2 * sum_k L_k + 2 K C log N`` with Gaussian cluster log-likelihoods.

    ``L_k = -(N_k / 2) * sum_c log(var_c + var_ck)`` where ``var_c`` is the
    population variance of feature ``c`` over all patches and ``var_ck`` the
    same inside cluster ``k``; both are floored at 1e-8. The score is divided
    by ``normalize_by`` (defaults to ``edge**3`` for a PatchSet).
    """
    x = np.asarray(getattr(patches, "patches", patches), dtype=np.float64)
    n, c = x.shape
    k = len(result.centroids)
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    loglik = 0.0
    for j in range(k):
        members = x[result.assignments == j]
        nk = len(members)
        if nk == 0:
            continue
        cvar = np.maximum(members.var(axis=0), VARIANCE_FLOOR)
        loglik += -0.5 * nk * float(np.sum(np.log(global_var + cvar)))
    score = -2.0 * loglik + 2.0 * k * c * math.log(n)
    if normalize_by is None:
        normalize_by = float(getattr(patches, "edge", 1)) ** 3
    return score / normalize_by


def detect_valley(ks: Sequence[int], scores: Sequence[float]) -> Tuple[int, str]:
    """First local minimum of a BIC curve.

    A point is a local minimum when it is strictly below every neighbour it
    has; minima at either end are flagged ``"boundary"``. A curve with no
    strict local minimum (flat stretches) falls back to its first argmin,
    also flagged ``"boundary"``.
    """
    if len(ks) < 2:
        raise ValueError("need at least two scanned K values")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("K values must be strictly increasing")
    s = list(scores)
    last = len(s) - 1
    for i, v in enumerate(s):
        left = i == 0 or v < s[i - 1]
        right = i == last or v < s[i + 1]
        if left and right:
            return ks[i], ("interior" if 0 < i < last else "boundary")
    return ks[int(np.argmin(s))], "boundary"


def bic_curve(patches: PatchSet, ks: Sequence[int], seed: int = 0, restarts: int = 3,
              max_iter: int = 100) -> Tuple[BicCurve, Dict[int, KMeansResult]]:
    usable = [k for k in ks if k <= len(patches)]
    if len(usable) < 2:
        raise EmptyCandidateError(f"only {len(patches)} patches for K grid {list(ks)}")
    results, scores = {}, []
    for k in usable:
        res = kmeans(patches, k, seed=seed, restarts=restarts, max_iter=max_iter)
        results[k] = res
        scores.append(bic_score(res, patches))
    valley, flag = detect_valley(usable, scores)
    return BicCurve(patches.edge, list(usable), scores, valley, flag), results


# ------------------------------------------------------------------------ design


def propagate(x: np.ndarray, filters: np.ndarray, m: int) -> np.ndarray:
    """Correlate with ``filters`` (rows), rectify, 2x2x2 max pool."""
    out = []
    for i in range(0, len(x), 16):
        xb = x[i:i + 16]
        b, d, h, w, _ = xb.shape
        z = (im2col(xb, m) @ filters.T.astype(DTYPE)).reshape(b, d - m + 1, h - m + 1, w - m + 1, -1)
        np.maximum(z, 0, out=z)
        out.append(maxpool_forward(z)[0])
    return np.concatenate(out)


def _feasible(size: int, edges: Sequence[int], layers_left: int) -> bool:
    if layers_left == 0:
        return size >= 1
    for m in edges:
        out = size - m + 1
        if out >= 2 and out % 2 == 0 and _feasible(out // 2, edges, layers_left - 1):
            return True
    return False


def design_network(grids, edges: Sequence[int] = CONV_EDGES,
                   k_grids: Sequence[Sequence[int]] = (CONV_K_GRID, CONV_K_GRID),
                   fc_grid: Sequence[int] = FC_K_GRID,
                   cfg: Optional[ScreeningConfig] = None,
                   fc_cfg: Optional[ScreeningConfig] = None,
                   restarts: int = 3, max_iter: int = 100, log=None,
                   fc_epsilon: Optional[float] = None) -> DesignResult:
    """Greedy layer-by-layer choice of (edge, count) for each conv layer and the FC count.

    ``k_grids`` holds one K grid per conv layer (its length fixes the number of
    conv layers). Edges that would leave the remaining layers without a valid
    conv/pool schedule are skipped.

    A unit vector of dimension n has element variance at most 1/n, so a fixed
    variance floor empties the screened set once n is large. Unless
    ``fc_epsilon`` is given, the FC-layer floor is ``fc_cfg.epsilon * 27 / n``:
    the same fraction of the attainable maximum that ``epsilon`` is for a
    single-channel 3^3 patch.
    """
    cfg = cfg or ScreeningConfig()
    fc_cfg = fc_cfg or cfg
    x = _batch(grids).astype(DTYPE)
    n_layers = len(k_grids)
    chosen, centroid_sets, all_curves, notes = [], [], [], []
    for j, ks in enumerate(k_grids, 1):
        size = x.shape[1]
        layer_cfg = ScreeningConfig(cfg.epsilon, cfg.top_percent, cfg.max_samples, cfg.seed + j)
        cands = []
        for m in edges:
            out = size - m + 1
            if out < 2 or out % 2 or not _feasible(out // 2, edges, n_layers - j):
                continue
            cands.append((m, screen_stream(x, m, layer_cfg, layer=j)))
        if not cands:
            raise SpecError(f"no valid filter edge for conv layer {j} at spatial size {size}")
        # hold N fixed across edges
        n_common = min(len(p) for _, p in cands)
        rng = np.random.default_rng(layer_cfg.seed)
        curves, fits = [], {}
        for m, p in cands:
            if len(p) > n_common:
                p = PatchSet(p.patches[np.sort(rng.choice(len(p), n_common, replace=False))], j, m)
            curve, results = bic_curve(p, ks, seed=layer_cfg.seed, restarts=restarts, max_iter=max_iter)
            curves.append(curve)
            fits[m] = results
            if log:
                log(f"conv{j} edge {m}: N={len(p)} valley K={curve.valley} ({curve.flag})")
        best = min(curves, key=lambda c: (c.valley_score, c.edge))
        m, k = best.edge, best.valley
        chosen.append((m, k))
        centroid_sets.append(fits[m][k].centroids.astype(DTYPE))
        all_curves.append(curves)
        x = propagate(x, centroid_sets[-1], m)

    flat = x.reshape(len(x), -1)
    if fc_epsilon is None:
        fc_epsilon = fc_cfg.epsilon * 27 / flat.shape[1]
        notes.append(f"fc variance floor scaled to {fc_epsilon:.3g} for dimension {flat.shape[1]}")
    fc_patches = screen_patches(flat, ScreeningConfig(fc_epsilon, fc_cfg.top_percent,
                                                      fc_cfg.max_samples, fc_cfg.seed + n_layers + 1),
                                layer=n_layers + 1, edge=x.shape[1])
    fc_curve, _ = bic_curve(fc_patches, fc_grid, seed=cfg.seed + n_layers + 1, restarts=restarts,
                            max_iter=max_iter)
    if len(fc_curve.ks) < len(fc_grid):
        notes.append(f"fc grid truncated to K <= {len(fc_patches)} screened samples")
    if log:
        log(f"fc: N={len(fc_patches)} valley K={fc_curve.valley} ({fc_curve.flag})")
    return DesignResult(chosen, fc_curve.valley, centroid_sets, all_curves, fc_curve, cfg, notes)
