import math

import numpy as np
import pytest

from oracles import best_partition_wcss
from vcnn.design import (CONV_K_GRID, EmptyCandidateError, KMeansResult, PatchSet, ScreeningConfig,
                         bic_curve, bic_score, collect_patches, design_network, detect_valley,
                         kmeans, screen_patches, screen_stream)
from vcnn.ingest import SynthSpec, generate_synthetic_dataset


def blobs(g, seed, n_per=60, dim=8, sep=10.0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((g, dim)) * sep
    return PatchSet(np.concatenate([c + rng.standard_normal((n_per, dim)) for c in centers]), 1, 1)


def shapes(res):
    _, grids = generate_synthetic_dataset(SynthSpec(train_per_class=1, test_per_class=1,
                                                    resolution=res, seed=0))
    return np.stack([g.values for g in grids])


def test_patch_counts():
    grid = np.random.default_rng(0).random((30, 30, 30))
    p = collect_patches([grid], 3)
    assert p.shape == (28 ** 3, 27)
    assert collect_patches([grid, grid], 3).shape == (2 * 28 ** 3, 27)
    small = np.random.default_rng(1).random((3, 3, 3))
    np.testing.assert_array_equal(collect_patches([small], 3), small.reshape(1, 27))


def test_patch_order_is_channel_fastest():
    x = np.random.default_rng(2).random((1, 4, 4, 4, 2)).astype(np.float32)
    p = collect_patches(x, 3)
    np.testing.assert_array_equal(p[0], x[0, :3, :3, :3, :].ravel())


def test_patch_edge_validation():
    with pytest.raises(ValueError):
        collect_patches([np.zeros((4, 4, 4))], 5)
    with pytest.raises(ValueError):
        collect_patches([np.zeros((4, 4, 4))], 2)


def test_screening_drops_constant_and_zero_patches():
    raw = np.vstack([np.full((5, 27), 0.7), np.zeros((3, 27)), np.eye(27)[:4]])
    ps = screen_patches(raw, ScreeningConfig(epsilon=1e-4, top_percent=100))
    assert len(ps) == 4
    np.testing.assert_allclose(np.linalg.norm(ps.patches, axis=1), 1, rtol=1e-6)
    with pytest.raises(EmptyCandidateError):
        screen_patches(np.full((5, 27), 0.7), ScreeningConfig())


def test_top_percent_rank_selection():
    rng = np.random.default_rng(3)
    raw = rng.random((100, 27)) ** rng.uniform(0.5, 5, size=(100, 1))
    cfg = ScreeningConfig(epsilon=0.0, top_percent=20)
    kept = screen_patches(raw, cfg).patches.astype(np.float64)
    assert len(kept) == 20
    unit = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    var = unit.var(axis=1)
    kept_var = kept.var(axis=1)
    dropped = np.sort(var)[:80]
    assert kept_var.min() >= dropped.max() - 1e-7


def test_subsample_is_deterministic():
    raw = np.random.default_rng(4).random((20, 27))
    cfg = ScreeningConfig(epsilon=0.0, top_percent=100, max_samples=10, seed=9)
    a = screen_patches(raw, cfg).patches
    assert len(a) == 10
    np.testing.assert_array_equal(a, screen_patches(raw, cfg).patches)


def test_stream_equals_batch_screening():
    grids = np.random.default_rng(5).random((5, 8, 8, 8)) > 0.6
    cfg = ScreeningConfig(epsilon=1e-4, top_percent=30, max_samples=500)
    a = screen_stream(grids.astype(np.float32), 3, cfg, chunk=2).patches
    b = screen_patches(collect_patches(grids.astype(np.float32), 3), cfg).patches
    np.testing.assert_array_equal(a, b)


def test_screening_config_validation():
    for bad in (dict(epsilon=-1), dict(top_percent=0), dict(top_percent=101), dict(max_samples=0)):
        with pytest.raises(ValueError):
            ScreeningConfig(**bad)


def test_kmeans_square_corners_brute_force():
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    r = kmeans(pts, 2, seed=0)
    assert r.wcss == pytest.approx(1.0)
    assert r.wcss == pytest.approx(best_partition_wcss(pts, 2))
    mids = sorted(map(tuple, np.round(r.centroids, 9)))
    assert mids in ([(0.0, 0.5), (1.0, 0.5)], [(0.5, 0.0), (0.5, 1.0)])


def test_kmeans_against_brute_force_on_small_sets():
    rng = np.random.default_rng(6)
    for _ in range(10):
        pts = rng.standard_normal((7, 2))
        r = kmeans(pts, 3, seed=1, restarts=5)
        assert r.wcss <= best_partition_wcss(pts, 3) * 1.2 + 1e-9


def test_kmeans_k_equals_n():
    pts = np.random.default_rng(7).standard_normal((6, 3))
    r = kmeans(pts, 6, seed=0)
    assert r.wcss == pytest.approx(0.0, abs=1e-12)
    assert sorted(r.sizes.tolist()) == [1] * 6


def test_kmeans_duplicated_data_same_centroids():
    pts = blobs(3, 8, n_per=15).patches
    a = kmeans(pts, 3, seed=2)
    b = kmeans(np.repeat(pts, 2, axis=0), 3, seed=2)
    key = lambda c: sorted(map(tuple, np.round(c, 8)))  # noqa: E731
    assert key(a.centroids) == key(b.centroids)


def test_kmeans_wcss_history_monotone_and_no_empty_clusters():
    for seed in range(5):
        r = kmeans(blobs(4, seed).patches, 9, seed=seed)
        h = r.wcss_history
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))
        assert np.all(r.sizes > 0)


def test_kmeans_rejects_bad_k():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


def test_bic_k1_identity():
    x = blobs(2, 0).patches
    r = kmeans(x, 1)
    var = np.maximum(x.var(axis=0), 1e-8)
    l1 = -(len(x) / 2) * np.sum(np.log(2 * var))
    expect = -2 * l1 + 2 * 1 * x.shape[1] * math.log(len(x))
    assert bic_score(r, x, normalize_by=1.0) == pytest.approx(expect, rel=1e-12)


def test_bic_point_masses_prefer_two():
    x = np.vstack([np.zeros((5, 3)), np.full((5, 3), 4.0)])
    s1 = bic_score(kmeans(x, 1), x, normalize_by=1.0)
    r2 = kmeans(x, 2)
    s2 = bic_score(r2, x, normalize_by=1.0)
    assert s2 < s1
    assert np.all(r2.sizes == 5)


def test_bic_penalty_grows_with_k():
    x = blobs(2, 1).patches
    r = kmeans(x, 2)
    fake = KMeansResult(np.vstack([r.centroids, r.centroids]), r.assignments, r.sizes, True, 1, r.wcss)
    diff = bic_score(fake, x, normalize_by=1.0) - bic_score(r, x, normalize_by=1.0)
    assert diff == pytest.approx(2 * 2 * x.shape[1] * math.log(len(x)))


@pytest.mark.parametrize("scores,expected", [
    ([9, 5, 7, 8], (64, "interior")),
    ([9, 8, 7, 6], (256, "boundary")),
    ([1, 2, 3, 4], (32, "boundary")),
    ([5, 5, 5, 5], (32, "boundary")),
])
def test_detect_valley(scores, expected):
    assert detect_valley([32, 64, 128, 256], scores) == expected


def test_first_valley_rule():
    assert detect_valley([1, 2, 3, 4, 5], [5, 3, 4, 2, 6]) == (2, "interior")


def test_detect_valley_validation():
    with pytest.raises(ValueError):
        detect_valley([1], [0.0])
    with pytest.raises(ValueError):
        detect_valley([2, 1], [0.0, 1.0])


def test_bic_curve_finds_four_clusters():
    curve, results = bic_curve(blobs(4, 0), range(2, 13), seed=0)
    assert curve.valley == 4
    assert set(results) == set(range(2, 13))


def test_bic_curve_grid_cell_rule_on_table_grid():
    # G = 4 but the scanned grid starts at 32: valley at the smallest K, flagged boundary
    curve, _ = bic_curve(blobs(4, 1, n_per=60), [32, 64, 128], seed=0, max_iter=20)
    assert (curve.valley, curve.flag) == (32, "boundary")


def test_bic_curve_skips_k_beyond_n():
    curve, _ = bic_curve(PatchSet(np.random.default_rng(0).random((10, 4))), [2, 4, 8, 16])
    assert curve.ks == [2, 4, 8]


def test_design_network_small():
    grids = shapes(14)
    res = design_network(grids, edges=(3, 5), k_grids=((2, 4, 6), (2, 4)), fc_grid=(2, 3, 4),
                         cfg=ScreeningConfig(max_samples=400), restarts=1, max_iter=20)
    spec = res.network_spec(14, 5)
    spec.validate()
    assert len(res.curves) == 2 and len(res.curves[0]) >= 1
    assert res.centroids[0].shape[1] == res.conv[0][0] ** 3
    text = res.report()
    assert "conv1 edge=" in text and "K,score" in text


def test_design_curve_has_one_point_per_grid_k():
    grids = shapes(12)
    res = design_network(grids, edges=(3,), k_grids=((2, 3, 4, 5, 6, 7, 8),), fc_grid=(2, 3),
                         cfg=ScreeningConfig(top_percent=100, max_samples=300), restarts=1, max_iter=10)
    assert [len(c.ks) for c in res.curves[0]] == [7]
    assert CONV_K_GRID == (32, 64, 128, 256, 512, 768, 1024)
