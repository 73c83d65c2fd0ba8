"""Property-based checks of invariants that must hold for any input."""
import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import cf_loops, recount, rle_pairs
from vcnn.cli import compute_metrics
from vcnn.confusion import (ConfusionSetPartition, ScoreMatrix, affinity_from_cf, confusion_factor_matrix,
                            spectral_cluster)
from vcnn.design import detect_valley
from vcnn.ingest import read_binvox, write_binvox
from vcnn.network import maxpool_forward, softmax
from vcnn.refine import feature_variance, hierarchical_split
from vcnn.voxelcore import VoxelGrid, l2_normalize

SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def labelled_scores(draw):
    c = draw(st.integers(2, 6))
    extra = draw(st.lists(st.integers(0, c - 1), max_size=20))
    y = np.array(list(range(c)) + extra)
    logits = draw(arrays(np.float64, (len(y), c), elements=st.floats(-5, 5)))
    return softmax(logits), y, c


@SETTINGS
@given(labelled_scores())
def test_cf_symmetric_bounded_and_matches_loops(data):
    s, y, c = data
    cf = confusion_factor_matrix(ScoreMatrix(s, y))
    assert np.array_equal(cf, cf.T)
    assert np.all(cf >= 0) and np.all(cf <= 1)
    assert np.all(np.diag(cf) == 0)
    np.testing.assert_allclose(cf, cf_loops(s, y, c), atol=1e-12)


@SETTINGS
@given(labelled_scores(), st.integers(0, 5))
def test_spectral_partition_covers_every_class_once(data, seed):
    s, y, c = data
    part = spectral_cluster(confusion_factor_matrix(ScoreMatrix(s, y)), seed=seed)
    members = sorted(m for cs in part.sets for m in cs.members)
    assert members == list(range(c))
    assert part.covers(c)
    assert ConfusionSetPartition.from_text(part.to_text()).to_text() == part.to_text()


@SETTINGS
@given(st.integers(2, 6).flatmap(lambda c: arrays(np.float64, (c, c), elements=st.floats(0, 1))))
def test_affinity_symmetric_with_row_max_diagonal(m):
    cf = (m + m.T) / 2
    np.fill_diagonal(cf, 0)
    a = affinity_from_cf(cf)
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) >= a.max(axis=1) - 1e-15)


@SETTINGS
@given(st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7)).flatmap(
    lambda d: arrays(np.uint8, d, elements=st.integers(0, 1))))
def test_binvox_round_trip_and_rle(v):
    grid = VoxelGrid(v.astype(np.float32))
    data = write_binvox(grid)
    back = read_binvox(data)
    assert back.dims == grid.dims and np.array_equal(back.values, grid.values)
    body = data[data.index(b"data\n") + 5:]
    assert [tuple(body[i:i + 2]) for i in range(0, len(body), 2)] == rle_pairs(v.ravel())


@SETTINGS
@given(st.integers(3, 40), st.integers(1, 4), st.floats(0.02, 0.8), st.integers(1, 6), st.integers(0, 100))
def test_hierarchical_split_terminates_with_law_of_total_variance(n, d, frac, eta, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)) * rng.uniform(0.1, 4, size=d)
    zeta = frac * feature_variance(x) + 1e-12
    root = hierarchical_split(x, rng.integers(0, 3, n), zeta, eta, seed=seed)
    leaves = root.leaves()
    assert sorted(np.concatenate([l.members for l in leaves]).tolist()) == list(range(n))
    for node in root.walk():
        if node.is_leaf:
            assert node.variance < zeta or len(node.members) <= eta
        else:
            a, b = node.children
            within = (len(a.members) * a.variance + len(b.members) * b.variance) / len(node.members)
            between = sum(len(c.members) * np.sum((c.centroid - node.centroid) ** 2) for c in (a, b))
            total = within + between / len(node.members)
            assert abs(total - node.variance) <= 1e-6 * max(1.0, node.variance)


@SETTINGS
@given(st.integers(2, 6).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.integers(0, c - 1), min_size=1, max_size=40),
    st.lists(st.integers(0, c - 1), min_size=40, max_size=40))))
def test_metrics_match_recount(data):
    c, extra, preds = data
    y = np.array(list(range(c)) + extra)
    p = np.array(preds[:len(y)] + [0] * max(0, len(y) - len(preds)))
    m = compute_metrics(p, y, c)
    aca, aia = recount(p, y, c)
    assert abs(m.aca - aca) < 1e-12 and abs(m.aia - aia) < 1e-12
    assert 0 <= m.aca <= 1 and 0 <= m.aia <= 1


@SETTINGS
@given(arrays(np.float32, (1, 4, 4, 2, 3), elements=st.sampled_from([0.0, 0.5, 1.0, -1.0])))
def test_maxpool_value_is_block_max(y):
    out, _ = maxpool_forward(y)
    ref = y.reshape(1, 2, 2, 2, 2, 1, 2, 3).max(axis=(2, 4, 6))
    np.testing.assert_array_equal(out, ref)


@SETTINGS
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm(v):
    if np.linalg.norm(v) < 1e-6:
        return
    assert abs(np.linalg.norm(l2_normalize(v)) - 1) < 1e-6


@SETTINGS
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12))
def test_valley_is_strict_local_minimum_or_boundary(scores):
    ks = list(range(1, len(scores) + 1))
    k, kind = detect_valley(ks, scores)
    i = ks.index(k)
    if kind == "interior":
        assert scores[i] < scores[i - 1] and scores[i] < scores[i + 1]
        # it is the first such point
        for j in range(1, i):
            assert not (scores[j] < scores[j - 1] and scores[j] < scores[j + 1])
    else:
        assert kind == "boundary"
