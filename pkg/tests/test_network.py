import numpy as np
import pytest

from oracles import conv3d_loops, maxpool_loops
from vcnn.network import (CheckpointError, DivergenceError, LayerSpec, NetworkSpec, NetworkWeights,
                          SpecError, TrainConfig, checkpoint_bytes, checkpoint_from_bytes, conv3d,
                          extract_features, forward, gradient_check, init_weights, load_checkpoint,
                          loss_and_grad, maxpool_backward, maxpool_forward, pool_choice_index,
                          predict_probs, save_checkpoint, reference_spec, train, voxnet_spec,
                          zero_weights)


def tiny_spec(res=8, classes=3):
    return NetworkSpec(res, [LayerSpec("conv3", 2, 3, True), LayerSpec("fc", 4),
                             LayerSpec("output", classes)], classes)


def micro_spec():
    # conv -> pool -> conv -> pool -> fc -> output, the smallest input that pools twice
    return NetworkSpec(10, [LayerSpec("conv3", 2, 3, True), LayerSpec("conv3", 2, 3, True),
                            LayerSpec("fc", 4), LayerSpec("output", 3)], 3)


def test_reference_schedule_arithmetic():
    spec = reference_spec(40)
    assert spec.size_trace() == [30, 28, 14, 12, 6]
    assert spec.spatial_sizes() == [30, 14, 6]
    assert spec.fc_input_shape() == (6, 128)
    assert spec.feature_dim == 1024
    with pytest.raises(SpecError):
        reference_spec(40, input_resolution=31).validate()


def test_voxnet_spec_valid():
    voxnet_spec(10).validate()


@pytest.mark.parametrize("layers", [
    [LayerSpec("conv3", 2, 3, True), LayerSpec("output", 3)],
    [LayerSpec("fc", 4), LayerSpec("output", 2)],
])
def test_spec_rejects_bad_layer_lists(layers):
    with pytest.raises(SpecError):
        NetworkSpec(8, layers, 3).validate()


@pytest.mark.parametrize("kwargs", [dict(kind="conv3", count=2, size=4), dict(kind="conv3", count=0, size=3),
                                    dict(kind="pool", count=1)])
def test_layerspec_validation(kwargs):
    with pytest.raises(SpecError):
        LayerSpec(**kwargs)


def test_spec_dict_round_trip():
    s = micro_spec()
    assert NetworkSpec.from_dict(s.to_dict()) == s


def test_conv_matches_loops():
    rng = np.random.default_rng(0)
    for c in (1, 3):
        x = rng.standard_normal((2, 6, 7, 5, c)).astype(np.float32)
        w = rng.standard_normal((27 * c, 4)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        np.testing.assert_allclose(conv3d(x, w, b, 3), conv3d_loops(x, w, b, 3), rtol=1e-4, atol=1e-4)


def test_one_hot_kernel_returns_shifted_crop():
    x = np.random.default_rng(1).random((1, 5, 5, 5, 1)).astype(np.float32)
    w = np.zeros((27, 1), np.float32)
    w[13, 0] = 1.0  # kernel centre
    out = conv3d(x, w, np.zeros(1, np.float32), 3)
    np.testing.assert_array_equal(out[0, ..., 0], x[0, 1:4, 1:4, 1:4, 0])


def test_maxpool_matches_loops_including_ties():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, size=(2, 4, 6, 4, 3)).astype(np.float32)  # many ties
    out, route = maxpool_forward(y)
    ref, choice = maxpool_loops(y)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(pool_choice_index(route), choice)
    # the gradient lands only on the chosen element
    g = rng.standard_normal(out.shape).astype(np.float32)
    back = maxpool_backward(g, route)
    expect = np.zeros_like(y)
    for idx in np.ndindex(out.shape):
        s, z, yy, x, k = idx
        dz, dy, dx = np.unravel_index(choice[idx], (2, 2, 2))
        expect[s, 2 * z + dz, 2 * yy + dy, 2 * x + dx, k] = g[idx]
    np.testing.assert_array_equal(back, expect)


def test_zero_network_is_uniform():
    spec = tiny_spec()
    w = zero_weights(spec)
    x = np.random.default_rng(0).random((3, 8, 8, 8))
    acts, probs = forward(spec, w, x)
    assert all(np.all(a == 0) for a in acts)
    np.testing.assert_allclose(probs, 1 / 3)
    loss, _ = loss_and_grad(spec, w, x, [0, 1, 2])
    assert loss == pytest.approx(np.log(3))


def test_weight_decay_term():
    spec = tiny_spec()
    w = init_weights(spec, 0)
    x = np.random.default_rng(0).random((2, 8, 8, 8))
    l0, _ = loss_and_grad(spec, w, x, [0, 1])
    l1, _ = loss_and_grad(spec, w, x, [0, 1], weight_decay=0.1)
    sq = sum(float(np.sum(wt.astype(np.float64) ** 2)) for wt, _ in w.params)
    assert l1 - l0 == pytest.approx(0.05 * sq, rel=1e-6)


def test_confident_correct_prediction_has_near_zero_loss():
    spec = tiny_spec()
    w = zero_weights(spec)
    w.params[-1][1][:] = [50.0, 0.0, 0.0]
    loss, _ = loss_and_grad(spec, w, np.zeros((1, 8, 8, 8)), [0])
    assert loss < 1e-20


def test_gradient_check_tiny_and_micro():
    assert gradient_check(tiny_spec(), seed=0)[0] < 1e-3
    assert gradient_check(micro_spec(), seed=0)[0] < 1e-3


def test_gradient_check_zero_network_bias_gradients():
    spec = tiny_spec()
    err, analytic, numeric = gradient_check(spec, seed=3, weights=zero_weights(spec))
    for (_, ab), (_, nb) in zip(analytic, numeric):
        np.testing.assert_allclose(ab, nb, atol=1e-4)


def test_gradient_check_catches_corrupted_backward():
    def broken(spec, weights, x, y, wd):
        loss, grads = loss_and_grad(spec, weights, x, y, wd)
        return loss, [(gw * 1.5, gb) for gw, gb in grads]

    assert gradient_check(micro_spec(), seed=0, grad_fn=broken)[0] > 1e-1


def toy_set(n=20, res=8):
    x = np.zeros((n, res, res, res), np.float32)
    y = np.arange(n) % 2
    x[y == 1, : res // 2] = 1.0  # solid lower half vs empty
    return x, y


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separable_toy_set_is_learned(seed):
    spec = NetworkSpec(8, [LayerSpec("conv3", 4, 3, True), LayerSpec("fc", 8), LayerSpec("output", 2)], 2)
    x, y = toy_set()
    w, hist = train(spec, init_weights(spec, seed), x, y, TrainConfig(epochs=20, batch_size=4, seed=seed))
    assert np.all(predict_probs(spec, w, x).argmax(1) == y)
    assert hist[-1] < hist[0]


def test_zero_learning_rate_keeps_weights():
    spec = tiny_spec(classes=2)
    x, y = toy_set()
    w0 = init_weights(spec, 0)
    w, hist = train(spec, w0, x, y, TrainConfig(learning_rate=0.0, epochs=3, batch_size=5))
    for (a, b), (c, d) in zip(w.params, w0.params):
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)
    assert hist[0] == pytest.approx(hist[-1], rel=1e-6)


def test_training_is_deterministic():
    spec = tiny_spec(classes=2)
    x, y = toy_set()
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    a, _ = train(spec, init_weights(spec, 1), x, y, cfg)
    b, _ = train(spec, init_weights(spec, 1), x, y, cfg)
    assert checkpoint_bytes(spec, a) == checkpoint_bytes(spec, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    spec = tiny_spec(classes=2)
    x, y = toy_set()
    w = init_weights(spec, 0)
    w.params[-1][0][:] = np.inf
    with pytest.raises(DivergenceError):
        loss_and_grad(spec, w, x, y)


def test_features_shape_and_sign():
    spec = micro_spec()
    w = init_weights(spec, 0)
    x = np.random.default_rng(0).random((5, 10, 10, 10))
    f = extract_features(spec, w, x)
    assert f.shape == (5, 4) and np.all(f >= 0)
    np.testing.assert_array_equal(f, extract_features(spec, w, x))
    p = predict_probs(spec, w, x)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)


def test_input_shape_mismatch():
    with pytest.raises(SpecError):
        forward(tiny_spec(), init_weights(tiny_spec()), np.zeros((1, 9, 9, 9)))


def test_init_with_centroids():
    spec = tiny_spec()
    cent = np.random.default_rng(0).standard_normal((2, 27))
    w = init_weights(spec, 0, [cent], filter_scale=0.1)
    np.testing.assert_allclose(np.linalg.norm(w.params[0][0], axis=0), 0.1, rtol=1e-6)
    with pytest.raises(SpecError):
        init_weights(spec, 0, [cent[:, :8]])


def test_checkpoint_round_trip(tmp_path):
    spec = micro_spec()
    w = init_weights(spec, 3)
    save_checkpoint(spec, w, tmp_path / "c.vcnn")
    spec2, w2 = load_checkpoint(tmp_path / "c.vcnn")
    assert spec2 == spec
    assert checkpoint_bytes(spec2, w2) == checkpoint_bytes(spec, w)


def test_checkpoint_errors():
    spec = micro_spec()
    data = checkpoint_bytes(spec, init_weights(spec, 0))
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(checkpoint_bytes(spec, init_weights(spec, 0), version=2))


def test_weights_check_rejects_nonfinite():
    spec = tiny_spec()
    w = init_weights(spec)
    w.params[0][0][0, 0] = np.nan
    with pytest.raises(SpecError):
        w.check(spec)


def test_momentum_zero_step_is_plain_gradient_descent():
    spec = tiny_spec(classes=2)
    x, y = toy_set(4)
    w0 = init_weights(spec, 2)
    cfg = TrainConfig(learning_rate=0.05, momentum=0.0, batch_size=4, epochs=1, weight_decay=1e-3, seed=0)
    w1, _ = train(spec, w0, x, y, cfg)
    order = np.random.default_rng(0).permutation(4)  # the shuffle train() draws
    _, grads = loss_and_grad(spec, w0, x[order], y[order], 1e-3)
    for (a, b), (w, bias), (gw, gb) in zip(w1.params, w0.params, grads):
        np.testing.assert_array_equal(a, (w - 0.05 * gw).astype(np.float32))
        np.testing.assert_array_equal(b, (bias - 0.05 * gb).astype(np.float32))
