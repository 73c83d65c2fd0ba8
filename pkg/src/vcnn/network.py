"""Volumetric CNN: valid 3-D convolutions with 2x2x2 max pooling, one FC layer, softmax output.

Activations are batched Tensor4 arrays of shape ``(B, d, h, w, c)``. Conv
filters are stored as ``(m**3 * c_in, k)`` matrices whose rows follow the
Tensor4 order of a patch (channel fastest, then x, y, z), so a flattened patch
times the filter matrix is the correlation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .voxelcore import DTYPE

CHECKPOINT_MAGIC = b"VCNN"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str  # "conv3" | "fc" | "output"
    count: int
    size: int = 0  # cubic filter edge, conv only
    pool: bool = False  # 2x2x2 max pool after the conv

    def __post_init__(self):
        if self.kind not in ("conv3", "fc", "output"):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.count < 1:
            raise SpecError("filter count must be >= 1")
        if self.kind == "conv3" and (self.size < 3 or self.size % 2 == 0):
            raise SpecError(f"conv filter edge must be odd and >= 3, got {self.size}")
        if self.kind != "conv3" and self.pool:
            raise SpecError("only conv layers can be followed by pooling")


@dataclass
class NetworkSpec:
    input_resolution: int
    layers: List[LayerSpec]
    class_count: int
    input_channels: int = 1

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.validate()

    def validate(self):
        kinds = [l.kind for l in self.layers]
        n_conv = kinds.count("conv3")
        if kinds[:n_conv] != ["conv3"] * n_conv or kinds[n_conv:] != ["fc", "output"]:
            raise SpecError("layer order must be conv3* fc output")
        if self.layers[-1].count != self.class_count:
            raise SpecError("output layer count must equal class count")
        self.spatial_sizes()

    def spatial_sizes(self) -> List[int]:
        """Spatial edge after the input and after every conv (+pool) stage."""
        size = self.input_resolution
        if size < 1:
            raise SpecError("input resolution must be positive")
        sizes = [size]
        for l in self.layers:
            if l.kind != "conv3":
                break
            size = size - l.size + 1
            if size < 1:
                raise SpecError(f"conv {l.size}^3 does not fit a {sizes[-1]}^3 input")
            if l.pool:
                if size % 2:
                    raise SpecError(f"cannot pool odd spatial size {size}")
                size //= 2
            sizes.append(size)
        return sizes

    def size_trace(self) -> List[int]:
        """Spatial edge after the input and after every individual conv and pool."""
        sizes = [self.input_resolution]
        for l in self.layers:
            if l.kind != "conv3":
                break
            sizes.append(sizes[-1] - l.size + 1)
            if l.pool:
                sizes.append(sizes[-1] // 2)
        self.spatial_sizes()  # raises on an invalid schedule
        return sizes

    def channels(self) -> List[int]:
        ch = [self.input_channels]
        for l in self.layers:
            if l.kind == "conv3":
                ch.append(l.count)
        return ch

    def fc_input_shape(self) -> Tuple[int, int]:
        """``(edge, channels)`` of the volume flattened into the FC layer."""
        return self.spatial_sizes()[-1], self.channels()[-1]

    def param_shapes(self) -> List[Tuple[Tuple[int, int], Tuple[int]]]:
        shapes = []
        c_in = self.input_channels
        edge, _ = self.fc_input_shape()
        prev = None
        for l in self.layers:
            if l.kind == "conv3":
                shapes.append(((l.size ** 3 * c_in, l.count), (l.count,)))
                c_in = l.count
            elif l.kind == "fc":
                shapes.append(((edge ** 3 * c_in, l.count), (l.count,)))
            else:
                shapes.append(((prev, l.count), (l.count,)))
            prev = l.count
        return shapes

    @property
    def feature_dim(self) -> int:
        return self.layers[-2].count

    def to_dict(self) -> dict:
        return {
            "input_resolution": self.input_resolution,
            "input_channels": self.input_channels,
            "class_count": self.class_count,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["input_resolution"], [LayerSpec(**l) for l in d["layers"]],
                   d["class_count"], d.get("input_channels", 1))


def reference_spec(class_count: int = 40, input_resolution: int = 30) -> NetworkSpec:
    """The VCNN schedule: conv 3^3 x 256, conv 3^3 x 128, FC 1024, both convs pooled."""
    return NetworkSpec(input_resolution, [
        LayerSpec("conv3", 256, 3, True),
        LayerSpec("conv3", 128, 3, True),
        LayerSpec("fc", 1024),
        LayerSpec("output", class_count),
    ], class_count)


def voxnet_spec(class_count: int = 40, input_resolution: int = 30) -> NetworkSpec:
    """Baseline row of the parameter comparison table (conv 5^3 x 32, conv 3^3 x 32, FC 128)."""
    return NetworkSpec(input_resolution, [
        LayerSpec("conv3", 32, 5, False),
        LayerSpec("conv3", 32, 3, True),
        LayerSpec("fc", 128),
        LayerSpec("output", class_count),
    ], class_count)


# ----------------------------------------------------------------------- weights


@dataclass
class NetworkWeights:
    """Per-layer ``(W, b)`` pairs; ``W`` is ``(fan_in, count)``."""

    params: List[Tuple[np.ndarray, np.ndarray]]

    def copy(self) -> "NetworkWeights":
        return NetworkWeights([(w.copy(), b.copy()) for w, b in self.params])

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights([(w.astype(dtype), b.astype(dtype)) for w, b in self.params])

    def flat(self) -> List[np.ndarray]:
        return [a for pair in self.params for a in pair]

    def check(self, spec: NetworkSpec):
        for (w, b), (ws, bs) in zip(self.params, spec.param_shapes()):
            if w.shape != ws or b.shape != bs:
                raise SpecError(f"weight shape {w.shape}/{b.shape} != {ws}/{bs}")
        if len(self.params) != len(spec.layers):
            raise SpecError("weight count does not match layer count")
        if not all(np.all(np.isfinite(a)) for a in self.flat()):
            raise SpecError("weights must be finite")

    @property
    def sav(self) -> np.ndarray:
        """Output-layer weights; column k is the anchor vector of class k."""
        return self.params[-1][0]


def init_weights(spec: NetworkSpec, seed: int = 0,
                 conv_filters: Optional[Sequence[Optional[np.ndarray]]] = None,
                 filter_scale: float = 0.1) -> NetworkWeights:
    """He-normal init; conv layers take design centroids (rows) when given.

    Centroid filters are scaled to unit norm times ``filter_scale``.
    """
    rng = np.random.default_rng(seed)
    params = []
    conv_i = 0
    for l, (ws, bs) in zip(spec.layers, spec.param_shapes()):
        src = None
        if l.kind == "conv3":
            if conv_filters is not None and conv_i < len(conv_filters):
                src = conv_filters[conv_i]
            conv_i += 1
        if src is not None:
            c = np.asarray(src, dtype=np.float64)
            if c.shape != (ws[1], ws[0]):
                raise SpecError(f"centroid shape {c.shape} does not match filters {(ws[1], ws[0])}")
            norms = np.linalg.norm(c, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            w = (c / norms * filter_scale).T
        else:
            w = rng.standard_normal(ws) * np.sqrt(2.0 / ws[0])
        params.append((np.ascontiguousarray(w, dtype=DTYPE), np.zeros(bs, dtype=DTYPE)))
    return NetworkWeights(params)


def zero_weights(spec: NetworkSpec) -> NetworkWeights:
    return NetworkWeights([(np.zeros(ws, DTYPE), np.zeros(bs, DTYPE)) for ws, bs in spec.param_shapes()])


# ------------------------------------------------------------------ layer kernels


def im2col(x: np.ndarray, m: int) -> np.ndarray:
    """All valid m^3 windows of a ``(B, d, h, w, c)`` batch as rows of ``(B*P, m^3*c)``."""
    b, d, h, w, c = x.shape
    if c == 1:
        # single channel: fill one contiguous row per offset, return the transposed view
        do, ho, wo = d - m + 1, h - m + 1, w - m + 1
        ct = np.empty((m ** 3, b, do, ho, wo), dtype=x.dtype)
        off = 0
        for dz in range(m):
            for dy in range(m):
                for dx in range(m):
                    ct[off] = x[:, dz:dz + do, dy:dy + ho, dx:dx + wo, 0]
                    off += 1
        return ct.reshape(m ** 3, -1).T
    win = sliding_window_view(x, (m, m, m), axis=(1, 2, 3))  # (B, d', h', w', c, m, m, m)
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    b, d, h, w = win.shape[:4]
    return win.reshape(b * d * h * w, -1)


def col2im_matmul(g2: np.ndarray, w: np.ndarray, in_shape, m: int) -> np.ndarray:
    """Input gradient of a conv: scatter ``g2 @ w.T`` back over the m^3 window offsets."""
    b, d, h, wd, c = in_shape
    do, ho, wo = d - m + 1, h - m + 1, wd - m + 1
    k = w.shape[1]
    g2 = g2.reshape(-1, k)
    out = np.zeros(in_shape, dtype=g2.dtype)
    off = 0
    for dz in range(m):
        for dy in range(m):
            for dx in range(m):
                part = g2 @ w[off * c:(off + 1) * c].T
                out[:, dz:dz + do, dy:dy + ho, dx:dx + wo, :] += part.reshape(b, do, ho, wo, c)
                off += 1
    return out


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, m: int) -> np.ndarray:
    bsz, d, h, wd, _ = x.shape
    out = im2col(x, m) @ w + b
    return out.reshape(bsz, d - m + 1, h - m + 1, wd - m + 1, w.shape[1])


def maxpool_forward(y: np.ndarray):
    """2x2x2 max pooling.

    Returns the pooled volume and the routing choices ``(ax, ay, az)``. The
    reduction runs over x, then y, then z and keeps the lower index on ties,
    which selects the first maximal position in z, y, x scan order.
    """
    b, d, h, w, c = y.shape
    y8 = y.reshape(b, d // 2, 2, h // 2, 2, w // 2, 2, c)
    ax = y8[..., 1, :] > y8[..., 0, :]
    mx = np.maximum(y8[..., 0, :], y8[..., 1, :])  # (b, d2, 2, h2, 2, w2, c)
    ay = mx[:, :, :, :, 1] > mx[:, :, :, :, 0]
    my = np.maximum(mx[:, :, :, :, 0], mx[:, :, :, :, 1])  # (b, d2, 2, h2, w2, c)
    az = my[:, :, 1] > my[:, :, 0]
    out = np.maximum(my[:, :, 0], my[:, :, 1])
    return out, (ax, ay, az)


def pool_choice_index(route) -> np.ndarray:
    """Block offset (0..7, z-major) selected for every pooled output."""
    ax, ay, az = route
    azi = az.astype(np.int64)
    ay_sel = np.where(az, ay[:, :, 1], ay[:, :, 0])  # (b, d2, h2, w2, c)
    ax_z = np.where(az[:, :, :, None], ax[:, :, 1], ax[:, :, 0])  # (b, d2, h2, 2, w2, c)
    ax_sel = np.where(ay_sel, ax_z[:, :, :, 1], ax_z[:, :, :, 0])
    return 4 * azi + 2 * ay_sel.astype(np.int64) + ax_sel.astype(np.int64)


def maxpool_backward(grad: np.ndarray, route) -> np.ndarray:
    ax, ay, az = route
    b, d2, h2, w2, c = grad.shape
    sel_z = np.stack([~az, az], axis=2)[:, :, :, :, None, :, None, :]
    sel_y = np.stack([~ay, ay], axis=4)[:, :, :, :, :, :, None, :]
    sel_x = np.stack([~ax, ax], axis=6)
    mask = sel_z & sel_y & sel_x  # (b, d2, 2, h2, 2, w2, 2, c)
    g = grad[:, :, None, :, None, :, None, :] * mask
    return g.reshape(b, d2 * 2, h2 * 2, w2 * 2, c)


def softmax(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(np.float64)
    z64 -= z64.max(axis=1, keepdims=True)
    e = np.exp(z64)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ forward/back


def _as_batch(spec: NetworkSpec, grids) -> np.ndarray:
    if isinstance(grids, np.ndarray):
        x = grids
    else:
        x = np.stack([getattr(g, "values", g) for g in grids])
    if x.ndim == 4:
        x = x[..., None]
    r = spec.input_resolution
    if x.shape[1:] != (r, r, r, spec.input_channels):
        raise SpecError(f"input shape {x.shape[1:]} does not match {(r, r, r, spec.input_channels)}")
    return x


def forward(spec: NetworkSpec, weights: NetworkWeights, grids, keep_cache: bool = False):
    """Run the network on a batch.

    Returns ``(activations, probabilities)``: the post-ReLU (post-pool for
    pooled convs) output of every hidden layer, and the ``(B, C)`` softmax.
    With ``keep_cache`` a third element holds what :func:`backward` needs.
    """
    x = _as_batch(spec, grids)
    dtype = weights.params[0][0].dtype
    a = x.astype(dtype, copy=False)
    acts, cache = [], []
    for l, (w, b) in zip(spec.layers, weights.params):
        if l.kind == "conv3":
            cols = im2col(a, l.size)
            z = (cols @ w + b).reshape(a.shape[0], *(s - l.size + 1 for s in a.shape[1:4]), l.count)
            mask = z > 0
            y = z * mask
            arg = None
            if l.pool:
                y, arg = maxpool_forward(y)
            if keep_cache:
                cache.append((cols, a.shape, mask, arg))
            a = y
            acts.append(a)
        elif l.kind == "fc":
            flat = a.reshape(a.shape[0], -1)
            z = flat @ w + b
            mask = z > 0
            if keep_cache:
                cache.append((flat, a.shape, mask, None))
            a = z * mask
            acts.append(a)
        else:
            if keep_cache:
                cache.append((a, a.shape, None, None))
            logits = a @ w + b
            probs = softmax(logits)
    if keep_cache:
        return acts, probs, cache
    return acts, probs


def backward(spec: NetworkSpec, weights: NetworkWeights, cache, dlogits: np.ndarray):
    """Backpropagate ``dL/dlogits``; returns per-layer ``(dW, db)``."""
    grads = [None] * len(spec.layers)
    g = dlogits.astype(weights.params[0][0].dtype)
    for i in range(len(spec.layers) - 1, -1, -1):
        l = spec.layers[i]
        w, _ = weights.params[i]
        inp, in_shape, mask, arg = cache[i]
        if l.kind == "output":
            grads[i] = (inp.T @ g, g.sum(axis=0))
            g = g @ w.T
        elif l.kind == "fc":
            g = g * mask
            grads[i] = (inp.T @ g, g.sum(axis=0))
            g = (g @ w.T).reshape(in_shape)
        else:
            if l.pool:
                g = maxpool_backward(g, arg)
            g = g * mask
            g2 = g.reshape(-1, l.count)
            grads[i] = (inp.T @ g2, g2.sum(axis=0))
            if i > 0:
                g = col2im_matmul(g2, w, in_shape, l.size)
    return grads


def loss_and_grad(spec: NetworkSpec, weights: NetworkWeights, grids, labels,
                  weight_decay: float = 0.0, epoch=None, batch=None):
    """Mean cross-entropy plus ``weight_decay/2 * sum(W**2)`` (biases excluded), and its gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= spec.class_count:
        raise ValueError("label out of range")
    _, probs, cache = forward(spec, weights, grids, keep_cache=True)
    n = labels.size
    picked = probs[np.arange(n), labels]
    with np.errstate(divide="ignore"):
        ce = -np.log(picked).sum(dtype=np.float64) / n
    decay = 0.0
    if weight_decay:
        decay = 0.5 * weight_decay * sum(float(np.sum(w.astype(np.float64) ** 2)) for w, _ in weights.params)
    loss = ce + decay
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at epoch {epoch} batch {batch}", epoch, batch)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads = backward(spec, weights, cache, dlogits)
    if weight_decay:
        grads = [(dw + weight_decay * w, db) for (dw, db), (w, _) in zip(grads, weights.params)]
    return float(loss), grads


# ---------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 40
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def train(spec: NetworkSpec, init: NetworkWeights, grids, labels, config: TrainConfig,
          log=None) -> Tuple[NetworkWeights, List[float]]:
    """Mini-batch SGD with momentum (``v = mu*v + g; w -= lr*v``).

    Returns the final weights and the per-epoch mean training loss.
    """
    x = _as_batch(spec, grids)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training set")
    weights = init.copy()
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights.params]
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    history = []
    for epoch in range(config.epochs):
        if epoch > 0 and config.lr_decay_every > 0 and epoch % config.lr_decay_every == 0:
            lr *= config.lr_decay
        order = rng.permutation(len(y))
        total = 0.0
        for bi, start in enumerate(range(0, len(y), config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(spec, weights, x[idx], y[idx], config.weight_decay,
                                        epoch=epoch, batch=bi)
            total += loss * len(idx)
            new_params, new_vel = [], []
            for (w, b), (vw, vb), (gw, gb) in zip(weights.params, velocity, grads):
                vw = config.momentum * vw + gw
                vb = config.momentum * vb + gb
                new_params.append(((w - lr * vw).astype(w.dtype), (b - lr * vb).astype(b.dtype)))
                new_vel.append((vw, vb))
            weights, velocity = NetworkWeights(new_params), new_vel
        history.append(total / len(y))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} loss {history[-1]:.4f} lr {lr:g}")
    return weights, history


def _batched(spec, weights, grids, fn, batch_size=64):
    x = _as_batch(spec, grids)
    out = [fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,))


def predict_probs(spec: NetworkSpec, weights: NetworkWeights, grids, batch_size: int = 64) -> np.ndarray:
    return _batched(spec, weights, grids, lambda xb: forward(spec, weights, xb)[1], batch_size)


def extract_features(spec: NetworkSpec, weights: NetworkWeights, grids, batch_size: int = 64) -> np.ndarray:
    """Post-ReLU activations of the FC layer, one row per sample."""
    return _batched(spec, weights, grids, lambda xb: forward(spec, weights, xb)[0][-1], batch_size)


# ---------------------------------------------------------------- gradient check


def gradient_check(spec: NetworkSpec, seed: int = 0, weights: Optional[NetworkWeights] = None,
                   batch_size: int = 4, step: float = 1e-5, dtype=np.float64,
                   weight_decay: float = 0.0, grad_fn=None, floor: float = 1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``relerr = |a - n| / max(|a|, |n|, floor)`` over every parameter. ``grad_fn``
    replaces the analytic gradient (used to inject a broken backward pass).
    Returns ``(max_relerr, analytic, numeric)``.
    """
    total = sum(int(np.prod(ws)) + int(np.prod(bs)) for ws, bs in spec.param_shapes())
    if total > 10_000:
        raise ValueError(f"network too large for a full gradient check ({total} params)")
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = init_weights(spec, seed)
        # nonzero biases keep ReLU kinks away from exact zero
        weights = NetworkWeights([(w, (rng.standard_normal(b.shape) * 0.1).astype(DTYPE))
                                  for w, b in weights.params])
    weights = weights.astype(dtype)
    r = spec.input_resolution
    x = rng.random((batch_size, r, r, r, spec.input_channels)).astype(dtype)
    y = rng.integers(0, spec.class_count, size=batch_size)

    fn = grad_fn or loss_and_grad
    _, analytic = fn(spec, weights, x, y, weight_decay)
    numeric = []
    worst = 0.0
    for li, (w, b) in enumerate(weights.params):
        pair = []
        for pi, arr in enumerate((w, b)):
            num = np.zeros(arr.shape, dtype=np.float64)
            flat = arr.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + step
                lp, _ = _loss_only(spec, weights, x, y, weight_decay)
                flat[j] = keep - step
                lm, _ = _loss_only(spec, weights, x, y, weight_decay)
                flat[j] = keep
                num.reshape(-1)[j] = (lp - lm) / (2 * step)
            a = np.asarray(analytic[li][pi], dtype=np.float64)
            err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            worst = max(worst, float(err.max()) if err.size else 0.0)
            pair.append(num)
        numeric.append(tuple(pair))
    return worst, analytic, numeric


def _loss_only(spec, weights, x, y, weight_decay):
    _, probs = forward(spec, weights, x)
    n = len(y)
    loss = -np.log(probs[np.arange(n), y]).sum() / n
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float(np.sum(w.astype(np.float64) ** 2)) for w, _ in weights.params)
    return float(loss), probs


# -------------------------------------------------------------------- checkpoint


def checkpoint_bytes(spec: NetworkSpec, weights: NetworkWeights, version: int = CHECKPOINT_VERSION) -> bytes:
    """``VCNN`` | u32 version | u32 len | spec JSON | per layer: W then b as little-endian f32."""
    weights.check(spec)
    meta = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", version, len(meta)), meta]
    for w, b in weights.params:
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Tuple[NetworkSpec, NetworkWeights]:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a VCNN checkpoint")
    version, n_meta = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader is {CHECKPOINT_VERSION})")
    pos = 12
    if pos + n_meta > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        spec = NetworkSpec.from_dict(json.loads(data[pos:pos + n_meta].decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt network spec: {exc}") from None
    pos += n_meta
    params = []
    for ws, bs in spec.param_shapes():
        arrs = []
        for shape in (ws, bs):
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > len(data):
                raise CheckpointError("truncated weight blob")
            arrs.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos)
                        .reshape(shape).astype(DTYPE))
            pos += nbytes
        params.append(tuple(arrs))
    if pos != len(data):
        raise CheckpointError("trailing bytes after weight blobs")
    return spec, NetworkWeights(params)


def save_checkpoint(spec: NetworkSpec, weights: NetworkWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(spec, weights))


def load_checkpoint(path) -> Tuple[NetworkSpec, NetworkWeights]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
