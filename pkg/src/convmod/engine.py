"""Dense CNN forward pass and SGD trainer for desk-scale models.

Weights and activations are float32; every dot product accumulates in
float64 before casting back, so results are reproducible across BLAS
builds to well below the 1e-5 tolerances used by the test oracles.

Layer semantics: ReLU follows every conv and every hidden fc layer; the
final fc emits raw logits. A residual pair adds the source conv layer's
post-ReLU output to the dest conv layer's pre-activation output, and the
dest ReLU is applied after the addition. There is no normalization layer
of any kind, which keeps channel zero-masking exactly equivalent to
physically removing channels in sequential models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import (
    ConvLayer,
    FcLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelSpec,
    WeightStore,
    conv_weight_names,
    fc_weight_names,
    expected_weight_shapes,
    infer_shapes,
)


class EngineError(Exception):
    pass


class DimensionMismatch(EngineError):
    pass


class TrainingDiverged(EngineError):
    pass


@dataclass(frozen=True)
class ConvLayerWeights:
    """One conv layer's parameters: kernels (C_out, C_in, K, K) and bias (C_out,)."""

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise DimensionMismatch(
                f"kernels must be 4-d (C_out, C_in, K, K), got {self.kernels.shape}"
            )
        c_out = self.kernels.shape[0]
        if self.bias.shape != (c_out,):
            raise DimensionMismatch(
                f"bias shape {self.bias.shape} does not match C_out={c_out}"
            )
        if self.kernels.shape[2] != self.kernels.shape[3]:
            raise DimensionMismatch(f"kernels must be square, got {self.kernels.shape}")
        if self.stride < 1 or self.padding < 0:
            raise EngineError(f"bad stride={self.stride} / padding={self.padding}")


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = False
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise EngineError("learning_rate must be >= 0")
        if not (0 <= self.momentum < 1):
            raise EngineError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise EngineError("weight_decay must be >= 0")
        if not (0 <= self.dropout_rate < 1):
            raise EngineError("dropout_rate must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise EngineError("epochs and batch_size must be positive")


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionMismatch(f"expected {ndim}-d or {ndim + 1}-d input, got {x.ndim}-d")


def _conv2d_raw(x64: np.ndarray, k64: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct convolution via the kernel-offset sum, float64 in and out.

    x64: (B, C_in, H, W); k64: (C_out, C_in, K, K).
    """
    b, c_in, h, w = x64.shape
    c_out, _, k, _ = k64.shape
    if padding:
        x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    # out accumulated channel-first over batch to avoid a transpose per offset
    out = np.zeros((c_out, b, h_out, w_out), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            patch = x64[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride]
            # (C_out, C_in) . (B, C_in, H', W') -> (C_out, B, H', W')
            out += np.tensordot(k64[:, :, di, dj], patch, axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def conv2d_forward(x: np.ndarray, layer: ConvLayerWeights) -> np.ndarray:
    """2-d convolution of (C_in, H, W) or (B, C_in, H, W) input."""
    xb, single = _batched(np.asarray(x), 3)
    c_out, c_in, k, _ = layer.kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionMismatch(
            f"input has {xb.shape[1]} channels, kernels expect {c_in}"
        )
    hp = xb.shape[2] + 2 * layer.padding
    wp = xb.shape[3] + 2 * layer.padding
    if k > hp or k > wp:
        raise DimensionMismatch(
            f"kernel {k}x{k} exceeds padded input {hp}x{wp}"
        )
    out = _conv2d_raw(xb.astype(np.float64), layer.kernels.astype(np.float64),
                      layer.stride, layer.padding)
    out += layer.bias.astype(np.float64)[:, None, None]
    out32 = out.astype(np.float32)
    return out32[0] if single else out32


def maxpool2d(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Per-channel window maxima of (C, H, W) or (B, C, H, W) input."""
    xb, single = _batched(np.asarray(x), 3)
    b, c, h, w = xb.shape
    if window > h or window > w:
        raise DimensionMismatch(f"pool window {window} exceeds input {h}x{w}")
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    out = np.full((b, c, h_out, w_out), -np.inf, dtype=xb.dtype)
    for di in range(window):
        for dj in range(window):
            patch = xb[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride]
            np.maximum(out, patch, out=out)
    return out[0] if single else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map W.x + b for (D,) or (B, D) input."""
    xb, single = _batched(np.asarray(x), 1)
    d_out, d_in = weights.shape
    if xb.shape[1] != d_in:
        raise DimensionMismatch(
            f"input has {xb.shape[1]} features, weights expect {d_in}"
        )
    out = xb.astype(np.float64) @ weights.astype(np.float64).T
    out += bias.astype(np.float64)
    out32 = out.astype(np.float32)
    return out32[0] if single else out32


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax over the last axis."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


# ---------------------------------------------------------------------------
# Whole-model forward
# ---------------------------------------------------------------------------

def _layer_weights(spec: ModelSpec, weights: WeightStore):
    """Materialize per-layer weight views in layer order."""
    out = []
    conv_ord = 0
    fc_ord = 0
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            kname, bname = conv_weight_names(conv_ord)
            out.append(ConvLayerWeights(weights.get(kname), weights.get(bname),
                                        layer.stride, layer.padding))
            conv_ord += 1
        elif isinstance(layer, FcLayer):
            wname, bname = fc_weight_names(fc_ord)
            out.append((weights.get(wname), weights.get(bname)))
            fc_ord += 1
        else:
            out.append(None)
    return out


def model_forward_batch(
    spec: ModelSpec,
    weights: WeightStore,
    x: np.ndarray,
    channel_masks: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Logits (B, N) for a batch (B, C, H, W).

    ``channel_masks`` maps conv ordinal -> boolean keep-vector of length
    C_out; masked-out channels have their post-activation maps forced to
    zero, which (absent normalization layers) is exactly equivalent to
    removing those kernels in sequential models.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise DimensionMismatch(f"expected (B, C, H, W) input, got shape {x.shape}")
    if x.shape[1:] != spec.input_dims:
        raise DimensionMismatch(
            f"input dims {x.shape[1:]} do not match spec input {spec.input_dims}"
        )
    per_layer = _layer_weights(spec, weights)
    dest_sources = spec.residual_dest_sources()
    n_fc = sum(isinstance(l, FcLayer) for l in spec.layers)

    conv_acts: dict[int, np.ndarray] = {}
    conv_ord = 0
    fc_seen = 0
    cur = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            z = conv2d_forward(cur, per_layer[i])
            src = dest_sources.get(conv_ord)
            if src is not None:
                skip = conv_acts[src]
                if skip.shape != z.shape:
                    raise DimensionMismatch(
                        f"residual pair (conv{src}, conv{conv_ord}): source output "
                        f"{skip.shape[1:]} does not match dest output {z.shape[1:]}"
                    )
                z = z + skip
            a = relu(z)
            if channel_masks and conv_ord in channel_masks:
                keep = np.asarray(channel_masks[conv_ord], dtype=bool)
                if keep.shape != (a.shape[1],):
                    raise DimensionMismatch(
                        f"mask for conv{conv_ord} has shape {keep.shape}, expected "
                        f"({a.shape[1]},)"
                    )
                a = a * keep[None, :, None, None]
            conv_acts[conv_ord] = a
            cur = a
            conv_ord += 1
        elif isinstance(layer, MaxPoolLayer):
            cur = maxpool2d(cur, layer.window, layer.stride)
        elif isinstance(layer, FlattenLayer):
            cur = cur.reshape(cur.shape[0], -1)
        else:
            w, b = per_layer[i]
            cur = fc_forward(cur, w, b)
            fc_seen += 1
            if fc_seen < n_fc:
                cur = relu(cur)
    return cur


def model_forward(
    spec: ModelSpec,
    weights: WeightStore,
    x: np.ndarray,
    channel_masks: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Logits (N,) for a single (C, H, W) input."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionMismatch(f"expected (C, H, W) input, got shape {x.shape}")
    return model_forward_batch(spec, weights, x[None], channel_masks)[0]


def activation_channel_sums(
    spec: ModelSpec, weights: WeightStore, x: np.ndarray
) -> list[np.ndarray]:
    """Per conv layer, the spatial sum of each post-activation map.

    Returns one (B, C_out) array per conv ordinal for a batch (B, C, H, W);
    this is the raw material for kernel importance scoring.
    """
    x = np.asarray(x, dtype=np.float32)
    per_layer = _layer_weights(spec, weights)
    dest_sources = spec.residual_dest_sources()
    sums: list[np.ndarray] = []
    conv_acts: dict[int, np.ndarray] = {}
    conv_ord = 0
    cur = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            z = conv2d_forward(cur, per_layer[i])
            src = dest_sources.get(conv_ord)
            if src is not None:
                z = z + conv_acts[src]
            a = relu(z)
            conv_acts[conv_ord] = a
            sums.append(a.astype(np.float64).sum(axis=(2, 3)))
            cur = a
            conv_ord += 1
        elif isinstance(layer, MaxPoolLayer):
            cur = maxpool2d(cur, layer.window, layer.stride)
        elif isinstance(layer, FlattenLayer):
            break
    return sums


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def init_weights(spec: ModelSpec, seed: int) -> WeightStore:
    """He-normal initialization, deterministic in ``seed``."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    store = WeightStore()
    for name, shape in expected_weight_shapes(spec).items():
        if name.endswith(".bias"):
            store.put(name, np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            store.put(name, rng.normal(0.0, std, size=shape).astype(np.float32))
    return store


def _train_forward(spec, per_layer, dest_sources, x, dropout_rate, rng, n_fc):
    """Forward pass caching everything backprop needs."""
    caches = []
    conv_acts: dict[int, np.ndarray] = {}
    conv_ord = 0
    fc_seen = 0
    cur = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            lw = per_layer[i]
            z = conv2d_forward(cur, lw)
            src = dest_sources.get(conv_ord)
            if src is not None:
                z = z + conv_acts[src]
            a = relu(z)
            caches.append(("conv", cur, z, conv_ord, src, lw))
            conv_acts[conv_ord] = a
            cur = a
            conv_ord += 1
        elif isinstance(layer, MaxPoolLayer):
            out = maxpool2d(cur, layer.window, layer.stride)
            caches.append(("pool", cur, out, layer.window, layer.stride))
            cur = out
        elif isinstance(layer, FlattenLayer):
            caches.append(("flatten", cur.shape))
            cur = cur.reshape(cur.shape[0], -1)
        else:
            w, b = per_layer[i]
            z = fc_forward(cur, w, b)
            fc_seen += 1
            hidden = fc_seen < n_fc
            if hidden:
                a = relu(z)
                if dropout_rate > 0:
                    mask = (rng.random(a.shape) >= dropout_rate).astype(np.float32)
                    mask /= (1.0 - dropout_rate)
                    a = a * mask
                else:
                    mask = None
            else:
                a, mask = z, None
            caches.append(("fc", cur, z, mask, hidden, i, w))
            cur = a
    return cur, caches


def _conv_backward(dz, x, lw: ConvLayerWeights):
    """Gradients of a conv layer given upstream dz (B, C_out, H', W')."""
    k = lw.kernels.shape[2]
    stride, padding = lw.stride, lw.padding
    x64 = x.astype(np.float64)
    if padding:
        x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dz64 = dz.astype(np.float64)
    b, c_out, h_out, w_out = dz64.shape
    dw = np.zeros(lw.kernels.shape, dtype=np.float64)
    dxp = np.zeros_like(x64)
    k64 = lw.kernels.astype(np.float64)
    for di in range(k):
        for dj in range(k):
            patch = x64[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride]
            dw[:, :, di, dj] = np.tensordot(dz64, patch, axes=([0, 2, 3], [0, 2, 3]))
            grad = np.tensordot(k64[:, :, di, dj], dz64, axes=([0], [1]))  # (C_in, B, H', W')
            dxp[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride] += (
                grad.transpose(1, 0, 2, 3)
            )
    db = dz64.sum(axis=(0, 2, 3))
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def _pool_backward(dz, x, out, window, stride):
    """Route gradient to the first max position per pooling window."""
    b, c, h_out, w_out = dz.shape
    dx = np.zeros_like(x, dtype=np.float64)
    claimed = np.zeros(dz.shape, dtype=bool)
    for di in range(window):
        for dj in range(window):
            sl_h = slice(di, di + stride * h_out, stride)
            sl_w = slice(dj, dj + stride * w_out, stride)
            is_max = (x[:, :, sl_h, sl_w] == out) & ~claimed
            claimed |= is_max
            np.add.at(dx, (slice(None), slice(None), sl_h, sl_w),
                      np.where(is_max, dz, 0.0))
    return dx


def sgd_train(
    spec: ModelSpec,
    weights: WeightStore,
    dataset,
    cfg: TrainConfig,
) -> tuple[WeightStore, list[dict]]:
    """Mini-batch SGD with momentum; returns (new store, per-epoch history).

    History entries carry ``epoch``, mean cross-entropy ``loss`` and
    ``accuracy`` measured on the (possibly augmented) training batches.
    Deterministic given cfg.seed; raises TrainingDiverged on NaN loss.
    """
    if len(dataset) == 0:
        raise EngineError("cannot train on an empty dataset")
    if dataset.labels.max() >= spec.num_classes:
        raise EngineError(
            f"dataset labels reach {dataset.labels.max()} but model has "
            f"{spec.num_classes} classes"
        )
    infer_shapes(spec)
    store = weights.copy()
    velocity = {name: np.zeros_like(arr) for name, arr in store.entries.items()}
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    n_fc = sum(isinstance(l, FcLayer) for l in spec.layers)
    dest_sources = spec.residual_dest_sources()
    fc_positions = [i for i, l in enumerate(spec.layers) if isinstance(l, FcLayer)]
    fc_ord_of_pos = {pos: o for o, pos in enumerate(fc_positions)}

    history: list[dict] = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if cfg.augment:
                flips = rng.random(len(idx)) < 0.5
                xb = xb.copy()
                xb[flips] = xb[flips, :, :, ::-1]

            per_layer = _layer_weights(spec, store)
            logits, caches = _train_forward(
                spec, per_layer, dest_sources, xb, cfg.dropout_rate, rng, n_fc
            )
            probs = softmax(logits).astype(np.float64)
            batch = len(idx)
            eps = 1e-12
            loss = -np.log(probs[np.arange(batch), yb] + eps).mean()
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"NaN/Inf loss at epoch {epoch}, batch offset {start}; "
                    f"reduce learning_rate ({cfg.learning_rate})"
                )
            total_loss += loss * batch
            total_correct += int((logits.argmax(axis=1) == yb).sum())

            dz = probs
            dz[np.arange(batch), yb] -= 1.0
            dz /= batch
            grads = _backward(spec, caches, dz, fc_ord_of_pos)
            _apply_sgd(store, velocity, grads, cfg)
        history.append({
            "epoch": epoch,
            "loss": float(total_loss / n),
            "accuracy": float(total_correct / n),
        })
    return store, history


def _backward(spec, caches, dz, fc_ord_of_pos):
    grads: dict[str, np.ndarray] = {}
    # gradients flowing into each conv layer's post-activation output
    pending_act_grads: dict[int, np.ndarray] = {}
    grad = dz
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "fc":
            _, x, z, mask, hidden, pos, w = cache
            if hidden:
                if mask is not None:
                    grad = grad * mask
                grad = grad * (z > 0)
            wname, bname = fc_weight_names(fc_ord_of_pos[pos])
            g64 = grad.astype(np.float64)
            grads[wname] = g64.T @ x.astype(np.float64)
            grads[bname] = g64.sum(axis=0)
            grad = g64 @ w.astype(np.float64)
        elif kind == "flatten":
            (_, shape) = cache
            grad = grad.reshape(shape)
        elif kind == "pool":
            _, x, out, window, stride = cache
            grad = _pool_backward(grad, x, out, window, stride)
        else:  # conv
            _, x, z, conv_ord, src, lw = cache
            extra = pending_act_grads.pop(conv_ord, None)
            if extra is not None:
                grad = grad + extra
            grad = grad * (z > 0)
            if src is not None:
                # the skip branch receives the same post-ReLU gradient
                prev = pending_act_grads.get(src)
                pending_act_grads[src] = grad if prev is None else prev + grad
            dx, dw, db = _conv_backward(grad, x, lw)
            kname, bname = conv_weight_names(conv_ord)
            grads[kname] = dw
            grads[bname] = db
            grad = dx
    return grads


def _apply_sgd(store: WeightStore, velocity, grads, cfg: TrainConfig) -> None:
    for name, g in grads.items():
        w = store.entries[name]
        g32 = g.astype(np.float32)
        if cfg.weight_decay > 0 and not name.endswith(".bias"):
            g32 = g32 + np.float32(cfg.weight_decay) * w
        v = velocity[name]
        v *= np.float32(cfg.momentum)
        v += g32
        store.entries[name] = w - np.float32(cfg.learning_rate) * v


def evaluate_accuracy(
    spec: ModelSpec,
    weights: WeightStore,
    dataset,
    batch_size: int = 256,
    channel_masks: dict[int, np.ndarray] | None = None,
) -> float:
    """Fraction of dataset samples whose argmax logit matches the label."""
    if len(dataset) == 0:
        raise EngineError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        logits = model_forward_batch(spec, weights, xb, channel_masks)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(dataset)
