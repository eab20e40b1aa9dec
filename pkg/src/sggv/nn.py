"""A small convolutional classifier with hand-written forward/backward.

The layer vocabulary is fixed (Conv, ReLU, MaxPool, Flatten, Dense) and all
learnable parameters live in one flat vector, so gradients come out as flat
vectors of the same length K and the optimizer never needs to know about
layer structure.  The backward pass is exact (verified against central
finite differences); there is no autograd.

Parameters default to float64 so that finite-difference checks resolve at
1e-4 relative error; float32 is available for speed.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigurationError, InputError, NumericalError


# ---------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Architecture:
    """Input spec + layer list + class count.

    Hashable and immutable so shape/layout computations can be cached.
    """

    height: int
    width: int
    channels: int
    layers: tuple
    num_classes: int


def default_architecture(num_classes, height=32, width=32, channels=3):
    """The desk-scale default: two conv/pool blocks and a linear head."""
    return Architecture(
        height=height,
        width=width,
        channels=channels,
        layers=(
            Conv(8, (3, 3), 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Conv(16, (3, 3), 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            Dense(num_classes),
        ),
        num_classes=num_classes,
    )


@lru_cache(maxsize=None)
def activation_shapes(arch):
    """Shapes flowing between layers, starting with the input image shape.

    3-d activations are (channels, height, width) tuples, flat ones (n,).
    Raises ConfigurationError when the chain does not check out.
    """
    if min(arch.height, arch.width, arch.channels, arch.num_classes) < 1:
        raise ConfigurationError("input spec and class count must be positive")
    shapes = [(arch.channels, arch.height, arch.width)]
    for li, layer in enumerate(arch.layers):
        cur = shapes[-1]
        if isinstance(layer, Conv):
            if len(cur) != 3:
                raise ConfigurationError(f"layer {li}: Conv needs a 3-d input, got {cur}")
            c, h, w = cur
            kh, kw = layer.kernel
            if layer.stride < 1 or layer.padding < 0 or min(kh, kw, layer.out_channels) < 1:
                raise ConfigurationError(f"layer {li}: bad Conv parameters")
            oh = (h + 2 * layer.padding - kh) // layer.stride + 1
            ow = (w + 2 * layer.padding - kw) // layer.stride + 1
            if oh < 1 or ow < 1 or h + 2 * layer.padding < kh or w + 2 * layer.padding < kw:
                raise ConfigurationError(f"layer {li}: Conv kernel larger than padded input")
            shapes.append((layer.out_channels, oh, ow))
        elif isinstance(layer, ReLU):
            shapes.append(cur)
        elif isinstance(layer, MaxPool):
            if len(cur) != 3:
                raise ConfigurationError(f"layer {li}: MaxPool needs a 3-d input, got {cur}")
            c, h, w = cur
            if layer.stride < 1 or layer.window < 1:
                raise ConfigurationError(f"layer {li}: bad MaxPool parameters")
            if h < layer.window or w < layer.window:
                raise ConfigurationError(f"layer {li}: MaxPool window larger than input")
            shapes.append((c, (h - layer.window) // layer.stride + 1,
                           (w - layer.window) // layer.stride + 1))
        elif isinstance(layer, Flatten):
            if len(cur) != 3:
                raise ConfigurationError(f"layer {li}: Flatten needs a 3-d input, got {cur}")
            shapes.append((int(np.prod(cur)),))
        elif isinstance(layer, Dense):
            if len(cur) != 1:
                raise ConfigurationError(f"layer {li}: Dense needs a flat input, got {cur}")
            if layer.out_features < 1:
                raise ConfigurationError(f"layer {li}: bad Dense width")
            shapes.append((layer.out_features,))
        else:
            raise ConfigurationError(f"layer {li}: unknown layer {layer!r}")
    if shapes[-1] != (arch.num_classes,):
        raise ConfigurationError(
            f"final output shape {shapes[-1]} does not equal the class count "
            f"({arch.num_classes},)")
    return tuple(shapes)


@lru_cache(maxsize=None)
def param_layout(arch):
    """(layer_index, name, offset, shape) for every parameter tensor, plus K."""
    shapes = activation_shapes(arch)
    entries = []
    offset = 0
    for li, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            in_c = shapes[li][0]
            kh, kw = layer.kernel
            wshape = (layer.out_channels, in_c, kh, kw)
            entries.append((li, "w", offset, wshape))
            offset += int(np.prod(wshape))
            entries.append((li, "b", offset, (layer.out_channels,)))
            offset += layer.out_channels
        elif isinstance(layer, Dense):
            in_f = shapes[li][0]
            wshape = (in_f, layer.out_features)
            entries.append((li, "w", offset, wshape))
            offset += int(np.prod(wshape))
            entries.append((li, "b", offset, (layer.out_features,)))
            offset += layer.out_features
    return tuple(entries), offset


def param_count(arch):
    return param_layout(arch)[1]


def unflatten(arch, flat):
    """Per-layer views into the flat vector: {(layer_index, name): tensor}.

    The views share memory with ``flat``; flatten/unflatten round-trips are
    therefore bit-exact by construction.
    """
    entries, total = param_layout(arch)
    if flat.shape != (total,):
        raise InputError(f"expected a flat vector of length {total}, got {flat.shape}")
    return {(li, name): flat[off:off + int(np.prod(shape))].reshape(shape)
            for li, name, off, shape in entries}


# ---------------------------------------------------------------------------
# model state


@dataclass
class ModelState:
    """Flat parameters plus Adam moment buffers and the step counter."""

    arch: Architecture
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @property
    def k(self):
        return self.params.shape[0]

    @property
    def dtype(self):
        return self.params.dtype

    def copy(self):
        return ModelState(self.arch, self.params.copy(), self.m.copy(),
                          self.v.copy(), self.t)


def init_params(arch, seed, dtype=np.float64):
    """He-style fan-in uniform init: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
    biases zero.  The draw order is fixed, so (arch, seed) is reproducible."""
    entries, total = param_layout(arch)  # validates the architecture
    rng = np.random.default_rng(seed)
    flat = np.zeros(total, dtype=np.float64)
    for li, name, off, shape in entries:
        if name != "w":
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        limit = np.sqrt(6.0 / fan_in)
        n = int(np.prod(shape))
        flat[off:off + n] = rng.uniform(-limit, limit, size=n)
    flat = flat.astype(dtype)
    return ModelState(arch, flat, np.zeros(total, dtype=dtype),
                      np.zeros(total, dtype=dtype), 0)


# ---------------------------------------------------------------------------
# forward / backward


def forward(state, images):
    """Run the network; returns (logits, caches).

    ``caches`` holds everything backward needs.  Pure with respect to
    ``state``: the same (state, images) always produces identical logits.
    """
    arch = state.arch
    if images.ndim != 4 or images.shape[1:] != (arch.channels, arch.height, arch.width):
        raise InputError(
            f"batch shape {images.shape} does not match architecture input "
            f"(B, {arch.channels}, {arch.height}, {arch.width})")
    tensors = unflatten(arch, state.params)
    x = images.astype(state.dtype, copy=False)
    caches = []
    for li, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            xp = kernels.pad_input(x, layer.padding)
            caches.append(("conv", li, xp))
            x = kernels.conv2d_fwd_padded(xp, tensors[(li, "w")],
                                          tensors[(li, "b")], layer.stride)
        elif isinstance(layer, ReLU):
            mask = x > 0
            caches.append(("relu", li, mask))
            x = x * mask
        elif isinstance(layer, MaxPool):
            h, w = x.shape[2], x.shape[3]
            x, idx = kernels.maxpool_fwd(x, layer.window, layer.stride)
            caches.append(("pool", li, (idx, h, w)))
        elif isinstance(layer, Flatten):
            caches.append(("flatten", li, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            caches.append(("dense", li, x))
            x = x @ tensors[(li, "w")] + tensors[(li, "b")]
    return x, caches


def _softmax_xent(logits, labels, bounds):
    """Group-mean cross-entropies and d(loss)/d(logits) for integer labels.

    ``bounds`` lists contiguous (lo, hi) row groups; each group's loss is
    the mean over its rows, and its dlogits rows are scaled by 1/group
    size, so every group independently gets the gradient of its own mean.
    """
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    per_row = -(z[rows, labels] - np.log(denom[:, 0]))
    dlogits = ez / denom
    dlogits[rows, labels] -= 1.0
    losses = []
    for lo, hi in bounds:
        losses.append(float(per_row[lo:hi].mean()))
        dlogits[lo:hi] /= hi - lo
    return losses, dlogits


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InputError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels out of range [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def loss_and_grad_groups(state, images, labels, group_sizes):
    """Per-group mean losses and gradients from one stacked batch.

    ``images`` holds the groups' rows concatenated in order; each group is
    treated as its own mini-batch (mean loss reduction), but the network
    runs forward/backward once for the whole stack, which is substantially
    faster than one pass per group.  Returns (losses, grads) with ``grads``
    of shape (num_groups, K); row g is bit-identical to running the plain
    single-batch path on group g alone.
    """
    arch = state.arch
    labels = _check_labels(labels, arch.num_classes)
    if labels.shape[0] != images.shape[0]:
        raise InputError("images and labels disagree on batch size")
    bounds = []
    lo = 0
    for size in group_sizes:
        if size < 1:
            raise InputError("group sizes must be positive")
        bounds.append((lo, lo + size))
        lo += size
    if lo != images.shape[0]:
        raise InputError(f"group sizes sum to {lo}, batch has {images.shape[0]}")
    n_groups = len(bounds)

    logits, caches = forward(state, images)
    losses, dx = _softmax_xent(logits, labels, bounds)
    if not all(np.isfinite(v) for v in losses):
        raise NumericalError(f"non-finite loss in {losses!r}")
    tensors = unflatten(arch, state.params)
    grads = np.zeros((n_groups, state.k), dtype=state.dtype)
    gtensors = [unflatten(arch, grads[g]) for g in range(n_groups)]
    for ci in range(len(caches) - 1, -1, -1):
        kind, li, cache = caches[ci]
        layer = arch.layers[li]
        if kind == "dense":
            x = cache
            for g, (glo, ghi) in enumerate(bounds):
                gtensors[g][(li, "w")][...] = x[glo:ghi].T @ dx[glo:ghi]
                gtensors[g][(li, "b")][...] = dx[glo:ghi].sum(axis=0)
            dx = dx @ tensors[(li, "w")].T
        elif kind == "flatten":
            dx = dx.reshape(cache)
        elif kind == "pool":
            idx, h, w = cache
            dx = kernels.maxpool_bwd(dx, idx, h, w)
        elif kind == "relu":
            dx = dx * cache
        elif kind == "conv":
            xp = cache
            dxn, dwp, dbp = kernels.conv2d_bwd_padded(
                xp, tensors[(li, "w")], layer.stride, layer.padding, dx,
                need_dx=ci > 0)
            for g, (glo, ghi) in enumerate(bounds):
                gtensors[g][(li, "w")][...] = kernels.reduce_rows(dwp, glo, ghi)
                gtensors[g][(li, "b")][...] = kernels.reduce_rows(dbp, glo, ghi)
            dx = dxn
    if not np.isfinite(grads).all():
        raise NumericalError("non-finite entries in the gradient")
    return losses, grads


def loss_and_grad(state, images, labels):
    """Mean softmax cross-entropy over the batch and its full flat gradient.

    The mean reduction makes the gradient magnitude independent of batch
    size, so per-domain gradients stay comparable across unequal batches.
    """
    losses, grads = loss_and_grad_groups(state, images, labels,
                                         (images.shape[0],))
    return losses[0], grads[0]


def loss_only(state, images, labels):
    """Forward pass + loss, no gradient (used by the finite-difference oracle
    and by evaluation)."""
    labels = _check_labels(labels, state.arch.num_classes)
    logits, _ = forward(state, images)
    losses, _ = _softmax_xent(logits, labels, ((0, images.shape[0]),))
    return losses[0]


def finite_diff_grad(state, images, labels, epsilon=1e-5):
    """Central-difference gradient oracle: (L(p+eps*e_k) - L(p-eps*e_k)) / 2eps.

    O(K) forward passes; intended for K up to a couple thousand.
    """
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    probe = state.copy()
    grad = np.zeros(state.k, dtype=np.float64)
    p = probe.params
    for k in range(state.k):
        orig = p[k]
        p[k] = orig + epsilon
        lp = loss_only(probe, images, labels)
        p[k] = orig - epsilon
        lm = loss_only(probe, images, labels)
        p[k] = orig
        grad[k] = (lp - lm) / (2.0 * epsilon)
    return grad


# ---------------------------------------------------------------------------
# optimizer


def adam_step(state, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """One Adam update with bias correction, in place; returns ``state``.

    Weight decay is classic Adam-with-L2: g <- g + wd * params before the
    moment updates.
    """
    if grad.shape != state.params.shape:
        raise InputError(f"gradient length {grad.shape} != K {state.params.shape}")
    if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
        raise InputError("invalid Adam hyperparameters")
    g = grad.astype(state.dtype, copy=False)
    if weight_decay:
        g = g + weight_decay * state.params
    state.m *= beta1
    state.m += (1 - beta1) * g
    state.v *= beta2
    state.v += (1 - beta2) * (g * g)
    state.t += 1
    bc1 = 1 - beta1 ** state.t
    bc2 = 1 - beta2 ** state.t
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    state.params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# canonical architecture string (used by checkpoints and config files)


def format_arch(arch):
    """Canonical one-line descriptor, e.g.
    ``in:3x32x32;conv:8:3x3:1:1;relu;pool:2:2;flatten;dense:3;classes:3``."""
    parts = [f"in:{arch.channels}x{arch.height}x{arch.width}"]
    for layer in arch.layers:
        if isinstance(layer, Conv):
            kh, kw = layer.kernel
            parts.append(f"conv:{layer.out_channels}:{kh}x{kw}:{layer.stride}:{layer.padding}")
        elif isinstance(layer, ReLU):
            parts.append("relu")
        elif isinstance(layer, MaxPool):
            parts.append(f"pool:{layer.window}:{layer.stride}")
        elif isinstance(layer, Flatten):
            parts.append("flatten")
        elif isinstance(layer, Dense):
            parts.append(f"dense:{layer.out_features}")
    parts.append(f"classes:{arch.num_classes}")
    return ";".join(parts)


def parse_arch(text):
    """Inverse of :func:`format_arch`; raises ConfigurationError on junk."""
    parts = [p.strip() for p in text.strip().split(";") if p.strip()]
    if len(parts) < 2 or not parts[0].startswith("in:") or not parts[-1].startswith("classes:"):
        raise ConfigurationError(f"malformed architecture string {text!r}")
    try:
        c, h, w = (int(v) for v in parts[0][3:].split("x"))
        num_classes = int(parts[-1].split(":")[1])
        layers = []
        for p in parts[1:-1]:
            fields = p.split(":")
            if fields[0] == "conv":
                kh, kw = (int(v) for v in fields[2].split("x"))
                layers.append(Conv(int(fields[1]), (kh, kw), int(fields[3]), int(fields[4])))
            elif fields[0] == "relu":
                layers.append(ReLU())
            elif fields[0] == "pool":
                layers.append(MaxPool(int(fields[1]), int(fields[2])))
            elif fields[0] == "flatten":
                layers.append(Flatten())
            elif fields[0] == "dense":
                layers.append(Dense(int(fields[1])))
            else:
                raise ValueError(fields[0])
    except (ValueError, IndexError) as exc:
        raise ConfigurationError(f"malformed architecture string {text!r}") from exc
    arch = Architecture(height=h, width=w, channels=c,
                        layers=tuple(layers), num_classes=num_classes)
    activation_shapes(arch)
    return arch


def with_dtype(state, dtype):
    """Copy of the model state cast to ``dtype`` (no-op when it matches)."""
    if state.dtype == np.dtype(dtype):
        return state
    return ModelState(state.arch, state.params.astype(dtype),
                      state.m.astype(dtype), state.v.astype(dtype), state.t)
