"""Image-space operators: edge extraction and texture jitter.

Images are float arrays in [0, 1] with channels first: (C, H, W), or
(B, C, H, W) for the edge operators, which are pointwise over the batch.
Every operator clamps its output back into [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError

LUMA = (0.299, 0.587, 0.114)
_SOBEL_MAX = 4.0 * np.sqrt(2.0)


@dataclass(frozen=True)
class JitterParams:
    """Color jitter magnitudes; defaults follow the usual strong setting."""

    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.5

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise InputError("jitter magnitudes must be >= 0")
        if self.hue > 0.5:
            raise InputError("hue magnitude is a fraction of a revolution, at most 0.5")


@dataclass
class ExampleTriple:
    raw: np.ndarray
    shape: np.ndarray
    texture: np.ndarray
    label: int
    domain: int


def _check_image(img, op):
    if img.ndim not in (3, 4):
        raise InputError(f"{op}: expected (C,H,W) or (B,C,H,W), got {img.shape}")
    c = img.shape[-3]
    if c not in (1, 3):
        raise InputError(f"{op}: channel count must be 1 or 3, got {c}")
    return c


def luma(img):
    """Grayscale plane(s) via the 0.299/0.587/0.114 weights; single-channel
    input passes through."""
    if img.shape[-3] == 1:
        return img[..., 0, :, :]
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def _edge_core(img, op, response):
    c = _check_image(img, op)
    h, w = img.shape[-2], img.shape[-1]
    if h < 3 or w < 3:
        raise InputError(f"{op}: image must be at least 3x3, got {h}x{w}")
    gray = luma(img)
    pad = [(0, 0)] * (gray.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(gray, pad, mode="reflect")

    def s(di, dj):
        return p[..., di:di + h, dj:dj + w]

    mag = response(s)
    out = np.clip(mag, 0.0, 1.0)
    return np.repeat(out[..., None, :, :], c, axis=-3)


def sobel_edge(img):
    """Sobel gradient magnitude, normalized by the kernel's theoretical
    maximum (4*sqrt(2) for inputs in [0,1]) and replicated to the input's
    channel count."""

    def response(s):
        gx = (s(0, 2) + 2.0 * s(1, 2) + s(2, 2)) - (s(0, 0) + 2.0 * s(1, 0) + s(2, 0))
        gy = (s(2, 0) + 2.0 * s(2, 1) + s(2, 2)) - (s(0, 0) + 2.0 * s(0, 1) + s(0, 2))
        return np.sqrt(gx * gx + gy * gy) / _SOBEL_MAX

    return _edge_core(img, "sobel_edge", response)


def laplace_edge(img):
    """Absolute 4-neighbour Laplacian, normalized by its maximum of 4."""

    def response(s):
        lap = s(0, 1) + s(1, 0) + s(1, 2) + s(2, 1) - 4.0 * s(1, 1)
        return np.abs(lap) / 4.0

    return _edge_core(img, "laplace_edge", response)


SHAPE_OPS = {"sobel": sobel_edge, "laplace": laplace_edge}


# ---------------------------------------------------------------------------
# HSV conversion (vectorized, channels-first)


def rgb_to_hsv(img):
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    diff = maxc - minc
    safe = np.where(diff == 0.0, 1.0, diff)
    # channel priority r, g, b when the max is tied
    h = np.where(
        diff == 0.0, 0.0,
        np.where(maxc == r, ((g - b) / safe) % 6.0,
                 np.where(maxc == g, (b - r) / safe + 2.0,
                          (r - g) / safe + 4.0))) / 6.0
    s = np.where(maxc == 0.0, 0.0, diff / np.where(maxc == 0.0, 1.0, maxc))
    return np.stack([h % 1.0, s, maxc], axis=-3)


def hsv_to_rgb(img):
    h, s, v = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    h6 = (h % 1.0) * 6.0
    vs = v * s

    def channel(n):
        k = (n + h6) % 6.0
        return v - vs * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)

    return np.stack([channel(5.0), channel(3.0), channel(1.0)], axis=-3)


# ---------------------------------------------------------------------------
# color jitter


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    mean_gray = float(luma(img).mean())
    return np.clip(mean_gray + factor * (img - mean_gray), 0.0, 1.0)


def adjust_saturation(img, factor):
    gray = luma(img)[..., None, :, :]
    return np.clip(gray + factor * (img - gray), 0.0, 1.0)


def adjust_hue(img, shift):
    hsv = rgb_to_hsv(img)
    hsv[..., 0, :, :] = (hsv[..., 0, :, :] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(img, params, rng):
    """Randomized brightness/contrast/saturation/hue, applied in an
    rng-shuffled order.

    Factors are drawn uniformly from [max(0, 1-v), 1+v] (hue: a shift in
    [-hue, +hue] revolutions) in a fixed sequence, so a fixed seed gives a
    bit-identical output.  Magnitude-zero transforms are skipped entirely:
    all-zero params make this the exact identity and consume no rng draws.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"color_jitter: expected a (3,H,W) image, got {img.shape}")
    transforms = []
    if params.brightness > 0:
        f = rng.uniform(max(0.0, 1.0 - params.brightness), 1.0 + params.brightness)
        transforms.append(lambda x, f=f: adjust_brightness(x, f))
    if params.contrast > 0:
        f = rng.uniform(max(0.0, 1.0 - params.contrast), 1.0 + params.contrast)
        transforms.append(lambda x, f=f: adjust_contrast(x, f))
    if params.saturation > 0:
        f = rng.uniform(max(0.0, 1.0 - params.saturation), 1.0 + params.saturation)
        transforms.append(lambda x, f=f: adjust_saturation(x, f))
    if params.hue > 0:
        shift = rng.uniform(-params.hue, params.hue)
        transforms.append(lambda x, shift=shift: adjust_hue(x, shift))
    if len(transforms) > 1:
        transforms = [transforms[i] for i in rng.permutation(len(transforms))]
    out = img
    for t in transforms:
        out = t(out)
    return out


def color_jitter_batch(images, params, rng):
    """Per-image jitter over a (B,3,H,W) batch; each image draws its own
    factors from the shared stream."""
    return np.stack([color_jitter(images[i], params, rng)
                     for i in range(images.shape[0])])


def make_triple(img, label, domain, shape_op="sobel", params=JitterParams(),
                rng=None):
    """Raw image plus its shape-distilled and texture-augmented companions,
    all derived from this exact image and sharing its label and domain."""
    if shape_op not in SHAPE_OPS:
        raise InputError(f"unknown shape operator {shape_op!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    return ExampleTriple(
        raw=img,
        shape=SHAPE_OPS[shape_op](img),
        texture=color_jitter(img, params, rng),
        label=label,
        domain=domain,
    )
