"""Synthetic shape-vs-texture datasets and the PACS-style folder loader.

The synthetic generator draws a filled shape (the class label) over a
background, with both regions textured in the style that defines the
domain.  Geometry is drawn from the rng before any texture parameter, so
for a fixed seed the foreground mask is identical across all styles: shape
is the cross-domain invariant, texture the domain signature.

Each style also carries its own color palette (foreground anchors far from
background anchors, different directions per style), which gives
within-domain classifiers an easy texture/color shortcut that fails on a
held-out style.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, DataLoadError

SHAPES = ("circle", "square", "triangle", "cross", "ring")
STYLES = ("solid-color", "stripes", "checker", "speckle-noise", "radial-gradient")

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")

# per-style (foreground anchor, background anchor) hues; the anchors point
# in a different color direction for every style, and some pairs invert
# across styles (stripes fg is yellow where speckle bg is), so color
# shortcuts learned on source styles misfire on a held-out one
_PALETTES = {
    "solid-color": ((0.82, 0.22, 0.18), (0.15, 0.62, 0.72)),
    "stripes": ((0.85, 0.72, 0.15), (0.18, 0.28, 0.80)),
    "checker": ((0.20, 0.72, 0.28), (0.76, 0.18, 0.68)),
    "speckle-noise": ((0.25, 0.45, 0.85), (0.88, 0.82, 0.28)),
    "radial-gradient": ((0.62, 0.25, 0.78), (0.20, 0.70, 0.45)),
}


@dataclass(frozen=True)
class DatasetSpec:
    """Shape classes x texture-style domains, plus sizing and seeding."""

    shapes: tuple = ("circle", "square", "triangle")
    styles: tuple = ("solid-color", "stripes", "checker", "radial-gradient")
    image_size: int = 32
    examples_per_cell: int = 200
    seed: int = 0
    label_noise: float = 0.0

    def __post_init__(self):
        if len(self.shapes) < 2:
            raise ConfigurationError("need at least 2 shape classes")
        if len(set(self.shapes)) != len(self.shapes) or len(set(self.styles)) != len(self.styles):
            raise ConfigurationError("duplicate shape or style names")
        if len(self.styles) < 3:
            raise ConfigurationError(
                "need at least 3 style domains (leave-one-out needs 2 sources)")
        unknown = [s for s in self.shapes if s not in SHAPES]
        unknown += [s for s in self.styles if s not in STYLES]
        if unknown:
            raise ConfigurationError(f"unknown shape/style names: {unknown}")
        if self.image_size < 16:
            raise ConfigurationError("image size must be at least 16")
        if self.examples_per_cell < 1:
            raise ConfigurationError("examples per (domain, class) cell must be >= 1")
        if not (0.0 <= self.label_noise < 1.0):
            raise ConfigurationError("label noise rate must be in [0, 1)")


@dataclass
class DomainDataset:
    domain_id: int
    name: str
    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    class_names: tuple = field(default=())

    def subset(self, split):
        code = SPLIT_NAMES.index(split)
        keep = self.split == code
        return self.images[keep], self.labels[keep]

    def __len__(self):
        return self.labels.shape[0]


# ---------------------------------------------------------------------------
# rendering


def _grid(size):
    c = np.arange(size, dtype=np.float64)
    return np.meshgrid(c, c, indexing="ij")  # yy, xx


# per-shape rotation range (radians); kept mild so pixel-space templates
# stay learnable, which the linear domain-gap probe depends on
_ROT_RANGE = {"circle": 0.0, "ring": 0.0, "square": 0.26, "triangle": 0.35,
              "cross": 0.26}


def _shape_mask(shape, size, cx, cy, scale, rot, extra):
    yy, xx = _grid(size)
    dx = xx - cx
    dy = yy - cy
    cos, sin = np.cos(rot), np.sin(rot)
    rx = cos * dx + sin * dy
    ry = -sin * dx + cos * dy
    s = size * scale
    if shape == "circle":
        return dx * dx + dy * dy <= (0.32 * s) ** 2
    if shape == "square":
        a = 0.28 * s
        return (np.abs(rx) <= a) & (np.abs(ry) <= a)
    if shape == "triangle":
        # equilateral, circumradius R, one vertex along +ry
        r = 0.38 * s
        # half-planes through the three edges
        e = []
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            nx_, ny_ = np.cos(ang), np.sin(ang)
            e.append(nx_ * rx + ny_ * ry <= r / 2)
        return e[0] & e[1] & e[2]
    if shape == "cross":
        arm = 0.38 * s
        half_w = 0.10 * s * extra
        bar1 = (np.abs(rx) <= arm) & (np.abs(ry) <= half_w)
        bar2 = (np.abs(ry) <= arm) & (np.abs(rx) <= half_w)
        return bar1 | bar2
    if shape == "ring":
        outer = 0.36 * s
        inner = outer * (0.5 * extra)
        d2 = dx * dx + dy * dy
        return (d2 <= outer * outer) & (d2 >= inner * inner)
    raise ConfigurationError(f"unknown shape {shape!r}")


def _jitter_color(anchor, rng):
    c = np.asarray(anchor, dtype=np.float64) + rng.uniform(-0.12, 0.12, size=3)
    return np.clip(c, 0.02, 0.98)


def _texture(style, anchor, size, rng):
    """A (3, size, size) plane: the jittered anchor color modulated by a
    style-specific luminance pattern.  Shared-across-channels modulation
    keeps the region's hue direction crisp, so color statistics stay
    class-irrelevant but strongly domain-typed."""
    yy, xx = _grid(size)
    base = _jitter_color(anchor, rng)[:, None, None]
    if style == "solid-color":
        return np.broadcast_to(base, (3, size, size)).copy()
    if style == "stripes":
        ang = rng.uniform(0.0, np.pi)
        period = rng.uniform(8.0, 14.0)
        phase = rng.uniform(0.0, 1.0)
        t = (np.cos(ang) * xx + np.sin(ang) * yy) / period + phase
        return base + 0.14 * np.sin(2 * np.pi * t)
    if style == "checker":
        ang = rng.uniform(0.0, np.pi)
        period = rng.uniform(6.0, 10.0)
        phase1 = rng.uniform(0.0, 1.0)
        phase2 = rng.uniform(0.0, 1.0)
        u = (np.cos(ang) * xx + np.sin(ang) * yy) / period
        v = (-np.sin(ang) * xx + np.cos(ang) * yy) / period
        return base + 0.14 * np.sin(2 * np.pi * (u + phase1)) * np.sin(2 * np.pi * (v + phase2))
    if style == "speckle-noise":
        noise = rng.uniform(-1.0, 1.0, size=(size + 2, size + 2))
        # 3x3 box blur keeps the speckle mild and mostly low-frequency
        sm = sum(noise[i:i + size, j:j + size]
                 for i in range(3) for j in range(3)) / 9.0
        return base + 0.15 * sm
    if style == "radial-gradient":
        gx = rng.uniform(0.3, 0.7) * size
        gy = rng.uniform(0.3, 0.7) * size
        d = np.sqrt((xx - gx) ** 2 + (yy - gy) ** 2) / (0.7 * size)
        return base + 0.18 * (2.0 * np.clip(d, 0.0, 1.0) - 1.0)
    raise ConfigurationError(f"unknown style {style!r}")


def render_example(shape, style, size, rng):
    """One (3, size, size) image in [0,1].

    Geometry (5 draws) comes off the stream before any texture parameter,
    so the same rng seed yields the same foreground mask for every style.
    """
    if size < 16:
        raise ConfigurationError("image size must be at least 16")
    if shape not in SHAPES or style not in STYLES:
        raise ConfigurationError(f"unknown shape/style ({shape!r}, {style!r})")
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    scale = rng.uniform(0.85, 1.15)
    rot = rng.uniform(-1.0, 1.0) * _ROT_RANGE[shape]
    extra = rng.uniform(0.9, 1.1)
    mask = _shape_mask(shape, size, cx, cy, scale, rot, extra)
    fg_anchor, bg_anchor = _PALETTES[style]
    fg = _texture(style, fg_anchor, size, rng)
    bg = _texture(style, bg_anchor, size, rng)
    img = np.where(mask[None, :, :], fg, bg)
    return np.clip(img, 0.0, 1.0)


def foreground_mask(shape, size, rng):
    """The rasterized mask alone, using the same geometry draws as
    :func:`render_example`."""
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    scale = rng.uniform(0.85, 1.15)
    rot = rng.uniform(-1.0, 1.0) * _ROT_RANGE[shape]
    extra = rng.uniform(0.9, 1.1)
    return _shape_mask(shape, size, cx, cy, scale, rot, extra)


# ---------------------------------------------------------------------------
# dataset assembly


def split_sizes(n):
    n_train = round(0.7 * n)
    n_val = round(0.1 * n)
    return n_train, n_val, n - n_train - n_val


def _assign_splits(n, rng):
    n_train, n_val, _ = split_sizes(n)
    codes = np.full(n, TEST, dtype=np.int64)
    order = rng.permutation(n)
    codes[order[:n_train]] = TRAIN
    codes[order[n_train:n_train + n_val]] = VAL
    return codes


def generate_dataset(spec):
    """All (domain, class) cells rendered and split 70/10/20 per domain.

    Per-example rng streams are keyed by (seed, domain, class, index), so
    generation order (or parallelisation) cannot change the result.  Label
    noise, when enabled, only ever corrupts the train split.
    """
    datasets = []
    size = spec.image_size
    n_cell = spec.examples_per_cell
    for di, style in enumerate(spec.styles):
        n = n_cell * len(spec.shapes)
        images = np.empty((n, 3, size, size), dtype=np.float64)
        labels = np.empty(n, dtype=np.int64)
        pos = 0
        for ci, shape in enumerate(spec.shapes):
            for i in range(n_cell):
                rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, di, ci, i]))
                images[pos] = render_example(shape, style, size, rng)
                labels[pos] = ci
                pos += 1
        split_rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, 0x5F17, di]))
        split = _assign_splits(n, split_rng)
        if spec.label_noise > 0:
            noise_rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, 0x401E, di]))
            train_idx = np.flatnonzero(split == TRAIN)
            flip = train_idx[noise_rng.random(train_idx.size) < spec.label_noise]
            offsets = noise_rng.integers(1, len(spec.shapes), size=flip.size)
            labels[flip] = (labels[flip] + offsets) % len(spec.shapes)
        datasets.append(DomainDataset(di, style, images, labels, split,
                                      tuple(spec.shapes)))
    return datasets


# ---------------------------------------------------------------------------
# folder import/export


def _require_pillow():
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise DataLoadError("Pillow is required for image folder IO") from exc
    return Image


def load_image_folder(root, image_size=32, seed=0):
    """Read a root/<domain>/<class>/<image> tree.

    Classes are indexed by sorted class-directory name, domains by sorted
    domain-directory name; images are bilinearly resized to ``image_size``
    and scaled to [0,1].  Splits are assigned 70/10/20 with ``seed``.
    """
    from pathlib import Path

    image = _require_pillow()
    root = Path(root)
    if not root.is_dir():
        raise DataLoadError(f"dataset root {root} is not a directory")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        raise DataLoadError(f"no domain directories under {root}")
    class_sets = {d: sorted(p.name for p in (root / d).iterdir() if p.is_dir())
                  for d in domains}
    classes = class_sets[domains[0]]
    for d, cs in class_sets.items():
        if cs != classes:
            raise DataLoadError(
                f"inconsistent class directories: domain {d!r} has {cs}, "
                f"expected {classes}")
    if not classes:
        raise DataLoadError(f"no class directories under {root / domains[0]}")
    datasets = []
    for di, domain in enumerate(domains):
        imgs, labels = [], []
        for ci, cls in enumerate(classes):
            cdir = root / domain / cls
            files = sorted(p for p in cdir.iterdir() if p.is_file())
            if not files:
                raise DataLoadError(f"empty class directory {cdir}")
            for f in files:
                try:
                    with image.open(f) as im:
                        im = im.convert("RGB").resize(
                            (image_size, image_size), image.Resampling.BILINEAR)
                        arr = np.asarray(im, dtype=np.float64) / 255.0
                except Exception as exc:
                    raise DataLoadError(f"cannot decode {f}: {exc}") from exc
                imgs.append(arr.transpose(2, 0, 1))
                labels.append(ci)
        images = np.stack(imgs)
        labels = np.asarray(labels, dtype=np.int64)
        split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F17, di]))
        split = _assign_splits(len(labels), split_rng)
        datasets.append(DomainDataset(di, domain, images, labels, split,
                                      tuple(classes)))
    return datasets


def export_dataset(datasets, out_dir):
    """Write datasets to the folder layout plus a manifest.csv at the root."""
    from pathlib import Path

    image = _require_pillow()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ds in datasets:
        counters = {}
        for i in range(len(ds)):
            cls = ds.class_names[ds.labels[i]]
            counters[cls] = counters.get(cls, 0)
            cdir = out / ds.name / cls
            cdir.mkdir(parents=True, exist_ok=True)
            fname = f"{counters[cls]:05d}.png"
            counters[cls] += 1
            arr = np.clip(np.round(ds.images[i] * 255.0), 0, 255).astype(np.uint8)
            image.fromarray(arr.transpose(1, 2, 0)).save(cdir / fname)
            rows.append((f"{ds.name}/{cls}/{fname}", ds.name, cls,
                         SPLIT_NAMES[ds.split[i]]))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("path", "domain", "class", "split"))
        writer.writerows(sorted(rows))
    return out / "manifest.csv"


# ---------------------------------------------------------------------------
# dataset validation probe


def probe_domain_gap(datasets, target_id, seed=0, iterations=300, lr=0.05,
                     batch_size=256):
    """Train a linear (softmax regression) classifier on raw source pixels
    and report in-source test accuracy vs target accuracy.

    A healthy domain-generalization dataset shows high in-source accuracy
    with a clearly lower target number.
    """
    sources = [d for d in datasets if d.domain_id != target_id]
    target = next(d for d in datasets if d.domain_id == target_id)
    xs = np.concatenate([d.subset("train")[0] for d in sources])
    ys = np.concatenate([d.subset("train")[1] for d in sources])
    c, h, w = xs.shape[1], xs.shape[2], xs.shape[3]
    n_classes = int(max(d.labels.max() for d in datasets)) + 1
    arch = nn.Architecture(h, w, c, (nn.Flatten(), nn.Dense(n_classes)), n_classes)
    state = nn.init_params(arch, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A0B]))
    n = xs.shape[0]
    for _ in range(iterations):
        idx = rng.integers(0, n, size=min(batch_size, n))
        _, grad = nn.loss_and_grad(state, xs[idx], ys[idx])
        nn.adam_step(state, grad, lr=lr)

    def accuracy(images, labels):
        logits, _ = nn.forward(state, images)
        return float((logits.argmax(axis=1) == labels).mean())

    src_x = np.concatenate([d.subset("test")[0] for d in sources])
    src_y = np.concatenate([d.subset("test")[1] for d in sources])
    tgt_x, tgt_y = target.subset("test")
    return {"source_acc": accuracy(src_x, src_y),
            "target_acc": accuracy(tgt_x, tgt_y)}
