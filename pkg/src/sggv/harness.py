"""Leave-one-domain-out training orchestration.

One training step samples a raw mini-batch per source domain, derives the
enabled companion batches (edge map, color jitter), computes one gradient
per (domain, input kind), aggregates the bundle with the configured
strategy and applies a single Adam update.  Evaluation and model selection
use source validation data only; the held-out target is scored with raw
images alone.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import nn
from .aggregation import (GradientBundle, Sggv, aggregate, sign_agreement_rate,
                          strategy_label)
from .errors import ConfigurationError, EvaluationError
from .imageops import SHAPE_OPS, JitterParams, color_jitter_batch

logger = logging.getLogger("sggv")

INPUT_KINDS = ("raw", "shape", "texture")


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    domain: int
    kind: str = "raw"

    @property
    def tag(self):
        return f"d{self.domain}:{self.kind}"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: object = field(default_factory=data_mod.DatasetSpec)
    target: str = "radial-gradient"
    inputs: tuple = ("raw", "shape", "texture")
    shape_op: str = "sobel"
    jitter: JitterParams = field(default_factory=JitterParams)
    pairing: str = "paired"
    strategy: object = None  # None -> Sggv(tau=2L/3) resolved at run time
    iterations: int = 1000
    val_interval: int = 20
    batch_size: int = 16
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-5
    seed: int = 0
    arch: object = None
    precision: str = "float64"
    archive_bundle_iters: tuple = ()


@dataclass
class StepMetrics:
    iteration: int
    losses: list
    retained_prop: float
    agreement_rate: float


@dataclass
class ValRecord:
    iteration: int
    src_val_acc: float
    tgt_acc: float


@dataclass
class RunReport:
    target: str
    strategy: str
    tau: object
    seed: int
    steps: list
    validations: list
    selected_iter: int
    test_acc: float
    k: int
    modified_param_count: int
    companion_counts: dict
    archived_bundles: dict
    final_state: object


def _dtype_of(precision):
    if precision == "float64":
        return np.float64
    if precision == "float32":
        return np.float32
    raise ConfigurationError(f"precision must be float64 or float32, got {precision!r}")


def validate_config(config, num_domains):
    """Checks that do not need the dataset contents, only the domain count."""
    if not config.inputs or "raw" not in config.inputs:
        raise ConfigurationError("input kinds must include 'raw'")
    bad = [k for k in config.inputs if k not in INPUT_KINDS]
    if bad or len(set(config.inputs)) != len(config.inputs):
        raise ConfigurationError(f"bad input kinds {config.inputs!r}")
    if config.shape_op not in SHAPE_OPS:
        raise ConfigurationError(f"unknown shape operator {config.shape_op!r}")
    if config.pairing not in ("paired", "unpaired"):
        raise ConfigurationError(f"pairing must be paired|unpaired, got {config.pairing!r}")
    if config.iterations < 0 or config.val_interval < 1 or config.batch_size < 1:
        raise ConfigurationError("iterations/val_interval/batch_size out of range")
    _dtype_of(config.precision)
    n_sources = num_domains - 1
    if n_sources < 2:
        raise ConfigurationError("leave-one-out needs at least 2 source domains")
    return n_sources * len(config.inputs)


def resolve_strategy(config, bundle_size):
    from .aggregation import default_tau
    strategy = config.strategy
    if strategy is None:
        strategy = Sggv(tau=default_tau(bundle_size))
    if isinstance(strategy, Sggv) and not (bundle_size / 2 < strategy.tau <= bundle_size):
        raise ConfigurationError(
            f"tau={strategy.tau} invalid for bundle size L={bundle_size}: "
            f"valid range {bundle_size // 2 + 1}..{bundle_size}")
    return strategy


class _EpochSampler:
    """Per-domain shuffled index stream; reshuffles each epoch.

    Domains smaller than the batch size are sampled with replacement (once
    per call), with a one-time warning.
    """

    def __init__(self, n, batch_size, rng, tag):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.tag = tag
        self._queue = []
        self._warned = False

    def next_indices(self):
        if self.n < self.batch_size:
            if not self._warned:
                logger.warning(
                    "%s: only %d examples for batch size %d; sampling with replacement",
                    self.tag, self.n, self.batch_size)
                self._warned = True
            return self.rng.integers(0, self.n, size=self.batch_size)
        if len(self._queue) < self.batch_size:
            self._queue.extend(self.rng.permutation(self.n))
        out = np.asarray(self._queue[:self.batch_size])
        del self._queue[:self.batch_size]
        return out


class _BundleBuilder:
    """Produces the per-step list of batches (one per domain x input kind)."""

    def __init__(self, config, sources, seed_root):
        self.config = config
        self.sources = sources
        self.shape_fn = SHAPE_OPS[config.shape_op]
        self.train = {}
        self.samplers = {}
        self.jitter_rngs = {}
        self.companion_counts = {}
        for d in sources:
            self.train[d.domain_id] = d.subset("train")
            n_train = len(self.train[d.domain_id][1])
            for kind_i, kind in enumerate(("raw", "shape", "texture")):
                rng = np.random.default_rng(
                    np.random.SeedSequence([*seed_root, 2, d.domain_id, kind_i]))
                self.samplers[(d.domain_id, kind)] = _EpochSampler(
                    n_train, config.batch_size, rng, f"domain {d.name} ({kind})")
            self.jitter_rngs[d.domain_id] = np.random.default_rng(
                np.random.SeedSequence([*seed_root, 3, d.domain_id]))

    def _raw_batch(self, domain_ds, kind):
        xs, ys = self.train[domain_ds.domain_id]
        idx = self.samplers[(domain_ds.domain_id, kind)].next_indices()
        return xs[idx], ys[idx]

    def build(self):
        cfg = self.config
        batches = []
        for d in self.sources:
            raw_x, raw_y = self._raw_batch(d, "raw")
            for kind in cfg.inputs:
                if kind == "raw":
                    batches.append(Batch(raw_x, raw_y, d.domain_id, "raw"))
                    continue
                if cfg.pairing == "paired":
                    base_x, base_y = raw_x, raw_y
                else:
                    base_x, base_y = self._raw_batch(d, kind)
                if kind == "shape":
                    imgs = self.shape_fn(base_x)
                else:
                    imgs = color_jitter_batch(base_x, cfg.jitter,
                                              self.jitter_rngs[d.domain_id])
                self.companion_counts[d.domain_id] = (
                    self.companion_counts.get(d.domain_id, 0) + imgs.shape[0])
                batches.append(Batch(imgs, base_y, d.domain_id, kind))
        return batches


def train_step(model, batches, strategy, agg_rng, lr, beta1=0.9, beta2=0.999,
               adam_eps=1e-8, weight_decay=0.0):
    """One aggregated update; returns (per-tag losses, bundle, outcome).

    The per-source gradients are computed in one stacked forward/backward
    (bit-identical to per-batch passes, just faster).
    """
    images = np.concatenate([b.images for b in batches])
    labels = np.concatenate([b.labels for b in batches])
    sizes = [b.images.shape[0] for b in batches]
    tags = [b.tag for b in batches]
    loss_values, grads = nn.loss_and_grad_groups(model, images, labels, sizes)
    losses = list(zip(tags, loss_values))
    bundle = GradientBundle(list(grads), tags)
    outcome = aggregate(bundle, strategy, agg_rng)
    nn.adam_step(model, outcome.combined, lr=lr, beta1=beta1, beta2=beta2,
                 eps=adam_eps, weight_decay=weight_decay)
    return losses, bundle, outcome


def evaluate(model, images, labels, chunk=256):
    """Argmax accuracy over a split (ties resolve to the lowest class)."""
    if images.shape[0] == 0:
        raise EvaluationError("cannot evaluate an empty split")
    correct = 0
    for lo in range(0, images.shape[0], chunk):
        logits, _ = nn.forward(model, images[lo:lo + chunk])
        correct += int((logits.argmax(axis=1) == labels[lo:lo + chunk]).sum())
    return correct / images.shape[0]


def _load_datasets(config):
    if isinstance(config.dataset, data_mod.DatasetSpec):
        return data_mod.generate_dataset(config.dataset)
    return data_mod.load_image_folder(str(config.dataset), seed=config.seed)


def run_experiment(config, datasets=None):
    """Train with the configured strategy, select on source validation
    accuracy, and score the winner on the held-out target's test split."""
    if datasets is None:
        datasets = _load_datasets(config)
    names = {d.name: d for d in datasets}
    if config.target not in names:
        raise ConfigurationError(
            f"target {config.target!r} not among domains {sorted(names)}")
    bundle_size = validate_config(config, len(datasets))
    strategy = resolve_strategy(config, bundle_size)
    target = names[config.target]
    sources = [d for d in datasets if d.name != config.target]

    n_classes = len(datasets[0].class_names) or int(
        max(d.labels.max() for d in datasets)) + 1
    h, w, c = datasets[0].images.shape[2], datasets[0].images.shape[3], \
        datasets[0].images.shape[1]
    arch = config.arch or nn.default_architecture(n_classes, h, w, c)
    dtype = _dtype_of(config.precision)

    seed_root = [int(config.seed)]
    model = nn.init_params(arch, np.random.SeedSequence([*seed_root, 1]), dtype)
    agg_rng = np.random.default_rng(np.random.SeedSequence([*seed_root, 4]))
    builder = _BundleBuilder(config, sources, seed_root)

    src_val_x = np.concatenate([d.subset("val")[0] for d in sources])
    src_val_y = np.concatenate([d.subset("val")[1] for d in sources])
    tgt_test_x, tgt_test_y = target.subset("test")

    steps = []
    validations = []
    mask_union = np.zeros(model.k, dtype=bool)
    archived = {}
    archive_at = set(config.archive_bundle_iters)

    best_acc = evaluate(model, src_val_x, src_val_y)
    best_state = model.copy()
    selected_iter = 0
    validations.append(ValRecord(0, best_acc, evaluate(model, tgt_test_x, tgt_test_y)))

    for it in range(1, config.iterations + 1):
        batches = builder.build()
        losses, bundle, outcome = train_step(
            model, batches, strategy, agg_rng, lr=config.lr, beta1=config.beta1,
            beta2=config.beta2, adam_eps=config.adam_eps,
            weight_decay=config.weight_decay)
        mask_union |= outcome.mask
        steps.append(StepMetrics(it, losses, outcome.retained_proportion,
                                 sign_agreement_rate(bundle)))
        if it in archive_at:
            archived[it] = (bundle.grads.copy(), outcome.mask.copy(),
                            outcome.retained_proportion)
        if it % config.val_interval == 0 or it == config.iterations:
            src_acc = evaluate(model, src_val_x, src_val_y)
            tgt_acc = evaluate(model, tgt_test_x, tgt_test_y)
            validations.append(ValRecord(it, src_acc, tgt_acc))
            if src_acc > best_acc:
                best_acc = src_acc
                best_state = model.copy()
                selected_iter = it

    test_acc = evaluate(best_state, tgt_test_x, tgt_test_y)
    tau = strategy.tau if isinstance(strategy, Sggv) else None
    return RunReport(
        target=config.target,
        strategy=strategy_label(strategy),
        tau=tau,
        seed=config.seed,
        steps=steps,
        validations=validations,
        selected_iter=selected_iter,
        test_acc=test_acc,
        k=model.k,
        modified_param_count=int(mask_union.sum()),
        companion_counts=dict(builder.companion_counts),
        archived_bundles=archived,
        final_state=best_state,
    )


def sweep_tau(config, taus, datasets=None):
    """One run per threshold; reports carry the modified-parameter counts."""
    if not taus:
        raise ConfigurationError("tau sweep needs at least one value")
    if datasets is None:
        datasets = _load_datasets(config)
    bundle_size = validate_config(config, len(datasets))
    for tau in taus:
        if not (bundle_size / 2 < tau <= bundle_size):
            raise ConfigurationError(
                f"tau={tau} invalid for bundle size L={bundle_size}: "
                f"valid range {bundle_size // 2 + 1}..{bundle_size}")
    reports = []
    for tau in taus:
        cfg = _with(config, strategy=Sggv(tau=int(tau)))
        reports.append(run_experiment(cfg, datasets=datasets))
    return reports


def _with(config, **changes):
    from dataclasses import replace
    return replace(config, **changes)
