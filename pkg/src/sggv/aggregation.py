"""Gradient aggregation strategies.

Each strategy combines L per-source gradient vectors (one per domain and
input kind) into a single update vector plus a per-dimension retained mask.
All functions are pure; sums accumulate in source order so the results are
bit-identical to a naive per-dimension loop.

Sign convention: exact zeros are neither positive nor negative.  They count
toward neither side of a vote, and a dimension conflicts only when strictly
positive and strictly negative entries are both present.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class DeepAll:
    pass


@dataclass(frozen=True)
class AgrSum:
    pass


@dataclass(frozen=True)
class AgrRand:
    """Unanimity like AgrSum, but conflicting dimensions get Gaussian noise.

    With ``scale_aware`` (default) the per-dimension std is
    ``sigma * mean(|g_l(k)|)`` floored at 1e-12; otherwise ``sigma`` is the
    std itself.
    """

    sigma: float = 0.01
    scale_aware: bool = True


@dataclass(frozen=True)
class PCGrad:
    """Project each gradient off the others it conflicts with.

    ``seed`` pins the projection order; left unset, the order comes from
    the caller's per-step stream (still reproducible end to end).
    """

    seed: int | None = None


@dataclass(frozen=True)
class Sggv:
    """Per-dimension sign voting with threshold tau.

    ``literal_branch`` switches the negative-side test from n >= tau to the
    inequality m <= L - tau; the two agree whenever no entry is exactly zero.
    """

    tau: int
    literal_branch: bool = False


STRATEGY_NAMES = {
    DeepAll: "deep_all",
    AgrSum: "agr_sum",
    AgrRand: "agr_rand",
    PCGrad: "pcgrad",
    Sggv: "sggv",
}


def strategy_label(strategy):
    return STRATEGY_NAMES[type(strategy)]


def default_tau(num_grads):
    """The stock threshold: tau = 2L/3, rounded up when L % 3 != 0."""
    return math.ceil(2 * num_grads / 3)


class GradientBundle:
    """L same-length gradient vectors plus their source tags."""

    def __init__(self, grads, tags=None):
        grads = [np.asarray(g) for g in grads]
        if not grads:
            raise InputError("a bundle needs at least one gradient")
        k = grads[0].shape
        if any(g.shape != k or g.ndim != 1 for g in grads):
            raise InputError("all gradients in a bundle must be flat and of equal length")
        self.grads = np.stack(grads)
        if tags is None:
            tags = [f"g{i}" for i in range(len(grads))]
        if len(tags) != len(grads) or len(set(tags)) != len(tags):
            raise InputError("tags must be unique and match the bundle size")
        self.tags = list(tags)

    @property
    def l(self):
        return self.grads.shape[0]

    @property
    def k(self):
        return self.grads.shape[1]


@dataclass
class AggregationOutcome:
    combined: np.ndarray
    mask: np.ndarray

    @property
    def retained_proportion(self):
        return float(self.mask.sum()) / self.mask.size


def retained_proportion(outcome):
    return outcome.retained_proportion


def _seq_sum(rows):
    # accumulate in row order: bitwise-equal to a per-dimension python loop
    acc = np.zeros(rows.shape[1], dtype=rows.dtype)
    for row in rows:
        acc += row
    return acc


def _masked_seq_sum(rows, keep):
    acc = np.zeros(rows.shape[1], dtype=rows.dtype)
    zero = np.zeros((), dtype=rows.dtype)
    for row, k in zip(rows, keep):
        acc += np.where(k, row, zero)
    return acc


def deep_all(bundle):
    """Plain sum of all gradients; every dimension retained."""
    g = bundle.grads
    return AggregationOutcome(_seq_sum(g), np.ones(bundle.k, dtype=bool))


def _counts(g):
    pos = (g > 0).sum(axis=0)
    neg = (g < 0).sum(axis=0)
    return pos, neg


def agr_sum(bundle):
    """Sum where all nonzero entries share a sign; zero elsewhere."""
    g = bundle.grads
    pos, neg = _counts(g)
    mask = ~((pos > 0) & (neg > 0))
    combined = np.where(mask, _seq_sum(g), 0.0).astype(g.dtype)
    return AggregationOutcome(combined, mask)


def agr_rand(bundle, rng, sigma=0.01, scale_aware=True):
    """AgrSum, except conflicting dimensions are resampled from N(0, std^2)
    instead of zeroed, keeping those weights trainable."""
    if sigma <= 0:
        raise ConfigurationError("agr_rand sigma must be positive")
    out = agr_sum(bundle)
    conflicts = ~out.mask
    n = int(conflicts.sum())
    if n:
        if scale_aware:
            std = sigma * np.abs(bundle.grads[:, conflicts]).mean(axis=0)
            std = np.maximum(std, 1e-12)
        else:
            std = sigma
        out.combined[conflicts] = rng.standard_normal(n) * std
    return out


def pcgrad(bundle, rng=None, shuffle=True):
    """Gradient surgery: remove from each g_i its component along any other
    gradient it negatively aligns with, then sum.

    Projections always target the original gradients; zero-norm references
    are skipped.  No dimension is zeroed by construction, so the mask is all
    true.
    """
    g = bundle.grads
    l = bundle.l
    norms_sq = np.array([float(gj @ gj) for gj in g])
    projected = np.empty_like(g)
    for i in range(l):
        others = [j for j in range(l) if j != i]
        if shuffle and rng is not None and len(others) > 1:
            others = [others[p] for p in rng.permutation(len(others))]
        gi = g[i].copy()
        for j in others:
            if norms_sq[j] == 0.0:
                continue
            d = float(gi @ g[j])
            if d < 0.0:
                gi -= (d / norms_sq[j]) * g[j]
        projected[i] = gi
    return AggregationOutcome(_seq_sum(projected), np.ones(bundle.k, dtype=bool))


def _check_tau(tau, l):
    if not isinstance(tau, (int, np.integer)):
        raise ConfigurationError(f"tau must be an integer, got {tau!r}")
    if not (l / 2 < tau <= l):
        raise ConfigurationError(
            f"tau={tau} out of range for L={l}: need L/2 < tau <= L "
            f"(valid: {l // 2 + 1}..{l})")


def sggv_vote(bundle, tau, literal_branch=False):
    """Threshold vote per dimension: if at least tau entries are strictly
    positive, keep the sum of the positive entries; if at least tau are
    strictly negative, keep the sum of the negative entries; otherwise zero.
    """
    g = bundle.grads
    _check_tau(tau, bundle.l)
    pos, neg = _counts(g)
    pos_wins = pos >= tau
    if literal_branch:
        neg_wins = ~pos_wins & (pos <= bundle.l - tau)
    else:
        neg_wins = ~pos_wins & (neg >= tau)
    pos_sum = _masked_seq_sum(g, g > 0)
    neg_sum = _masked_seq_sum(g, g < 0)
    combined = np.where(pos_wins, pos_sum, np.where(neg_wins, neg_sum, 0.0))
    return AggregationOutcome(combined.astype(g.dtype), pos_wins | neg_wins)


def aggregate(bundle, strategy, rng=None):
    """Dispatch to the strategy's aggregator.  Deterministic given the
    bundle, the strategy and the rng state."""
    if isinstance(strategy, DeepAll):
        return deep_all(bundle)
    if isinstance(strategy, AgrSum):
        return agr_sum(bundle)
    if isinstance(strategy, AgrRand):
        if rng is None:
            raise ConfigurationError("agr_rand needs an rng")
        return agr_rand(bundle, rng, strategy.sigma, strategy.scale_aware)
    if isinstance(strategy, PCGrad):
        use_rng = np.random.default_rng(strategy.seed) if strategy.seed is not None else rng
        return pcgrad(bundle, use_rng, shuffle=True)
    if isinstance(strategy, Sggv):
        return sggv_vote(bundle, strategy.tau, strategy.literal_branch)
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def sign_agreement_rate(bundle):
    """Mean over gradient pairs of the per-dimension sign match fraction
    (zeros agree with zeros); 1.0 for a single-entry bundle."""
    g = bundle.grads
    l = bundle.l
    if l < 2:
        return 1.0
    signs = np.sign(g)
    total = 0.0
    pairs = 0
    for i in range(l):
        for j in range(i + 1, l):
            total += float((signs[i] == signs[j]).mean())
            pairs += 1
    return total / pairs
