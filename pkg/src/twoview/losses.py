"""Training objectives: weakly supervised classification plus an essential-matrix term."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .epipolar import _epipolar_terms, EPIPOLE_DENOM_MIN


class DegenerateLabels(ValueError):
    """Every sample in the batch is missing one of the two classes."""


class NoInliers(ValueError):
    """The geometry loss got a sample without a single ground-truth inlier."""


@dataclass
class LossCounters:
    skipped_samples: int = 0


@dataclass
class LossConfig:
    kind: str = "l2"            # "l2" | "geometry"
    alpha: float = None         # None resolves to 0.1 (l2) or 0.5 (geometry)
    warmup: int = 500           # iterations with the essential term disabled
    clamp: float = 0.1          # geometry loss saturation
    balanced: bool = True       # class-balanced cross entropy

    def __post_init__(self):
        if self.kind not in ("l2", "geometry"):
            raise ValueError(f"unknown essential loss kind {self.kind!r}")
        if self.alpha is None:
            self.alpha = 0.1 if self.kind == "l2" else 0.5
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")


def paper_loss_config(**overrides):
    cfg = LossConfig(**overrides)
    if "warmup" not in overrides:
        cfg.warmup = 20000
    return cfg


def classification_loss(z, labels, balanced=True, counters: LossCounters = None):
    """Binary cross entropy on logits, averaged over the batch.

    With `balanced` the positive and negative terms are averaged within
    their class first, so heavy outlier imbalance does not drown the
    inlier signal. Samples with an empty class are skipped (and counted);
    a batch with no usable sample raises DegenerateLabels.
    """
    z = ad.as_tensor(z)
    labels = np.asarray(labels)
    if labels.shape != z.shape:
        raise ValueError(f"labels shape {labels.shape} != logits shape {z.shape}")
    s = (labels > 0).astype(np.float64)
    if z.data.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
        s = s.reshape(1, -1)
    B, N = s.shape
    n_pos = s.sum(axis=1)
    n_neg = (1.0 - s).sum(axis=1)
    valid = (n_pos > 0) & (n_neg > 0)
    if counters is not None:
        counters.skipped_samples += int(np.count_nonzero(~valid))
    if not np.any(valid):
        raise DegenerateLabels("no sample has both classes present")
    nv = float(np.count_nonzero(valid))
    # per-element weights folding the class balance and batch mean into one sum
    wpos = np.zeros_like(s)
    wneg = np.zeros_like(s)
    for b in range(B):
        if not valid[b]:
            continue
        if balanced:
            wpos[b] = s[b] / (2.0 * n_pos[b] * nv)
            wneg[b] = (1.0 - s[b]) / (2.0 * n_neg[b] * nv)
        else:
            wpos[b] = s[b] / (N * nv)
            wneg[b] = (1.0 - s[b]) / (N * nv)
    # softplus(-z) = -log(sigmoid(z)) for the positives, softplus(z) for the negatives
    loss = ad.reduce_sum(ad.softplus(-z) * wpos) + ad.reduce_sum(ad.softplus(z) * wneg)
    return loss


def essential_l2_loss(e_hat, e_gt):
    """min over sign of the Frobenius distance between unit-norm essential matrices."""
    e_hat = ad.as_tensor(e_hat)
    e_gt = np.asarray(e_gt, dtype=np.float64).reshape(3, 3)
    d_minus = ad.sqrt(ad.reduce_sum((e_hat - e_gt) * (e_hat - e_gt)))
    d_plus = ad.sqrt(ad.reduce_sum((e_hat + e_gt) * (e_hat + e_gt)))
    # eager values let us pick the branch; backward follows the chosen side
    return d_minus if float(d_minus.data) <= float(d_plus.data) else d_plus


def geometry_loss(e_hat, inlier_corr, clamp=0.1):
    """Mean clamped symmetric epipolar distance of the ground-truth inliers.

    Rows whose denominator degenerates contribute the clamp value and no
    gradient.
    """
    e_hat = ad.as_tensor(e_hat)
    C = np.asarray(inlier_corr, dtype=np.float64).reshape(-1, 4)
    if len(C) == 0:
        raise NoInliers("geometry loss needs at least one ground-truth inlier")
    n = len(C)
    p1 = np.column_stack([C[:, 0], C[:, 1], np.ones(n)])
    p2 = np.column_stack([C[:, 2], C[:, 3], np.ones(n)])
    ep1 = ad.matmul(ad.as_tensor(p1), ad.transpose_last2(e_hat))   # rows E @ p1_i
    etp2 = ad.matmul(ad.as_tensor(p2), e_hat)                      # rows E^T @ p2_i
    residual = ad.reduce_sum(ep1 * p2, axis=1)
    num = residual * residual
    den = ad.reduce_sum(ad.slice_last(ep1, 0, 2) * ad.slice_last(ep1, 0, 2), axis=1) \
        + ad.reduce_sum(ad.slice_last(etp2, 0, 2) * ad.slice_last(etp2, 0, 2), axis=1)
    _, den_values = _epipolar_terms(e_hat.data, C)
    degenerate = (den_values < EPIPOLE_DENOM_MIN).astype(np.float64)
    good = 1.0 - degenerate
    # degenerate rows: constant clamp contribution, zero gradient
    dist = ad.minimum_const(num / (den + degenerate), clamp) * good + degenerate * clamp
    return ad.reduce_sum(dist) * (1.0 / n)


def total_loss(z, labels, essentials, e_gts, corr, cfg: LossConfig, iteration,
               counters: LossCounters = None):
    """Classification loss plus the alpha-scheduled essential term.

    The essential term switches on after `cfg.warmup` iterations and
    averages over the samples whose solver pass succeeded (entries of
    `essentials` may be None).
    """
    cls = classification_loss(z, labels, balanced=cfg.balanced, counters=counters)
    if iteration < cfg.warmup or cfg.alpha == 0.0:
        return cls
    labels = np.asarray(labels)
    e_gts = np.asarray(e_gts, dtype=np.float64).reshape(-1, 3, 3)
    terms = []
    for b, e_hat in enumerate(essentials):
        if e_hat is None:
            continue
        if cfg.kind == "l2":
            terms.append(essential_l2_loss(e_hat, e_gts[b]))
        else:
            inliers = corr[b][labels[b] > 0]
            if len(inliers) == 0:
                continue
            terms.append(geometry_loss(e_hat, inliers, cfg.clamp))
    if not terms:
        return cls
    ess = terms[0]
    for t in terms[1:]:
        ess = ess + t
    return cls + (cfg.alpha / len(terms)) * ess
