"""Permutation-equivariant inlier classification network.

The trunk alternates PointCN ResNet blocks with a soft-assignment pooling
stage: unordered correspondences are pooled into a fixed number of
clusters in a learned canonical order, processed by order-aware filtering
blocks that correlate clusters along the spatial dimension, and unpooled
back to per-correspondence features. The head emits logits z, weights
w = tanh(relu(z)), and a regressed essential matrix per sample through
the differentiable weighted eight-point solver.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import eightpoint
from .autodiff import ParameterStore, ShapeMismatch, Tensor


@dataclass
class NetworkConfig:
    channels: int = 128
    clusters: int = 500
    blocks_before_pool: int = 6
    blocks_after_unpool: int = 6
    level2_blocks: int = 6
    unpool_variant: str = "order_aware"   # "order_aware" | "plain"
    level2_kind: str = "order_aware"      # "order_aware" | "pointcn"
    use_pool: bool = True                 # False: plain PointCN baseline
    iterative: bool = False
    block_order: str = "norm_first"       # "norm_first" | "perceptron_first"
    pool_softmax: str = "clusters"        # axis the pool assignment normalizes over
    unpool_softmax: str = "nodes"         # axis the unpool assignment normalizes over
    expected_points: int = 2000           # needed by the plain unpool head (D -> N)
    bn_momentum: float = 0.9
    eps: float = 1e-5

    def validate(self):
        if self.unpool_variant not in ("order_aware", "plain"):
            raise ValueError(f"unknown unpool_variant {self.unpool_variant!r}")
        if self.level2_kind not in ("order_aware", "pointcn"):
            raise ValueError(f"unknown level2_kind {self.level2_kind!r}")
        if self.block_order not in ("norm_first", "perceptron_first"):
            raise ValueError(f"unknown block_order {self.block_order!r}")
        if self.pool_softmax not in ("clusters", "nodes"):
            raise ValueError(f"unknown pool_softmax {self.pool_softmax!r}")
        if self.unpool_softmax not in ("clusters", "nodes"):
            raise ValueError(f"unknown unpool_softmax {self.unpool_softmax!r}")
        for key in ("channels", "clusters", "blocks_before_pool", "blocks_after_unpool",
                    "level2_blocks", "expected_points"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        return self


def paper_config(**overrides):
    """Full-scale configuration as used for the reported benchmarks."""
    return replace(NetworkConfig(), **overrides).validate()


def desk_config(**overrides):
    """Small configuration sized for CPU training runs."""
    base = NetworkConfig(
        channels=32,
        clusters=128,
        blocks_before_pool=2,
        blocks_after_unpool=2,
        level2_blocks=2,
        expected_points=512,
    )
    return replace(base, **overrides).validate()


def _init_weight(rng, d_in, d_out):
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))


def shared_perceptron(F, weight, bias):
    """Apply one linear map to every point independently: F @ W + b."""
    F, weight, bias = ad.as_tensor(F), ad.as_tensor(weight), ad.as_tensor(bias)
    if F.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"shared_perceptron: {F.shape} @ {weight.shape}")
    return ad.matmul(F, weight) + bias


def context_norm(F, eps=1e-5):
    """Normalize each channel to zero mean / unit variance across the points of a sample."""
    F = ad.as_tensor(F)
    if F.data.ndim != 3:
        raise ShapeMismatch(f"context_norm: expected (B, N, D), got {F.shape}")
    if F.shape[1] < 2:
        raise ShapeMismatch("context_norm: need at least 2 points")
    return ad.normalize(F, axes=(1,), eps=eps)


def spatial_correlation(F, weight, bias):
    """Linear map along the cluster axis, shared across channels."""
    F, weight, bias = ad.as_tensor(F), ad.as_tensor(weight), ad.as_tensor(bias)
    if F.data.ndim != 3:
        raise ShapeMismatch(f"spatial_correlation: expected (B, M, D), got {F.shape}")
    if F.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"spatial_correlation: spatial dim {F.shape[1]} != weight size {weight.shape[0]}")
    ft = ad.transpose_last2(F)                      # (B, D, M)
    out = ad.matmul(ft, weight) + bias              # weights shared along channels
    return ad.transpose_last2(out)


class Perceptron:
    def __init__(self, store, name, d_in, d_out, rng):
        self.weight = store.parameter(f"{name}.weight", _init_weight(rng, d_in, d_out))
        self.bias = store.parameter(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x):
        return shared_perceptron(x, self.weight, self.bias)


class BatchNorm:
    """Per-channel normalization over (batch x points) with running statistics."""

    def __init__(self, store, name, channels, momentum=0.9, eps=1e-5):
        self.gamma = store.parameter(f"{name}.gamma", np.ones(channels))
        self.beta = store.parameter(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, mode):
        x = ad.as_tensor(x)
        if mode == "train":
            if x.shape[0] * x.shape[1] < 2:
                raise ShapeMismatch("batch_norm: train mode needs batch*points >= 2")
            mu = x.data.mean(axis=(0, 1))
            var = x.data.var(axis=(0, 1))
            self.running_mean.data[...] = self.momentum * self.running_mean.data + (1 - self.momentum) * mu
            self.running_var.data[...] = self.momentum * self.running_var.data + (1 - self.momentum) * var
            y = ad.normalize(x, axes=(0, 1), eps=self.eps)
        else:
            inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
            y = (x - self.running_mean.data) * inv
        return y * self.gamma + self.beta


class PointCNUnit:
    """One normalization/activation/perceptron unit of a PointCN block."""

    def __init__(self, store, name, d_in, d_out, cfg: NetworkConfig, rng):
        self.cfg = cfg
        bn_channels = d_in if cfg.block_order == "norm_first" else d_out
        self.bn = BatchNorm(store, f"{name}.bn", bn_channels, cfg.bn_momentum, cfg.eps)
        self.perceptron = Perceptron(store, f"{name}.perc", d_in, d_out, rng)

    def __call__(self, x, mode):
        if self.cfg.block_order == "norm_first":
            h = context_norm(x, self.cfg.eps)
            h = self.bn(h, mode)
            h = ad.relu(h)
            return self.perceptron(h)
        h = self.perceptron(x)
        h = context_norm(h, self.cfg.eps)
        h = self.bn(h, mode)
        return ad.relu(h)


class PointCNResBlock:
    """Two PointCN units under an identity skip connection."""

    def __init__(self, store, name, d, cfg, rng):
        self.unit1 = PointCNUnit(store, f"{name}.unit1", d, d, cfg, rng)
        self.unit2 = PointCNUnit(store, f"{name}.unit2", d, d, cfg, rng)

    def __call__(self, x, mode):
        return x + self.unit2(self.unit1(x, mode), mode)


class SpatialCorrelationUnit:
    """Residual cluster-mixing unit: x + SC(relu(BN(x)))."""

    def __init__(self, store, name, clusters, channels, cfg, rng):
        self.bn = BatchNorm(store, f"{name}.bn", channels, cfg.bn_momentum, cfg.eps)
        self.weight = store.parameter(f"{name}.weight", _init_weight(rng, clusters, clusters))
        self.bias = store.parameter(f"{name}.bias", np.zeros(clusters))

    def __call__(self, x, mode):
        h = ad.relu(self.bn(x, mode))
        return x + spatial_correlation(h, self.weight, self.bias)


class OrderAwareBlock:
    """PointCN half-block, cluster-mixing unit, PointCN half-block, overall skip.

    Only valid after pooling, where the cluster order is canonical.
    """

    def __init__(self, store, name, clusters, channels, cfg, rng):
        self.half1 = PointCNUnit(store, f"{name}.half1", channels, channels, cfg, rng)
        self.mix = SpatialCorrelationUnit(store, f"{name}.mix", clusters, channels, cfg, rng)
        self.half2 = PointCNUnit(store, f"{name}.half2", channels, channels, cfg, rng)

    def __call__(self, x, mode):
        h = self.half1(x, mode)
        h = self.mix(h, mode)
        h = self.half2(h, mode)
        return x + h


class DiffPool:
    """Soft-assignment pooling of N nodes into a canonical set of clusters."""

    def __init__(self, store, name, channels, clusters, cfg, rng):
        self.cfg = cfg
        self.head = PointCNUnit(store, f"{name}.head", channels, clusters, cfg, rng)

    def __call__(self, x, mode):
        logits = self.head(x, mode)                     # (B, N, M)
        axis = 2 if self.cfg.pool_softmax == "clusters" else 1
        assign = ad.softmax(logits, axis=axis)
        clusters = ad.matmul(ad.transpose_last2(assign), x)  # (B, M, D)
        return clusters, assign


class DiffUnpool:
    """Upsample cluster features back to one feature per input node.

    The order-aware variant learns the assignment from the pre-pool
    features, so output rows stay aligned with the input ordering. The
    plain variant learns it from the cluster features alone and cannot
    recover the input order; it is kept for ablations.
    """

    def __init__(self, store, name, channels, clusters, cfg, rng):
        self.cfg = cfg
        if cfg.unpool_variant == "order_aware":
            self.head = PointCNUnit(store, f"{name}.head", channels, clusters, cfg, rng)
        else:
            self.head = PointCNUnit(store, f"{name}.head", channels, cfg.expected_points, cfg, rng)

    def __call__(self, x_pre, clusters, mode):
        if self.cfg.unpool_variant == "order_aware":
            logits = self.head(x_pre, mode)             # (B, N, M)
        else:
            if x_pre.shape[1] != self.cfg.expected_points:
                raise ShapeMismatch(
                    f"plain unpool is built for N={self.cfg.expected_points}, got N={x_pre.shape[1]}")
            logits = ad.transpose_last2(self.head(clusters, mode))  # (B, N, M)
        axis = 1 if self.cfg.unpool_softmax == "nodes" else 2
        assign = ad.softmax(logits, axis=axis)
        return ad.matmul(assign, clusters), assign      # (B, N, D)


@dataclass
class PredictionOutput:
    logits: Tensor                    # (B, N)
    weights: Tensor                   # (B, N)
    essentials: list                  # per sample: Tensor (3, 3) or None
    failures: list                    # per sample: error name or None
    pool_assign: Tensor = None        # (B, N, M) when pooling is enabled
    unpool_assign: Tensor = None      # (B, N, M)
    stage1: "PredictionOutput" = None


class _Stage:
    def __init__(self, store, prefix, cfg: NetworkConfig, in_channels, rng):
        d, m = cfg.channels, cfg.clusters
        self.cfg = cfg
        self.embed = Perceptron(store, f"{prefix}.embed", in_channels, d, rng)
        self.before = [PointCNResBlock(store, f"{prefix}.l1a.{i}", d, cfg, rng)
                       for i in range(cfg.blocks_before_pool)]
        if cfg.use_pool:
            self.pool = DiffPool(store, f"{prefix}.pool", d, m, cfg, rng)
            if cfg.level2_kind == "order_aware":
                self.level2 = [OrderAwareBlock(store, f"{prefix}.l2.{i}", m, d, cfg, rng)
                               for i in range(cfg.level2_blocks)]
            else:
                self.level2 = [PointCNResBlock(store, f"{prefix}.l2.{i}", d, cfg, rng)
                               for i in range(cfg.level2_blocks)]
            self.unpool = DiffUnpool(store, f"{prefix}.unpool", d, m, cfg, rng)
            self.fuse = Perceptron(store, f"{prefix}.fuse", 2 * d, d, rng)
        self.after = [PointCNResBlock(store, f"{prefix}.l1b.{i}", d, cfg, rng)
                      for i in range(cfg.blocks_after_unpool)]
        self.head = Perceptron(store, f"{prefix}.head", d, 1, rng)

    def __call__(self, inputs, mode):
        x = self.embed(inputs)
        for block in self.before:
            x = block(x, mode)
        pool_assign = unpool_assign = None
        if self.cfg.use_pool:
            clusters, pool_assign = self.pool(x, mode)
            for block in self.level2:
                clusters = block(clusters, mode)
            up, unpool_assign = self.unpool(x, clusters, mode)
            x = self.fuse(ad.concat([up, x], axis=2))
        for block in self.after:
            x = block(x, mode)
        z = self.head(x)                                # (B, N, 1)
        z = ad.reshape(z, (inputs.shape[0], inputs.shape[1]))
        return z, pool_assign, unpool_assign


def _solve_batch(corr, weights):
    """Per-sample differentiable eight-point solve; failures become None entries."""
    essentials, failures = [], []
    for b in range(corr.shape[0]):
        wb = ad.take_batch(weights, b)
        try:
            e, ctx = eightpoint.weighted_eightpoint_with_context(corr[b], wb.data)
        except (eightpoint.InsufficientSupport, eightpoint.EigengapCollapse) as err:
            essentials.append(None)
            failures.append(type(err).__name__)
            continue
        essentials.append(ad.custom(
            (wb,), e,
            lambda g, ctx=ctx: [eightpoint.backward_from_context(ctx, g)],
            op="weighted_eightpoint"))
        failures.append(None)
    return essentials, failures


class Network:
    """Full model: one stage, or an initialization + refinement pair."""

    def __init__(self, config: NetworkConfig, seed=0, store=None):
        config.validate()
        self.config = config
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(seed)
        if config.iterative:
            self.stage1 = _Stage(self.store, "s1", config, 4, rng)
            self.stage2 = _Stage(self.store, "s2", config, 6, rng)
        else:
            self.stage = _Stage(self.store, "net", config, 4, rng)

    def forward(self, corr, mode="eval", solve=True):
        """Run the network on a (B, N, 4) correspondence batch.

        With solve=False the per-sample essential solve is skipped (used
        during loss warmup, where only the logits are needed).
        """
        corr = np.ascontiguousarray(corr, dtype=np.float64)
        if corr.ndim != 3 or corr.shape[2] != 4:
            raise ShapeMismatch(f"expected correspondences of shape (B, N, 4), got {corr.shape}")
        if corr.shape[1] < 8:
            raise ShapeMismatch("need at least 8 correspondences per sample")
        if not self.config.iterative:
            return self._run_stage(self.stage, corr, Tensor(corr), mode, solve)
        out1 = self._run_stage(self.stage1, corr, Tensor(corr), mode, True)
        extra = self._stage2_channels(corr, out1)
        out2 = self._run_stage(self.stage2, corr, Tensor(extra), mode, solve)
        out2.stage1 = out1
        return out2

    def _run_stage(self, stage, corr, inputs, mode, solve=True):
        z, pool_assign, unpool_assign = stage(inputs, mode)
        w = ad.tanh(ad.relu(z))
        if solve:
            essentials, failures = _solve_batch(corr, w)
        else:
            essentials = [None] * corr.shape[0]
            failures = ["skipped"] * corr.shape[0]
        return PredictionOutput(z, w, essentials, failures, pool_assign, unpool_assign)

    def _stage2_channels(self, corr, out1):
        """Refinement input: correspondences plus detached residuals and weights."""
        from .epipolar import symmetric_epipolar_distances

        B, N = corr.shape[0], corr.shape[1]
        residuals = np.zeros((B, N))
        for b in range(B):
            e = out1.essentials[b]
            if e is not None:
                # residuals act as input features; cap them so degenerate rows stay finite
                residuals[b] = np.minimum(symmetric_epipolar_distances(e.data, corr[b]), 1.0)
        return np.concatenate([corr, residuals[..., None], out1.weights.data[..., None]], axis=2)
