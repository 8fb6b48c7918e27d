"""Finite-difference verification suite for every differentiable component.

Each case returns the max relative error between analytic gradients and
central finite differences; the CLI `gradcheck` command prints one row
per case and fails if any exceeds the 1e-4 budget.
"""

import numpy as np

from . import autodiff as ad
from . import eightpoint
from .autodiff import ParameterStore, Tensor, finite_difference_check
from .losses import LossConfig, classification_loss, essential_l2_loss, geometry_loss, total_loss
from .network import (
    BatchNorm,
    DiffPool,
    DiffUnpool,
    Network,
    OrderAwareBlock,
    PointCNResBlock,
    SpatialCorrelationUnit,
    context_norm,
    desk_config,
    shared_perceptron,
    spatial_correlation,
)
from .synthdata import SceneConfig, generate_pair

TOLERANCE = 1e-4


def _proj(rng, shape):
    return rng.normal(size=shape)


def _away_from(rng, shape, avoid, margin, spread=1.0):
    x = rng.normal(scale=spread, size=shape)
    x = np.where(np.abs(x - avoid) < margin, x + np.sign(x - avoid + 1e-12) * margin, x)
    return x


def _op_cases(rng):
    """(name, probe point, scalar function) for every engine op."""
    c34 = rng.normal(size=(3, 4))
    c4 = rng.normal(size=4)
    p34 = _proj(rng, (3, 4))
    cases = []

    def case(name, x, fn):
        cases.append((name, x, fn))

    case("add", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.add(t, c34) * p34))
    case("add(broadcast)", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.add(t, c4) * p34))
    case("sub", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.sub(t, c34) * p34))
    case("mul", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.mul(t, c34) * p34))
    den = np.sign(c34) * (np.abs(c34) + 0.5)
    case("div", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.div(t, den) * p34))
    case("div(by x)", _away_from(rng, (3, 4), 0.0, 0.3), lambda t: ad.reduce_sum(ad.div(c34, t) * p34))
    case("neg", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.neg(t) * p34))
    case("relu", _away_from(rng, (3, 4), 0.0, 0.1), lambda t: ad.reduce_sum(ad.relu(t) * p34))
    case("tanh", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.tanh(t) * p34))
    case("softplus", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.softplus(t) * p34))
    case("sqrt", rng.uniform(0.5, 2.0, size=(3, 4)), lambda t: ad.reduce_sum(ad.sqrt(t) * p34))
    case("minimum_const", _away_from(rng, (3, 4), 0.5, 0.1),
         lambda t: ad.reduce_sum(ad.minimum_const(t, 0.5) * p34))
    m42 = rng.normal(size=(4, 2))
    p32 = _proj(rng, (3, 2))
    case("matmul(lhs)", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.matmul(t, m42) * p32))
    case("matmul(rhs)", rng.normal(size=(4, 2)), lambda t: ad.reduce_sum(ad.matmul(c34, t) * p32))
    p232 = _proj(rng, (2, 3, 2))
    case("matmul(batched)", rng.normal(size=(2, 3, 4)),
         lambda t: ad.reduce_sum(ad.matmul(t, m42) * p232))
    p43 = _proj(rng, (4, 3))
    case("transpose_last2", rng.normal(size=(3, 4)),
         lambda t: ad.reduce_sum(ad.transpose_last2(t) * p43))
    p12 = _proj(rng, (12,))
    case("reshape", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.reshape(t, (12,)) * p12))
    p38 = _proj(rng, (3, 8))
    case("concat", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.concat([t, c34], axis=1) * p38))
    p32b = _proj(rng, (3, 2))
    case("slice_last", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.slice_last(t, 1, 3) * p32b))
    p4 = _proj(rng, (4,))
    case("take_batch", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.take_batch(t, 1) * p4))
    case("reduce_sum(all)", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(t))
    case("reduce_sum(axis)", rng.normal(size=(3, 4)),
         lambda t: ad.reduce_sum(ad.reduce_sum(t, axis=0) * p4))
    p134 = _proj(rng, (1, 3, 4))
    case("reduce_sum(keepdims)", rng.normal(size=(2, 3, 4)),
         lambda t: ad.reduce_sum(ad.reduce_sum(t, axis=(0,), keepdims=True) * p134))
    case("softmax(last)", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.softmax(t, axis=1) * p34))
    p234 = _proj(rng, (2, 3, 4))
    case("softmax(mid)", rng.normal(size=(2, 3, 4)),
         lambda t: ad.reduce_sum(ad.softmax(t, axis=1) * p234))
    p253a = _proj(rng, (2, 5, 3))
    case("normalize(points)", rng.normal(size=(2, 5, 3)),
         lambda t: ad.reduce_sum(ad.normalize(t, axes=(1,)) * p253a))
    p253b = _proj(rng, (2, 5, 3))
    case("normalize(batch)", rng.normal(size=(2, 5, 3)),
         lambda t: ad.reduce_sum(ad.normalize(t, axes=(0, 1)) * p253b))
    p3 = _proj(rng, (3,))
    case("mean", rng.normal(size=(3, 4)), lambda t: ad.reduce_sum(ad.mean(t, axis=1) * p3))
    return cases


def _detach_barrier_error():
    """detach cannot be finite-differenced; assert the zero-gradient barrier directly."""
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    loss = ad.reduce_sum(ad.detach(x) * rng.normal(size=(3, 4)))
    if loss.requires_grad:
        ad.backward(loss)
    return 0.0 if x.grad is None or not np.any(x.grad) else 1.0


def _toy_scene(seed=3, n=24, noise=0.5, outliers=0.25):
    cfg = SceneConfig(n=n, outlier_ratio=outliers, pixel_noise=noise, seed=seed)
    return generate_pair(cfg)


def _block_cases(rng):
    """Input- and parameter-probes through each network block at toy sizes."""
    cfg = desk_config(channels=8, clusters=4, blocks_before_pool=1, blocks_after_unpool=1,
                      level2_blocks=1, expected_points=16)
    B, N, M, D = 2, 16, 4, 8
    cases = []

    def fresh_store():
        return ParameterStore()

    w85 = rng.normal(size=(8, 5))
    b5 = rng.normal(size=5)
    x_bnd = rng.normal(size=(B, N, D))
    p_bn5 = _proj(rng, (B, N, 5))
    cases.append(("shared_perceptron(input)", x_bnd,
                  lambda t: ad.reduce_sum(shared_perceptron(t, w85, b5) * p_bn5)))
    cases.append(("shared_perceptron(weight)", w85,
                  lambda t: ad.reduce_sum(shared_perceptron(x_bnd, t, b5) * p_bn5)))
    cases.append(("shared_perceptron(bias)", b5,
                  lambda t: ad.reduce_sum(shared_perceptron(x_bnd, w85, t) * p_bn5)))

    p_bnd = _proj(rng, (B, N, D))
    cases.append(("context_norm", rng.normal(size=(B, N, D)),
                  lambda t: ad.reduce_sum(context_norm(t) * p_bnd)))

    def bn_case(mode):
        store = fresh_store()
        bn = BatchNorm(store, "bn", D)
        bn.gamma.data[...] = rng.normal(1.0, 0.2, D)
        bn.beta.data[...] = rng.normal(0.0, 0.2, D)

        def fn(t):
            return ad.reduce_sum(bn(t, mode) * p_bnd)

        return fn

    cases.append(("batch_norm(train)", rng.normal(size=(B, N, D)), bn_case("train")))
    cases.append(("batch_norm(eval)", rng.normal(size=(B, N, D)), bn_case("eval")))

    def layer_case(factory, shape, proj_shape, mode="train"):
        store = fresh_store()
        layer = factory(store)
        proj = _proj(rng, proj_shape)

        def fn(t):
            return ad.reduce_sum(layer(t, mode) * proj)

        return rng.normal(size=shape), fn

    x, fn = layer_case(lambda s: PointCNResBlock(s, "blk", D, cfg, np.random.default_rng(0)),
                       (B, N, D), (B, N, D))
    cases.append(("pointcn_resnet_block", x, fn))

    store = fresh_store()
    pool = DiffPool(store, "pool", D, M, cfg, np.random.default_rng(1))
    p_bmd = _proj(rng, (B, M, D))
    cases.append(("diff_pool", rng.normal(size=(B, N, D)),
                  lambda t: ad.reduce_sum(pool(t, "train")[0] * p_bmd)))

    store = fresh_store()
    unpool_oa = DiffUnpool(store, "up", D, M, cfg, np.random.default_rng(2))
    clusters_const = rng.normal(size=(B, M, D))
    x_pre_const = rng.normal(size=(B, N, D))
    cases.append(("diff_unpool(order_aware, nodes)", rng.normal(size=(B, N, D)),
                  lambda t: ad.reduce_sum(unpool_oa(t, ad.as_tensor(clusters_const), "train")[0] * p_bnd)))
    cases.append(("diff_unpool(order_aware, clusters)", rng.normal(size=(B, M, D)),
                  lambda t: ad.reduce_sum(unpool_oa(ad.as_tensor(x_pre_const), t, "train")[0] * p_bnd)))

    store = fresh_store()
    plain_cfg = desk_config(channels=8, clusters=4, blocks_before_pool=1, blocks_after_unpool=1,
                            level2_blocks=1, expected_points=16, unpool_variant="plain")
    unpool_plain = DiffUnpool(store, "upp", D, M, plain_cfg, np.random.default_rng(3))
    cases.append(("diff_unpool(plain)", rng.normal(size=(B, M, D)),
                  lambda t: ad.reduce_sum(unpool_plain(ad.as_tensor(x_pre_const), t, "train")[0] * p_bnd)))

    wmm = rng.normal(size=(M, M))
    bm = rng.normal(size=M)
    p_bmd2 = _proj(rng, (B, M, D))
    cases.append(("spatial_correlation(input)", rng.normal(size=(B, M, D)),
                  lambda t: ad.reduce_sum(spatial_correlation(t, wmm, bm) * p_bmd2)))
    cases.append(("spatial_correlation(weight)", wmm,
                  lambda t: ad.reduce_sum(spatial_correlation(clusters_const, t, bm) * p_bmd2)))

    x, fn = layer_case(lambda s: SpatialCorrelationUnit(s, "sc", M, D, cfg, np.random.default_rng(4)),
                       (B, M, D), (B, M, D))
    cases.append(("spatial_correlation_unit", x, fn))

    x, fn = layer_case(lambda s: OrderAwareBlock(s, "oa", M, D, cfg, np.random.default_rng(5)),
                       (B, M, D), (B, M, D))
    cases.append(("order_aware_block", x, fn))
    return cases


def _loss_cases(rng):
    cases = []
    z0 = rng.normal(size=(2, 16))
    labels = (rng.uniform(size=(2, 16)) < 0.5).astype(np.int64)
    labels[:, 0] = 1
    labels[:, 1] = 0
    cases.append(("classification_loss(balanced)", z0,
                  lambda t: classification_loss(t, labels, balanced=True)))
    cases.append(("classification_loss(unbalanced)", z0,
                  lambda t: classification_loss(t, labels, balanced=False)))

    pair = _toy_scene(seed=11)
    e_gt = pair.essential
    e_probe = e_gt + 0.3 * rng.normal(size=(3, 3))
    e_probe /= np.linalg.norm(e_probe)
    cases.append(("essential_l2_loss", e_probe, lambda t: essential_l2_loss(t, e_gt)))

    inliers = pair.correspondences[pair.labels > 0]
    e_near = e_gt + 1e-3 * rng.normal(size=(3, 3))
    e_near /= np.linalg.norm(e_near)
    cases.append(("geometry_loss", e_near, lambda t: geometry_loss(t, inliers, clamp=0.1)))
    return cases


def _eightpoint_backward_error(seed=5):
    """Eigendecomposition backward vs central differences, outside the engine."""
    rng = np.random.default_rng(seed)
    pair = _toy_scene(seed=seed)
    C = pair.correspondences
    w = rng.uniform(0.2, 1.0, size=len(C))
    upstream = rng.normal(size=(3, 3))
    _, ctx = eightpoint.weighted_eightpoint_with_context(C, w)
    if ctx.eigengap <= 1e-6:
        raise RuntimeError("toy scene eigengap too small for a reliable check")
    analytic = eightpoint.backward_from_context(ctx, upstream)
    h = 1e-5
    numeric = np.zeros_like(w)
    for i in range(len(w)):
        wp = w.copy()
        wp[i] += h
        ep = eightpoint.weighted_eightpoint(C, wp)
        wp[i] -= 2 * h
        em = eightpoint.weighted_eightpoint(C, wp)
        numeric[i] = (np.sum(upstream * ep) - np.sum(upstream * em)) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _full_network_cases(rng):
    """Whole-graph probes: parameter gradients through the solver and both losses."""
    cfg = desk_config(channels=8, clusters=4, blocks_before_pool=1, blocks_after_unpool=1,
                      level2_blocks=1, expected_points=16)
    pair = _toy_scene(seed=21, n=16, noise=0.2, outliers=0.25)
    corr = pair.correspondences[None]
    labels = pair.labels[None]
    egts = pair.essential[None]
    cases = []
    for kind in ("l2", "geometry"):
        loss_cfg = LossConfig(kind=kind, warmup=0)

        def make(param_name, loss_cfg=loss_cfg):
            def fn(t):
                net = Network(cfg, seed=9)
                _relink(net, param_name, t)  # probe tensor replaces the parameter
                out = net.forward(corr, mode="train")
                return total_loss(out.logits, labels, out.essentials, egts, corr, loss_cfg, 0)

            return fn

        probe_net = Network(cfg, seed=9)
        head_w = probe_net.store["net.head.weight"].data.copy()
        cases.append((f"full_forward+{kind}_loss(head weight)", head_w, make("net.head.weight")))
    return cases


def _relink(net, param_name, tensor):
    """Point the layer attribute that owns `param_name` at the probe tensor."""
    stage = net.stage
    if param_name == "net.head.weight":
        stage.head.weight = tensor
    else:
        raise KeyError(param_name)


def run_gradcheck(seed=0, corrupt=None):
    """Run every case; returns (rows, all_passed) with rows of (name, err, passed)."""
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng) + _block_cases(rng) + _loss_cases(rng) + _full_network_cases(rng)
    restore = None
    if corrupt is not None:
        restore = _install_corruption(corrupt)
    rows = []
    try:
        for name, x, fn in cases:
            err = finite_difference_check(fn, x)
            rows.append((name, err, err < TOLERANCE))
        err = _detach_barrier_error()
        rows.append(("detach(barrier)", err, err < TOLERANCE))
        err = _eightpoint_backward_error()
        rows.append(("weighted_eightpoint_backward(eigendecomposition)", err, err < TOLERANCE))
    finally:
        if restore is not None:
            restore()
    return rows, all(passed for _, _, passed in rows)


def _install_corruption(op_name):
    """Scale an op's backward by 1.05 so the checker must flag it (test fixture)."""
    if not hasattr(ad, op_name):
        raise ValueError(f"unknown op {op_name!r}")
    original = getattr(ad, op_name)

    def corrupted(*args, **kwargs):
        t = original(*args, **kwargs)
        if t._backward is not None:
            clean = t._backward
            t._backward = lambda g: clean(g * 1.05)
        return t

    setattr(ad, op_name, corrupted)

    def restore():
        setattr(ad, op_name, original)

    return restore
