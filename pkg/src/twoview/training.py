"""Training loop: batched forward, combined loss, Adam updates, progress log."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import adam_step, load_checkpoint
from .config import TrainParams
from .losses import LossConfig, LossCounters, total_loss
from .network import Network, NetworkConfig


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate went non-finite during training."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class LogRow:
    step: int
    loss: float
    val_map5: float


def validation_map5(net: Network, pairs):
    """mAP5 over a validation slice; solver or cheirality failures count as misses."""
    from .evalbench import evaluate_method, pose_map

    result = evaluate_method(pairs, "net", net=net)
    errors = [(o.rotation_error_deg, o.translation_error_deg) for o in result.outcomes]
    return pose_map(errors, 5)


def run_training(pairs, net_cfg: NetworkConfig, loss_cfg: LossConfig, params: TrainParams,
                 seed, resume=None, log_cb=None):
    """Train a network on ScenePairs; returns (network, log rows, loss counters).

    All randomness (init, batch order) derives from `seed`. With `resume`
    the checkpoint is restored first and the step counter continues.
    """
    if len(pairs) == 0:
        raise ValueError("empty training set")
    sizes = {p.correspondences.shape[0] for p in pairs}
    if len(sizes) != 1:
        raise ValueError(f"training requires a uniform correspondence count, got {sorted(sizes)}")

    net = Network(net_cfg, seed=seed)
    if resume is not None:
        load_checkpoint(net.store, resume)
    batch_rng = np.random.default_rng([seed, 1])

    corr_all = np.stack([p.correspondences for p in pairs])
    labels_all = np.stack([p.labels for p in pairs])
    egt_all = np.stack([p.essential for p in pairs])
    val_slice = pairs[:min(params.val_pairs, len(pairs))]

    rows = []
    counters = LossCounters()
    n = len(pairs)
    for k in range(params.steps):
        idx = batch_rng.choice(n, size=params.batch_size, replace=n < params.batch_size)
        corr = corr_all[idx]
        labels = labels_all[idx]
        egts = egt_all[idx]
        iteration = net.store.step
        needs_essential = loss_cfg.alpha > 0 and iteration >= loss_cfg.warmup
        try:
            out = net.forward(corr, mode="train", solve=needs_essential)
            loss = total_loss(out.logits, labels, out.essentials, egts, corr,
                              loss_cfg, iteration, counters)
            if out.stage1 is not None:
                loss = loss + total_loss(out.stage1.logits, labels, out.stage1.essentials,
                                         egts, corr, loss_cfg, iteration, counters)
            net.store.zero_grad()
            ad.backward(loss)
        except ad.NotFinite as err:
            raise TrainingDiverged(iteration, str(err)) from None
        adam_step(net.store, lr=params.lr)
        step = net.store.step
        if step % params.log_every == 0 or k == params.steps - 1:
            row = LogRow(step, float(loss.data), validation_map5(net, val_slice))
            rows.append(row)
            if log_cb is not None:
                log_cb(row)
    return net, rows, counters
