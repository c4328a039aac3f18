"""The self-supervised training loop over a :class:`~embdyn.config.RunConfig`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import RunConfig, rng_stream
from .data import Dataset, load_idx_images, make_gaussian_clusters, make_multicrop_batch, make_view_batch
from .evaluation import collapse_metrics, knn_classify
from .losses import alignment_metric, draw_noise, total_loss, uniformity_metric
from .model import SiameseState, encode, ema_update, forward, init_state
from .optim import lars_step, lr_at, sgd_momentum_step

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = (
    "epoch", "L_c", "L_b", "L_s", "total", "lr", "tau", "knn_acc", "alignment",
    "uniformity", "feature_std_mean", "effective_rank", "sigma_min", "sigma_max",
)


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "gaussian":
        ds = make_gaussian_clusters(d.num_classes, d.per_class, d.d_in, d.spread, d.data_seed, d.test_per_class)
        return ds.subset("train"), ds.subset("test")
    train = load_idx_images(d.train_images, d.train_labels or None, "train")
    if d.test_images:
        test = load_idx_images(d.test_images, d.test_labels or None, "test", num_classes=train.num_classes)
    else:
        test = train
    return train, test


def eval_features(state: SiameseState, x: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return encode(state, x.reshape(len(x), -1), arm="online", upto=cfg.run.eval_features)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), ad.L2_EPS)


def evaluate_state(state: SiameseState, train: Dataset, test: Dataset, cfg: RunConfig) -> dict:
    """kNN accuracy and collapse diagnostics of the eval features; alignment and
    uniformity of the normalized online predictions.
    """
    f_train = eval_features(state, train.flat(), cfg)
    f_test = eval_features(state, test.flat(), cfg)
    acc = knn_classify(
        f_train, train.labels, f_test, test.labels, k=min(cfg.eval.knn_k, len(train)),
        weighted=cfg.eval.knn_weighted, temperature=cfg.eval.knn_temperature,
    )
    normed = _unit_rows(encode(state, test.flat(), arm="online", upto="predictor"))
    vb = make_view_batch(test, np.arange(len(test)), 2, cfg.aug_spec(), rng_stream(cfg.run.seed, "eval"))
    pair = _unit_rows(np.stack([encode(state, vb.views[:, j], arm="online", upto="predictor") for j in range(2)], axis=1))
    cm = collapse_metrics(f_test)
    return {
        "knn_acc": acc,
        "alignment": alignment_metric(pair),
        "uniformity": uniformity_metric(normed),
        "feature_std_mean": cm["feature_std_mean"],
        "effective_rank": cm["effective_rank"],
        "sigma_min": float(cm["sigma_spectrum"][-1]),
        "sigma_max": float(cm["sigma_spectrum"][0]),
    }


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    state: SiameseState | None = None
    initial_state: SiameseState | None = None


def train(cfg: RunConfig, on_row: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.run.epochs`` epochs; one metrics row per epoch.

    Batches are drawn without replacement and the last partial batch is
    dropped so every batch-norm call sees ``batch_size`` rows.
    """
    seed = cfg.run.seed
    train_ds, test_ds = build_datasets(cfg)
    weights = cfg.loss_weights()
    aug = cfg.aug_spec()
    batch = min(cfg.optim.batch_size, len(train_ds))
    steps_per_epoch = max(1, len(train_ds) // batch)
    ocfg = cfg.optim_config(steps_per_epoch)
    epochs = cfg.run.epochs
    total_steps = max(1, epochs * steps_per_epoch)
    spec = cfg.mlp_spec(train_ds.input_dim)
    state = init_state(
        spec, rng_stream(seed, "init"), tau_base=cfg.ema.tau_base, total_steps=total_steps,
        bias_correction=cfg.ema.bias_correction,
    )
    if cfg.ema.schedule == "constant":
        state = replace(state, tau_override=cfg.ema.tau_base)
    result = TrainResult(initial_state=state)
    data_rng = rng_stream(seed, "data")
    aug_rng = rng_stream(seed, "aug")
    noise_rng = rng_stream(seed, "noise")
    step_fn = lars_step if cfg.optim.optimizer == "lars" else sgd_momentum_step
    opt_buffers: dict = {}
    mc_scale = (cfg.augment.multicrop_scale_min, cfg.augment.multicrop_scale_max)
    for epoch in range(1, epochs + 1):
        sums = {"L_c": 0.0, "L_b": 0.0, "L_s": 0.0, "total": 0.0}
        order = data_rng.permutation(len(train_ds))
        lr = tau = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * batch : (s + 1) * batch]
            if weights.objective == "multicrop":
                vb = make_multicrop_batch(train_ds, idx, weights.multicrop_V, aug, aug_rng, mc_scale)
            else:
                vb = make_view_batch(train_ds, idx, weights.K, aug, aug_rng)
            noise = draw_noise(len(idx), spec.predictor_out, noise_rng, provenance=(seed, state.step))
            out = forward(state, vb.views, train=True)
            br = total_loss(out, noise, weights)
            ad.backward(br.total)
            grads = {k: t.grad for k, t in out.leaves.items() if t.grad is not None}
            lr = lr_at(state.step, ocfg)
            tau = state.tau()
            theta = step_fn(state.theta, grads, ocfg, lr, opt_buffers)
            state = ema_update(replace(state, theta=theta), tau)
            for k, v in br.as_row().items():
                sums[k] += v
        row = {k: v / steps_per_epoch for k, v in sums.items()}
        row.update(epoch=epoch, lr=lr, tau=tau)
        if epoch % cfg.run.eval_every == 0 or epoch == epochs:
            row.update(evaluate_state(state, train_ds, test_ds, cfg))
        row = {c: row.get(c, "") for c in TRAIN_COLUMNS}
        logger.info("epoch %d total=%.4f knn=%s", epoch, row["total"], row["knn_acc"])
        result.rows.append(row)
        if on_row is not None:
            on_row(row)
    result.state = state
    return result
