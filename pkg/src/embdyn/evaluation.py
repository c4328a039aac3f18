"""Frozen-feature protocols: k-NN, linear probe, and collapse diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .optim import OptimConfig, lr_at, sgd_momentum_step


DIST_DECIMALS = 12
RANK_RTOL = 1e-18


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), ad.L2_EPS)


def knn_predict(
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    test_feats: np.ndarray,
    k: int,
    weighted: bool = False,
    temperature: float = 0.07,
    num_classes: int | None = None,
) -> np.ndarray:
    """Cosine-distance k-NN labels for each test row.

    Majority vote by default.  Vote ties go to the class whose voters have the
    smallest summed distance, then to the lowest class index.  Neighbors at
    equal distance are taken in train-set order.  ``weighted`` switches to
    ``exp(similarity / temperature)`` votes.  Distances are rounded to
    ``DIST_DECIMALS`` places before ranking.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    n_train = len(train_labels)
    if n_train == 0:
        raise ValueError("empty train set")
    if not 1 <= k <= n_train:
        raise ValueError(f"k must lie in [1, {n_train}], got {k}")
    C = int(num_classes if num_classes is not None else train_labels.max() + 1)
    a = _normalize_rows(train_feats)
    b = _normalize_rows(test_feats)
    # Distances equal up to rounding count as ties, so exactly collapsed
    # features fall back to train-set order instead of float noise.
    dist = np.round(1.0 - b @ a.T, DIST_DECIMALS)
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nd = np.take_along_axis(dist, nbrs, axis=1)
    nl = train_labels[nbrs]
    preds = np.empty(len(b), dtype=np.int64)
    for i in range(len(b)):
        if weighted:
            score = np.bincount(nl[i], weights=np.exp((1.0 - nd[i]) / temperature), minlength=C)
            preds[i] = int(np.argmax(score))
            continue
        votes = np.bincount(nl[i], minlength=C)
        dsum = np.bincount(nl[i], weights=nd[i], minlength=C)
        top = np.flatnonzero(votes == votes.max())
        best = top[np.argmin(dsum[top])]
        preds[i] = int(best)
    return preds


def knn_classify(train_feats, train_labels, test_feats, test_labels, k: int = 5, **kwargs) -> float:
    """Fraction of test rows whose k-NN label matches."""
    preds = knn_predict(train_feats, train_labels, test_feats, k, **kwargs)
    return float(np.mean(preds == np.asarray(test_labels)))


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    standardize: bool = True
    seed: int = 0


def linear_probe(
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    test_feats: np.ndarray,
    test_labels: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(),
    rng: np.random.Generator | None = None,
) -> float:
    """Top-1 accuracy of a softmax classifier trained on frozen features.

    Uses heavy-ball SGD under a cosine schedule with no warmup.  Features are
    copied, never modified in place.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(np.unique(train_labels)) < 2:
        raise ValueError("linear probe needs at least two classes in the train set")
    X = np.array(train_feats, dtype=np.float64)
    Xt = np.array(test_feats, dtype=np.float64)
    if cfg.standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0) + 1e-8
        X = (X - mu) / sd
        Xt = (Xt - mu) / sd
    n, d = X.shape
    C = int(max(train_labels.max(), np.max(test_labels)) + 1)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    steps_per_epoch = max(1, int(np.ceil(n / cfg.batch_size)))
    ocfg = OptimConfig(
        base_lr=cfg.base_lr,
        batch_size=256,
        K=1,
        weight_decay=cfg.weight_decay,
        momentum=cfg.momentum,
        warmup_epochs=0,
        total_epochs=cfg.epochs,
        steps_per_epoch=steps_per_epoch,
    )
    params = {"probe.weight": np.zeros((d, C)), "probe.bias": np.zeros(C)}
    buffers: dict = {}
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            W = ad.leaf(params["probe.weight"])
            b = ad.leaf(params["probe.bias"])
            loss = ad.softmax_cross_entropy(ad.Tensor(X[idx]) @ W + b, train_labels[idx])
            ad.backward(loss)
            grads = {"probe.weight": W.grad, "probe.bias": b.grad}
            params = sgd_momentum_step(params, grads, ocfg, lr_at(step, ocfg), buffers)
            step += 1
    logits = Xt @ params["probe.weight"] + params["probe.bias"]
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(test_labels)))


def effective_rank(eigvals: np.ndarray, floor: float = 0.0) -> float:
    """``exp`` of the entropy of the normalized nonnegative spectrum; 1 for a zero spectrum.

    Eigenvalues at or below ``floor`` are treated as zero.
    """
    lam = np.asarray(eigvals, dtype=np.float64)
    lam = np.where(lam > floor, lam, 0.0)
    total = lam.sum()
    if total <= 0:
        return 1.0
    q = lam / total
    q = q[q > 0]
    return float(np.exp(-np.sum(q * np.log(q))))


def collapse_metrics(feats: np.ndarray) -> dict:
    """``feature_std_mean`` of the row-normalized features, covariance ``effective_rank`` and spectrum.

    Eigenvalues below ``RANK_RTOL`` times the mean squared feature norm are
    rounding residue and do not count toward the rank.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("collapse metrics need at least 2 feature rows")
    normed = _normalize_rows(feats)
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    spectrum = np.sort(np.linalg.eigvalsh((cov + cov.T) / 2.0))[::-1]
    return {
        "feature_std_mean": float(normed.std(axis=0).mean()),
        "effective_rank": effective_rank(spectrum, RANK_RTOL * float(np.mean(np.sum(feats**2, axis=1)))),
        "sigma_spectrum": spectrum,
    }
