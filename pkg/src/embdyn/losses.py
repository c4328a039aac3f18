"""Loss terms and embedding-geometry metrics.

All losses take autodiff :class:`~embdyn.autodiff.Tensor` inputs laid out as
``[n, K, d]`` (images x views x features) unless noted.  Target-side inputs
are treated as constants: pass plain arrays or gradient-free tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor

UNIT_TOL = 1e-6

OBJECTIVES = ("centroid", "byol", "multicrop")
SV_INPUTS = ("raw", "normalized")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective.

    ``objective`` picks the attractive term: ``centroid`` (multiview centroid
    loss), ``byol`` (two views, symmetrized cosine loss) or ``multicrop``
    (two full views plus ``multicrop_V`` small ones).  ``lambda_c`` scales the
    attractive term and exists so the particle simulator can switch it off.
    """

    K: int = 4
    lambda_s: float = 0.0
    lambda_b: float = 0.0
    lambda_c: float = 1.0
    objective: str = "centroid"
    sv_input: str = "raw"
    multicrop_V: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.sv_input not in SV_INPUTS:
            raise ValueError(f"sv_input must be one of {SV_INPUTS}, got {self.sv_input!r}")
        if self.objective == "multicrop":
            if self.K != self.multicrop_V + 2:
                raise ValueError("multicrop objective needs K == multicrop_V + 2")
        elif self.K < 2:
            raise ValueError("K must be >= 2")
        if self.objective == "byol" and self.K != 2:
            raise ValueError("byol objective is defined for K == 2")
        for name in ("lambda_s", "lambda_b", "lambda_c"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.multicrop_V < 0:
            raise ValueError("multicrop_V must be >= 0")


@dataclass(frozen=True)
class NoiseDraw:
    """One unit direction per image, shared by all of that image's views."""

    n_hat: np.ndarray
    provenance: tuple = ()

    def __post_init__(self):
        norms = np.linalg.norm(self.n_hat, axis=1)
        if self.n_hat.ndim != 2 or not np.allclose(norms, 1.0, atol=1e-12):
            raise ValueError("noise rows must be unit vectors")


def draw_noise(n: int, d: int, rng: np.random.Generator, provenance: tuple = ()) -> NoiseDraw:
    """Sample ``n`` directions uniformly on the unit sphere in R^d."""
    g = rng.standard_normal((n, d))
    return NoiseDraw(g / np.linalg.norm(g, axis=1, keepdims=True), provenance)


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _check_unit(x, what: str):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} rows must be unit-norm")


def _check_views(x, what: str) -> tuple[int, int, int]:
    if x.ndim != 3:
        raise ValueError(f"{what} must be shaped [n, K, d], got {x.shape}")
    return x.shape


def byol_loss(p_hat: Tensor, z_prime_hat) -> Tensor:
    """Mean squared distance between normalized predictions and targets, ``[n, d]``."""
    p_hat = ad.as_tensor(p_hat)
    _check_unit(p_hat, "p_hat")
    _check_unit(z_prime_hat, "z_prime_hat")
    diff = p_hat - _const(z_prime_hat)
    return ad.mean(ad.tsum(diff * diff, axis=-1))


def centroid_loss(p_hat: Tensor, z_prime_hat) -> Tensor:
    """Distance of each online view to the centroid of the target views."""
    p_hat = ad.as_tensor(p_hat)
    n, K, d = _check_views(p_hat, "p_hat")
    if K < 2:
        raise ValueError("centroid loss needs K >= 2")
    z = _const(z_prime_hat)
    if z.shape != p_hat.shape:
        raise ValueError("p_hat and z_prime_hat shapes differ")
    centroid = ad.mean(z, axis=1, keepdims=True)
    diff = p_hat - centroid
    return ad.mean(ad.tsum(diff * diff, axis=-1))


def pairwise_loss(p_hat: Tensor, z_prime_hat) -> Tensor:
    """``(1/K^2) sum_{j,l} ||p_j - z_l||^2`` per image, batch-averaged.

    Differs from :func:`centroid_loss` only by the target-variance constant.
    """
    p_hat = ad.as_tensor(p_hat)
    n, K, d = _check_views(p_hat, "p_hat")
    z = _const(z_prime_hat)
    total = None
    for l in range(K):
        diff = p_hat - z[:, l : l + 1, :]
        term = ad.tsum(diff * diff)
        total = term if total is None else total + term
    return total * (1.0 / (n * K * K))


def brownian_loss(p_hat: Tensor, noise: NoiseDraw) -> Tensor:
    """Mean of ``<n_i, p_ij>`` over images and views."""
    p_hat = ad.as_tensor(p_hat)
    n, K, d = _check_views(p_hat, "p_hat")
    if noise.n_hat.shape != (n, d):
        raise ValueError(f"noise shape {noise.n_hat.shape} does not match batch ({n}, {d})")
    return ad.mean(ad.tsum(p_hat * Tensor(noise.n_hat[:, None, :]), axis=-1))


def covariance(p: Tensor) -> Tensor:
    """Unbiased sample covariance of the rows of ``p`` (``[n, d] -> [d, d]``)."""
    p = ad.as_tensor(p)
    if p.ndim != 2:
        raise ValueError("covariance expects [n, d]")
    n = p.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least 2 rows")
    centered = p - ad.mean(p, axis=0)
    return (centered.T @ centered) * (1.0 / (n - 1))


def singular_value_loss(p: Tensor) -> Tensor:
    """Average over views of ``||S_j - I||_F^2``, with ``S_j`` taken over the batch."""
    p = ad.as_tensor(p)
    n, K, d = _check_views(p, "p")
    if n < 2:
        raise ValueError("singular value loss needs n >= 2")
    eye = Tensor(np.eye(d))
    total = None
    for j in range(K):
        term = ad.frobenius_sq(covariance(p[:, j, :]) - eye)
        total = term if total is None else total + term
    return total * (1.0 / K)


def multicrop_byol_loss(p_hat: Tensor, z_prime_hat) -> Tensor:
    """Sum over ordered view pairs ``i != j`` of ``2 - 2 <p_i, z_j>``, batch-averaged."""
    p_hat = ad.as_tensor(p_hat)
    n, M, d = _check_views(p_hat, "p_hat")
    if M < 2:
        raise ValueError("multi-crop loss needs at least 2 views")
    _check_unit(p_hat, "p_hat")
    _check_unit(z_prime_hat, "z_prime_hat")
    z = _const(z_prime_hat)
    all_pairs = ad.inner(ad.tsum(p_hat, axis=1), Tensor(z.data.sum(axis=1)))
    same_view = ad.tsum(ad.inner(p_hat, z), axis=1)
    per_image = (all_pairs - same_view) * -2.0 + 2.0 * M * (M - 1)
    return ad.mean(per_image)


def symmetric_byol_loss(p_hat: Tensor, z_prime_hat) -> Tensor:
    """Two-view loss averaged over both orderings (view 1 predicts view 2 and back)."""
    p_hat = ad.as_tensor(p_hat)
    z = _const(z_prime_hat)
    a = byol_loss(p_hat[:, 0, :], z[:, 1, :])
    b = byol_loss(p_hat[:, 1, :], z[:, 0, :])
    return (a + b) * 0.5


@dataclass
class LossBreakdown:
    total: Tensor
    L_c: float
    L_s: float
    L_b: float
    weighted: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"L_c": self.L_c, "L_b": self.L_b, "L_s": self.L_s, "total": float(self.total.data)}


def attractive_loss(p_hat: Tensor, z_prime_hat, w: LossWeights) -> Tensor:
    if w.objective == "centroid":
        return centroid_loss(p_hat, z_prime_hat)
    if w.objective == "byol":
        return symmetric_byol_loss(p_hat, z_prime_hat)
    return multicrop_byol_loss(p_hat, z_prime_hat)


def combined_loss(p: Tensor, p_hat: Tensor, z_prime_hat, noise: NoiseDraw | None, w: LossWeights) -> LossBreakdown:
    """``lambda_c * L_c + lambda_s * L_s + lambda_b * L_b`` with the raw terms kept for logging.

    Terms with a zero coefficient are still evaluated for logging, but are not
    attached to the graph.
    """
    terms: dict[str, Tensor] = {}
    weights = {"L_c": w.lambda_c, "L_s": w.lambda_s, "L_b": w.lambda_b}
    terms["L_c"] = attractive_loss(p_hat, z_prime_hat, w)
    sv_in = p if w.sv_input == "raw" else p_hat
    if p.shape[0] >= 2:
        terms["L_s"] = singular_value_loss(sv_in if w.lambda_s else _const(sv_in))
    else:
        if w.lambda_s:
            raise ValueError("singular value loss needs n >= 2")
        terms["L_s"] = Tensor(0.0)
    if noise is not None:
        terms["L_b"] = brownian_loss(p_hat if w.lambda_b else _const(p_hat), noise)
    else:
        if w.lambda_b:
            raise ValueError("a NoiseDraw is required when lambda_b > 0")
        terms["L_b"] = Tensor(0.0)
    total = None
    weighted = {}
    for key in ("L_c", "L_s", "L_b"):
        coef = weights[key]
        if coef == 0.0:
            weighted[key] = 0.0
            continue
        part = terms[key] if coef == 1.0 else terms[key] * coef
        weighted[key] = float(part.data)
        total = part if total is None else total + part
    if total is None:
        total = Tensor(0.0)
    return LossBreakdown(
        total=total,
        L_c=float(terms["L_c"].data),
        L_s=float(terms["L_s"].data),
        L_b=float(terms["L_b"].data),
        weighted=weighted,
    )


def total_loss(outputs, noise: NoiseDraw | None, w: LossWeights) -> LossBreakdown:
    """Combined objective on a :class:`~embdyn.model.ForwardOutputs`."""
    return combined_loss(outputs.p, outputs.p_hat, outputs.z_prime_hat, noise, w)


def alignment_metric(p_hat: np.ndarray) -> float:
    """Mean squared distance over within-image view pairs of a ``[n, K, d]`` array."""
    x = np.asarray(p_hat.data if isinstance(p_hat, Tensor) else p_hat)
    if x.ndim != 3 or x.shape[1] < 2:
        raise ValueError("alignment needs [n, K>=2, d] views")
    K = x.shape[1]
    vals = [np.sum((x[:, j] - x[:, l]) ** 2, axis=1) for j in range(K) for l in range(j + 1, K)]
    return float(np.mean(vals))


def uniformity_metric(p_hat: np.ndarray, t: float = 2.0) -> float:
    """``log mean_{i<k} exp(-t ||x_i - x_k||^2)`` over rows of ``[n, d]``."""
    x = np.asarray(p_hat.data if isinstance(p_hat, Tensor) else p_hat)
    n = x.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least 2 points")
    d2 = pdist(x, "sqeuclidean")
    return float(logsumexp(-t * d2) - np.log(d2.size))
