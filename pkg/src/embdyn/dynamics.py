"""Network-free particle simulator.

Each image owns a group of ``K`` particles in R^d.  The fast (online)
positions move under the gradient of the combined loss; the slow (target)
positions follow them by an exponential moving average.  Losses see the
fast positions re-normalized to the unit sphere, while the singular value
term sees the raw positions.

Forces are gradients of the batch-summed loss, i.e. ``n`` times the gradient
of the batch-mean loss, so the per-particle step does not shrink as the
number of images grows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .checkpoint import save_arrays
from .losses import LossWeights, NoiseDraw, combined_loss, draw_noise

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = (
    "step", "L_c", "L_b", "L_s", "mean_pairwise_dist", "within_group_spread",
    "sigma_min", "sigma_max", "link_stretch_corr",
)


@dataclass
class ParticleSystem:
    """Fast and slow particle positions, both ``[n, K, d]``.

    ``group_ids[i, j]`` is the image index of particle ``(i, j)``; by
    construction it equals ``i``.  ``rng`` supplies the per-step noise.
    """

    fast: np.ndarray
    slow: np.ndarray
    weights: LossWeights
    rng: np.random.Generator
    tau: float = 0.99
    step_size: float = 0.05
    momentum: float = 0.9
    velocity: np.ndarray | None = None
    step: int = 0
    seed: int = 0
    group_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.fast = np.array(self.fast, dtype=np.float64)
        self.slow = np.array(self.slow, dtype=np.float64)
        if self.fast.ndim != 3:
            raise ValueError(f"positions must be [n, K, d], got {self.fast.shape}")
        if self.fast.shape != self.slow.shape:
            raise ValueError("fast and slow positions differ in shape")
        n, K, _ = self.fast.shape
        if n < 2:
            raise ValueError("particle system needs n >= 2 images")
        if K != self.weights.K:
            raise ValueError(f"positions have K={K} views but weights expect K={self.weights.K}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.step_size < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("step_size must be >= 0 and momentum in [0, 1)")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.fast)
        if self.group_ids is None:
            self.group_ids = np.repeat(np.arange(n)[:, None], K, axis=1)
        if not np.array_equal(np.bincount(self.group_ids.ravel(), minlength=n), np.full(n, K)):
            raise ValueError("every group must hold exactly K particles")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.fast.shape


def init_system(
    n: int,
    K: int,
    d: int,
    weights: LossWeights,
    rng: np.random.Generator,
    init: str = "random",
    scale: float = 1.0,
    **kwargs,
) -> ParticleSystem:
    """``random``: i.i.d. Gaussian positions of std ``scale``.  ``collapsed``:
    every particle at one random point of norm ``scale``.  Slow starts equal to fast.
    """
    if init == "random":
        fast = scale * rng.standard_normal((n, K, d))
    elif init == "collapsed":
        point = rng.standard_normal(d)
        point *= scale / np.linalg.norm(point)
        fast = np.broadcast_to(point, (n, K, d)).copy()
    else:
        raise ValueError(f"init must be 'random' or 'collapsed', got {init!r}")
    return ParticleSystem(fast=fast, slow=fast.copy(), weights=weights, rng=rng, **kwargs)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), ad.L2_EPS)


def _losses(fast: np.ndarray, slow: np.ndarray, noise: NoiseDraw, w: LossWeights):
    p = ad.leaf(fast)
    return p, combined_loss(p, ad.l2_normalize(p), _unit(slow), noise, w)


def loss_gradients(fast: np.ndarray, slow: np.ndarray, noise: NoiseDraw, w: LossWeights) -> dict:
    """Per-term gradients of the batch-mean losses.

    ``L_c`` and ``L_b`` are differentiated with respect to the normalized
    positions, ``L_s`` with respect to the raw ones.
    """
    out = {}
    for key, only in (("L_c", dict(lambda_c=1.0, lambda_s=0.0, lambda_b=0.0)), ("L_b", dict(lambda_c=0.0, lambda_s=0.0, lambda_b=1.0))):
        p_hat = ad.leaf(_unit(fast))
        br = combined_loss(ad.leaf(fast), p_hat, _unit(slow), noise, replace(w, **only))
        ad.backward(br.total)
        out[key] = p_hat.grad if p_hat.grad is not None else np.zeros_like(fast)
    p = ad.leaf(fast)
    br = combined_loss(p, ad.l2_normalize(p), _unit(slow), noise, replace(w, lambda_c=0.0, lambda_b=0.0, lambda_s=1.0))
    ad.backward(br.total)
    out["L_s"] = p.grad
    return out


def within_group_spread(x: np.ndarray) -> float:
    """Root mean squared distance of each unit-normalized particle to its group centroid."""
    u = _unit(x)
    return float(np.sqrt(np.mean(np.sum((u - u.mean(axis=1, keepdims=True)) ** 2, axis=-1))))


def between_group_distance(x: np.ndarray) -> float:
    """Mean distance between unit-normalized particles of different groups."""
    n, K, d = x.shape
    u = _unit(x).reshape(n * K, d)
    dist = pdist(u)
    groups = np.repeat(np.arange(n), K)
    i, j = np.triu_indices(n * K, k=1)
    return float(dist[groups[i] != groups[j]].mean())


def spectrum_extremes(x: np.ndarray) -> tuple[float, float]:
    """Smallest and largest eigenvalue over the per-view covariances of raw positions."""
    n, K, _ = x.shape
    lo, hi = np.inf, -np.inf
    for j in range(K):
        ev = np.linalg.eigvalsh(np.cov(x[:, j, :], rowvar=False, ddof=1))
        lo, hi = min(lo, ev[0]), max(hi, ev[-1])
    return float(lo), float(hi)


def _group_sq_spread(x: np.ndarray) -> np.ndarray:
    u = _unit(x)
    return np.mean(np.sum((u - u.mean(axis=1, keepdims=True)) ** 2, axis=-1), axis=1)


def link_stretch_correlation(before: np.ndarray, after: np.ndarray, slow: np.ndarray) -> float:
    """Pearson correlation between link strength and stretch across groups.

    A group's link strength is the mean cosine similarity of its slow
    positions; its stretch is the change of its squared spread over the
    step.  Returns 0 when either quantity is constant across groups.
    """
    u = _unit(slow)
    K = u.shape[1]
    gram = np.einsum("ikd,ild->ikl", u, u)
    strength = (gram.sum(axis=(1, 2)) - K) / (K * (K - 1))
    stretch = _group_sq_spread(after) - _group_sq_spread(before)
    if np.ptp(strength) < 1e-12 or np.ptp(stretch) < 1e-15:
        return 0.0
    return float(np.corrcoef(strength, stretch)[0, 1])


def geometry(sys: ParticleSystem) -> dict:
    lo, hi = spectrum_extremes(sys.fast)
    return {
        "mean_pairwise_dist": between_group_distance(sys.fast),
        "within_group_spread": within_group_spread(sys.fast),
        "sigma_min": lo,
        "sigma_max": hi,
    }


def ema_positions(slow: np.ndarray, fast: np.ndarray, tau: float) -> np.ndarray:
    """``tau * slow + (1 - tau) * fast`` with exact copy/freeze at the endpoints."""
    if tau == 0.0:
        return fast.copy()
    if tau == 1.0:
        return slow.copy()
    return tau * slow + (1.0 - tau) * fast


def particle_step(sys: ParticleSystem) -> tuple[ParticleSystem, dict]:
    """Advance one step.

    Loss terms in the diagnostics are those evaluated on the incoming
    positions; the geometric entries describe the outgoing state.
    """
    n, K, d = sys.shape
    noise = draw_noise(n, d, sys.rng, provenance=(sys.seed, sys.step))
    p, br = _losses(sys.fast, sys.slow, noise, sys.weights)
    ad.backward(br.total)
    grad = p.grad if p.grad is not None else np.zeros_like(sys.fast)
    force = n * grad
    velocity = sys.momentum * sys.velocity + force
    fast = sys.fast - sys.step_size * velocity
    slow = ema_positions(sys.slow, fast, sys.tau)
    new = replace(sys, fast=fast, slow=slow, velocity=velocity, step=sys.step + 1)
    diag = {"step": new.step, "L_c": br.L_c, "L_b": br.L_b, "L_s": br.L_s}
    diag.update(geometry(new))
    diag["link_stretch_corr"] = link_stretch_correlation(sys.fast, fast, sys.slow)
    return new, diag


def initial_diagnostics(sys: ParticleSystem) -> dict:
    """Row 0: losses and geometry of the starting state.

    ``L_b`` is reported as 0, its expectation over the noise, so that
    recording the row consumes no randomness.
    """
    p, br = _losses(sys.fast, sys.slow, None, replace(sys.weights, lambda_b=0.0))
    row = {"step": sys.step, "L_c": br.L_c, "L_b": 0.0, "L_s": br.L_s}
    row.update(geometry(sys))
    row["link_stretch_corr"] = 0.0
    return row


@dataclass
class SimulationResult:
    rows: list
    final: ParticleSystem


def run_simulation(sys: ParticleSystem, steps: int, schedule=None, dump_path=None) -> SimulationResult:
    """Run ``steps`` steps and collect one diagnostics row per state (row 0 is the start).

    ``schedule(step) -> step_size`` optionally overrides the constant step
    size.  ``dump_path`` receives the final state in the checkpoint
    container format.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rows = [initial_diagnostics(sys)]
    for _ in range(steps):
        if schedule is not None:
            sys = replace(sys, step_size=float(schedule(sys.step)))
        sys, diag = particle_step(sys)
        rows.append(diag)
    if dump_path is not None:
        dump_state(dump_path, sys)
    return SimulationResult(rows=rows, final=sys)


def dump_state(path, sys: ParticleSystem):
    meta = {"step": sys.step, "tau": sys.tau, "step_size": sys.step_size, "momentum": sys.momentum, "seed": sys.seed}
    save_arrays(path, {"fast": sys.fast, "slow": sys.slow, "velocity": sys.velocity}, meta)


def ema_track(signal: np.ndarray, tau: float) -> np.ndarray:
    """Slow trajectory produced by the simulator's EMA rule from a prescribed fast one."""
    signal = np.asarray(signal, dtype=np.float64)
    out = np.empty_like(signal)
    slow = signal[0].copy()
    for t in range(len(signal)):
        slow = ema_positions(slow, signal[t], tau)
        out[t] = slow
    return out


def estimate_lag(fast: np.ndarray, slow: np.ndarray, max_lag: int) -> float:
    """Lag in steps at which ``slow`` best matches a delayed ``fast``.

    Maximizes the cross-correlation of the mean-removed series over integer
    lags ``0..max_lag`` and refines it with a parabola through the peak.
    Multi-dimensional series are flattened per time step and summed.
    """
    x = np.asarray(fast, dtype=np.float64).reshape(len(fast), -1)
    y = np.asarray(slow, dtype=np.float64).reshape(len(slow), -1)
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    T = len(x)
    if not 1 <= max_lag < T:
        raise ValueError("max_lag must lie in [1, len - 1]")
    cc = np.array([np.sum(x[: T - k] * y[k:]) / (T - k) for k in range(max_lag + 1)])
    k = int(np.argmax(cc))
    if 0 < k < max_lag:
        a, b, c = cc[k - 1], cc[k], cc[k + 1]
        denom = a - 2 * b + c
        if denom != 0:
            return k + 0.5 * (a - c) / denom
    return float(k)
