"""Finite-difference suite over every differentiable op, loss and network stage.

Each case draws a random instance from a generator and returns a scalar
function of autodiff tensors together with its input arrays.  Tensor-valued
ops are reduced to a scalar by an inner product with a fixed random
cotangent, so every entry of the Jacobian-vector product is exercised.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .model import MlpSpec, init_params, stage_forward

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class Sizes:
    n: int = 4
    K: int = 2
    d: int = 3


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable[[np.random.Generator, Sizes], tuple[Callable[..., ad.Tensor], list[np.ndarray]]]


def _project(fn, shape_rng: np.random.Generator, shape):
    """Scalarize a tensor-valued ``fn`` with a random cotangent."""
    w = shape_rng.standard_normal(shape)
    return lambda *xs: ad.tsum(fn(*xs) * ad.Tensor(w))


def _u(rng, shape):
    """Inputs are drawn uniformly from [-2, 2]."""
    return rng.uniform(-2.0, 2.0, shape)


def _away_from_zero(rng, shape, margin=0.1):
    return rng.uniform(margin, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _binary(op):
    def build(rng, s):
        a, b = _u(rng, (s.n, s.d)), _u(rng, (s.n, s.d))
        return _project(op, rng, op(ad.Tensor(a), ad.Tensor(b)).shape), [a, b]
    return build


def _unary(op, shape_of, sample=None):
    def build(rng, s):
        shape = shape_of(s)
        x = sample(rng, shape) if sample else _u(rng, shape)
        out_shape = op(ad.Tensor(x)).shape
        return _project(op, rng, out_shape), [x]
    return build


def _matmul(rng, s):
    a, b = _u(rng, (s.n, s.d)), _u(rng, (s.d, s.d + 1))
    return _project(ad.matmul, rng, (s.n, s.d + 1)), [a, b]


def _stack(rng, s):
    xs = [_u(rng, (s.n, s.d)) for _ in range(s.K)]
    return _project(lambda *ts: ad.stack(ts, axis=1), rng, (s.n, s.K, s.d)), xs


def _norm_layer(kind):
    def build(rng, s):
        n = max(s.n, 2)
        x, gamma, beta = _u(rng, (n, s.d + 1)), 1.0 + 0.1 * _u(rng, s.d + 1), _u(rng, s.d + 1)
        if kind == "layer":
            op = ad.layer_norm
        else:
            def op(x, g, b):
                return ad.batch_norm(x, g, b, np.zeros(s.d + 1), np.ones(s.d + 1), train=kind == "batch_train")
        return _project(op, rng, (n, s.d + 1)), [x, gamma, beta]
    return build


def _xent(rng, s):
    labels = rng.integers(0, s.d, size=s.n)
    return (lambda z: ad.softmax_cross_entropy(z, labels)), [_u(rng, (s.n, s.d))]


def _views(rng, s, K=None):
    return _u(rng, (s.n, K or s.K, s.d))


def _byol(rng, s):
    z = _unit(_u(rng, (s.n, s.d)))
    return (lambda p: L.byol_loss(ad.l2_normalize(p), z)), [_u(rng, (s.n, s.d))]


def _target_case(loss_fn, K=None):
    def build(rng, s):
        z = _unit(_views(rng, s, K))
        return (lambda p: loss_fn(ad.l2_normalize(p), z)), [_views(rng, s, K)]
    return build


def _brownian(rng, s):
    noise = L.draw_noise(s.n, s.d, rng)
    return (lambda p: L.brownian_loss(ad.l2_normalize(p), noise)), [_views(rng, s)]


def _covariance(rng, s):
    n = max(s.n, 2)
    return _project(L.covariance, rng, (s.d, s.d)), [_u(rng, (n, s.d))]


def _sv(rng, s):
    n = max(s.n, 2)
    return L.singular_value_loss, [_u(rng, (n, s.K, s.d))]


def _combined(rng, s):
    n = max(s.n, 2)
    z = _unit(_u(rng, (n, s.K, s.d)))
    noise = L.draw_noise(n, s.d, rng)
    w = L.LossWeights(K=s.K, lambda_s=0.004, lambda_b=0.5)

    def fn(p):
        return L.combined_loss(p, ad.l2_normalize(p), z, noise, w).total

    return fn, [_u(rng, (n, s.K, s.d))]


def _stage(stage, norm):
    def build(rng, s):
        n = max(s.n, 2)
        spec = MlpSpec(
            input_dim=s.d + 1, backbone_widths=(s.d + 2, s.d + 2), projector_hidden=s.d + 3, projector_out=s.d,
            predictor_hidden=s.d + 3, predictor_out=s.d, backbone_norm=norm, head_norm=norm,
        )
        params, buffers = init_params(spec, rng)
        names = sorted(k for k in params if k.startswith(stage + "."))
        width = {"backbone": spec.input_dim, "projector": spec.backbone_widths[-1], "predictor": spec.projector_out}[stage]
        while True:
            x = _u(rng, (n, width))
            # perturb the init so biases and norm affines are not at special values
            arrays = [params[k] + 0.1 * _u(rng, params[k].shape) for k in names]
            trace: list = []
            consts = {k: ad.Tensor(a) for k, a in zip(names, arrays)}
            stage_forward(spec, stage, consts, {k: v.copy() for k, v in buffers.items()}, ad.Tensor(x), True, trace)
            # resample draws that put a ReLU input next to its kink
            if all(np.min(np.abs(t)) > KINK_MARGIN for t in trace):
                break

        def fn(x_t, *ps):
            bufs = {k: v.copy() for k, v in buffers.items()}
            out = stage_forward(spec, stage, dict(zip(names, ps)), bufs, x_t, train=True)
            return out

        out_shape = (n, spec.stage_layers(stage)[-1][1])
        return _project(fn, rng, out_shape), [x] + arrays
    return build


_SHAPE_ND = lambda s: (s.n, s.d)  # noqa: E731

REGISTRY: tuple[GradCase, ...] = (
    GradCase("add", _binary(ad.add)),
    GradCase("sub", _binary(ad.sub)),
    GradCase("mul", _binary(ad.mul)),
    GradCase("matmul", _matmul),
    GradCase("relu", _unary(ad.relu, _SHAPE_ND, _away_from_zero)),
    GradCase("sum", _unary(lambda x: ad.tsum(x, axis=0), _SHAPE_ND)),
    GradCase("mean", _unary(lambda x: ad.mean(x, axis=1, keepdims=True), _SHAPE_ND)),
    GradCase("transpose", _unary(ad.transpose, _SHAPE_ND)),
    GradCase("reshape", _unary(lambda x: ad.reshape(x, (-1,)), _SHAPE_ND)),
    GradCase("getitem", _unary(lambda x: ad.getitem(x, (slice(None), [0, 0, -1])), _SHAPE_ND)),
    GradCase("stack", _stack),
    GradCase("frobenius_sq", _unary(ad.frobenius_sq, _SHAPE_ND)),
    GradCase("inner", _binary(ad.inner)),
    GradCase("exp", _unary(ad.exp, _SHAPE_ND)),
    GradCase("log", _unary(ad.log, _SHAPE_ND, lambda rng, sh: rng.uniform(0.5, 2.0, sh))),
    GradCase("l2_normalize", _unary(ad.l2_normalize, _SHAPE_ND)),
    GradCase("layer_norm", _norm_layer("layer")),
    GradCase("batch_norm_train", _norm_layer("batch_train")),
    GradCase("batch_norm_eval", _norm_layer("batch_eval")),
    GradCase("softmax_cross_entropy", _xent),
    GradCase("byol_loss", _byol),
    GradCase("centroid_loss", _target_case(L.centroid_loss)),
    GradCase("pairwise_loss", _target_case(L.pairwise_loss)),
    GradCase("brownian_loss", _brownian),
    GradCase("covariance", _covariance),
    GradCase("singular_value_loss", _sv),
    GradCase("multicrop_loss", _target_case(L.multicrop_byol_loss, K=4)),
    GradCase("symmetric_byol_loss", _target_case(L.symmetric_byol_loss, K=2)),
    GradCase("total_loss", _combined),
    GradCase("backbone_bn", _stage("backbone", "batch")),
    GradCase("projector_ln", _stage("projector", "layer")),
    GradCase("predictor_none", _stage("predictor", "none")),
)


def select_cases(ops: str | list[str] | None = "all", registry=REGISTRY) -> list[GradCase]:
    """``"all"``, a comma-separated string or a list of case names."""
    if ops is None or ops == "all":
        return list(registry)
    names = [o.strip() for o in ops.split(",")] if isinstance(ops, str) else list(ops)
    names = [o for o in names if o]
    by_name = {c.name: c for c in registry}
    unknown = [o for o in names if o not in by_name]
    if unknown:
        raise ValueError(f"unknown gradcheck ops: {', '.join(unknown)}")
    return [by_name[o] for o in names]


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    passed: bool


def run_gradcheck(
    cases: list[GradCase],
    seed: int = 0,
    instances: int = 100,
    sizes: Sizes = Sizes(),
    tol: float = TOLERANCE,
) -> list[CaseResult]:
    """Check every case on ``instances`` random draws.  An empty list passes with a warning."""
    if not cases:
        logger.warning("gradcheck: empty op list, nothing to check")
        return []
    results = []
    for ci, case in enumerate(cases):
        rng = np.random.default_rng([seed, ci])
        worst = 0.0
        for _ in range(instances):
            fn, inputs = case.build(rng, sizes)
            worst = max(worst, ad.gradcheck(fn, inputs))
        results.append(CaseResult(case.name, instances, worst, worst < tol))
    return results


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'op':24s} {'instances':>9s} {'max_rel_err':>12s}  status"]
    for r in results:
        lines.append(f"{r.name:24s} {r.instances:9d} {r.max_rel_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def timed_run(*args, **kwargs) -> tuple[list[CaseResult], float]:
    t0 = time.perf_counter()
    res = run_gradcheck(*args, **kwargs)
    return res, time.perf_counter() - t0
