"""Siamese MLP: backbone, projector and predictor with an EMA target arm."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_KINDS = ("batch", "layer", "none")
ONLINE_STAGES = ("backbone", "projector", "predictor")
TARGET_STAGES = ("backbone", "projector")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths and normalization for the three stages.

    The backbone is ``input_dim -> backbone_widths...`` with norm+ReLU after
    every layer.  Projector and predictor are two-layer heads
    ``in -> hidden -> out`` with norm+ReLU after the hidden layer only.
    """

    input_dim: int
    backbone_widths: tuple[int, ...] = (256, 256)
    projector_hidden: int = 512
    projector_out: int = 128
    predictor_hidden: int = 512
    predictor_out: int = 128
    backbone_norm: str = "batch"
    head_norm: str = "batch"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.input_dim < 1 or not self.backbone_widths:
            raise ValueError("backbone needs an input width and at least one layer")
        for kind in (self.backbone_norm, self.head_norm):
            if kind not in NORM_KINDS:
                raise ValueError(f"norm kind must be one of {NORM_KINDS}, got {kind!r}")
        if self.predictor_out != self.projector_out:
            raise ValueError("predictor output width must equal projector output width")

    @property
    def feature_dim(self) -> int:
        return self.backbone_widths[-1]

    def stage_layers(self, stage: str) -> list[tuple[int, int, bool]]:
        """``(fan_in, fan_out, has_norm_and_relu)`` per linear layer."""
        if stage == "backbone":
            widths = (self.input_dim, *self.backbone_widths)
            return [(a, b, True) for a, b in zip(widths[:-1], widths[1:])]
        if stage == "projector":
            return [(self.feature_dim, self.projector_hidden, True), (self.projector_hidden, self.projector_out, False)]
        if stage == "predictor":
            return [(self.projector_out, self.predictor_hidden, True), (self.predictor_hidden, self.predictor_out, False)]
        raise KeyError(stage)

    def stage_norm(self, stage: str) -> str:
        return self.backbone_norm if stage == "backbone" else self.head_norm


def init_params(spec: MlpSpec, rng: np.random.Generator, stages=ONLINE_STAGES) -> tuple[dict, dict]:
    """He-uniform weights, zero biases, unit norm scales.  Returns ``(params, buffers)``."""
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for stage in stages:
        norm = spec.stage_norm(stage)
        for i, (fan_in, fan_out, normed) in enumerate(spec.stage_layers(stage)):
            bound = math.sqrt(6.0 / fan_in)
            prefix = f"{stage}.{i}"
            params[f"{prefix}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{prefix}.bias"] = np.zeros(fan_out)
            if normed and norm != "none":
                params[f"{prefix}.norm.gamma"] = np.ones(fan_out)
                params[f"{prefix}.norm.beta"] = np.zeros(fan_out)
            if normed and norm == "batch":
                buffers[f"{prefix}.norm.running_mean"] = np.zeros(fan_out)
                buffers[f"{prefix}.norm.running_var"] = np.ones(fan_out)
    return params, buffers


def stage_forward(
    spec: MlpSpec, stage: str, params: dict, buffers: dict, x: Tensor, train: bool, trace: list | None = None
) -> Tensor:
    """Run one stage.  ``params`` maps names to Tensors (leaves or constants).

    ``trace`` collects every ReLU input when given.
    """
    norm = spec.stage_norm(stage)
    h = x
    for i, (fan_in, fan_out, normed) in enumerate(spec.stage_layers(stage)):
        prefix = f"{stage}.{i}"
        if h.shape[-1] != fan_in:
            raise ValueError(f"{prefix}: expected width {fan_in}, got {h.shape[-1]}")
        h = h @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]
        if not normed:
            continue
        if norm == "batch":
            h = ad.batch_norm(
                h,
                params[f"{prefix}.norm.gamma"],
                params[f"{prefix}.norm.beta"],
                buffers[f"{prefix}.norm.running_mean"],
                buffers[f"{prefix}.norm.running_var"],
                train=train,
                momentum=spec.bn_momentum,
            )
        elif norm == "layer":
            h = ad.layer_norm(h, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
        if trace is not None:
            trace.append(h.data)
        h = ad.relu(h)
    return h


def tau_cosine(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp of the target decay from ``tau_base`` at step 0 to 1 at the end."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


@dataclass
class SiameseState:
    """Online parameters ``theta``, target parameters ``xi`` and the EMA bookkeeping.

    With bias correction on, ``xi_raw`` accumulates the zero-initialized
    moving average and ``xi`` is ``xi_raw / ema_mass``, where ``ema_mass``
    runs the same recurrence on the constant 1 (it equals ``1 - prod(tau)``).
    Dividing by it instead of ``1 - prod(tau)`` keeps a constant stream
    exact to a few ulps even for ``tau`` near 1.
    """

    spec: MlpSpec
    theta: dict
    xi: dict
    theta_buffers: dict
    xi_buffers: dict
    tau_base: float = 0.996
    total_steps: int = 1
    bias_correction: bool = True
    step: int = 0
    ema_mass: float = 0.0
    xi_raw: dict = field(default_factory=dict)
    tau_override: float | None = None

    def tau(self) -> float:
        if self.tau_override is not None:
            return self.tau_override
        return tau_cosine(min(self.step, self.total_steps), self.total_steps, self.tau_base)


def _target_names(names) -> list[str]:
    return [k for k in names if k.split(".", 1)[0] in TARGET_STAGES]


def init_state(spec: MlpSpec, rng: np.random.Generator, **kwargs) -> SiameseState:
    theta, theta_buf = init_params(spec, rng)
    names = _target_names(theta)
    xi = {k: theta[k].copy() for k in names}
    xi_buf = {k: v.copy() for k, v in theta_buf.items() if k.split(".", 1)[0] in TARGET_STAGES}
    xi_raw = {k: np.zeros_like(theta[k]) for k in names}
    return SiameseState(spec=spec, theta=theta, xi=xi, theta_buffers=theta_buf, xi_buffers=xi_buf, xi_raw=xi_raw, **kwargs)


def ema_update(state: SiameseState, tau: float | None = None) -> SiameseState:
    """Move the target toward the online weights and advance the step counter."""
    tau = state.tau() if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    names = list(state.xi)
    for k in names:
        if state.xi[k].shape != state.theta[k].shape:
            raise ValueError(f"shape mismatch for {k}")
    if state.bias_correction:
        raw = {k: tau * state.xi_raw[k] + (1.0 - tau) * state.theta[k] for k in names}
        mass = tau * state.ema_mass + (1.0 - tau)
        if mass > 0.0:
            xi = {k: raw[k] / mass for k in names}
        else:
            xi = {k: state.xi[k].copy() for k in names}
        return replace(state, xi=xi, xi_raw=raw, ema_mass=mass, step=state.step + 1)
    xi = {k: tau * state.xi[k] + (1.0 - tau) * state.theta[k] for k in names}
    return replace(state, xi=xi, step=state.step + 1)


@dataclass
class ForwardOutputs:
    """Per-view outputs stacked as ``[n, K, d]``.

    ``leaves`` holds the gradient-tracking online parameter tensors so the
    caller can read their gradients after :func:`~embdyn.autodiff.backward`.
    """

    z: Tensor
    p: Tensor
    p_hat: Tensor
    z_prime_hat: Tensor
    leaves: dict


def _as_tensors(params: dict, track: bool) -> dict:
    return {k: (ad.leaf(v, name=k) if track else Tensor(v)) for k, v in params.items()}


def forward(state: SiameseState, views: np.ndarray, train: bool = True) -> ForwardOutputs:
    """Online and target passes over every view slice of ``views[n, K, d_in]``.

    Each view slice is a separate pass, so batch-norm statistics never mix
    different augmentations.  The target arm is built from constants, which
    severs its gradient.
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 3 or views.shape[2] != state.spec.input_dim:
        raise ValueError(f"views must be [n, K, {state.spec.input_dim}], got {views.shape}")
    spec = state.spec
    online = _as_tensors(state.theta, track=True)
    target = _as_tensors(state.xi, track=False)
    zs, ps, zts = [], [], []
    for j in range(views.shape[1]):
        v = Tensor(views[:, j, :])
        h = stage_forward(spec, "backbone", online, state.theta_buffers, v, train)
        z = stage_forward(spec, "projector", online, state.theta_buffers, h, train)
        p = stage_forward(spec, "predictor", online, state.theta_buffers, z, train)
        ht = stage_forward(spec, "backbone", target, state.xi_buffers, v, train)
        zt = stage_forward(spec, "projector", target, state.xi_buffers, ht, train)
        zs.append(z)
        ps.append(p)
        zts.append(zt.data)
    p_all = ad.stack(ps, axis=1)
    z_target = np.stack(zts, axis=1)
    norms = np.maximum(np.linalg.norm(z_target, axis=-1, keepdims=True), ad.L2_EPS)
    return ForwardOutputs(
        z=ad.stack(zs, axis=1),
        p=p_all,
        p_hat=ad.l2_normalize(p_all),
        z_prime_hat=Tensor(z_target / norms),
        leaves=online,
    )


def encode(state: SiameseState, x: np.ndarray, arm: str = "online", upto: str = "backbone", train: bool = False) -> np.ndarray:
    """Gradient-free features of ``x[n, d_in]`` after stage ``upto``."""
    params = state.theta if arm == "online" else state.xi
    buffers = state.theta_buffers if arm == "online" else state.xi_buffers
    stages = ONLINE_STAGES if arm == "online" else TARGET_STAGES
    if upto not in stages:
        raise ValueError(f"{arm} arm has no stage {upto!r}")
    consts = {k: Tensor(v) for k, v in params.items()}
    # eval-mode batch norm must not touch the running buffers; train mode gets copies
    bufs = {k: v.copy() for k, v in buffers.items()}
    h = Tensor(np.asarray(x, dtype=np.float64))
    for stage in stages:
        h = stage_forward(state.spec, stage, consts, bufs, h, train)
        if stage == upto:
            break
    return np.array(h.data)
