"""Run configuration: sectioned ``key = value`` text, typed and validated up front.

Example::

    [loss]
    K = 4
    lambda_s = 0.004
    lambda_b = 0.5

Overrides use ``section.key=value``.  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import AugSpec
from .losses import LossWeights
from .model import MlpSpec
from .optim import OptimConfig

STREAMS = {"init": 0, "aug": 1, "noise": 2, "probe": 3, "data": 4, "eval": 5}


class ConfigError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent generator derived from the master seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class RunSection:
    seed: int = 0
    epochs: int = 20
    eval_every: int = 5
    eval_features: str = "backbone"


@dataclass
class DatasetSection:
    kind: str = "gaussian"
    num_classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    d_in: int = 32
    spread: float = 0.2
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class AugmentSection:
    crop_p: float = 1.0
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 1.0
    solarize_p: float = 0.2
    noise_p: float = 0.0
    noise_std: float = 0.05
    vector_noise_p: float = 1.0
    vector_noise_std: float = 0.3
    vector_dropout_p: float = 0.5
    vector_dropout_rate: float = 0.2
    multicrop_scale_min: float = 0.05
    multicrop_scale_max: float = 0.2


@dataclass
class ModelSection:
    backbone_widths: tuple = (256, 256)
    projector_hidden: int = 512
    projector_out: int = 128
    predictor_hidden: int = 512
    backbone_norm: str = "batch"
    head_norm: str = "batch"
    bn_momentum: float = 0.1


@dataclass
class LossSection:
    objective: str = "centroid"
    K: int = 4
    lambda_s: float = 0.004
    lambda_b: float = 0.5
    lambda_c: float = 1.0
    sv_input: str = "raw"
    multicrop_V: int = 0


@dataclass
class OptimSection:
    optimizer: str = "lars"
    base_lr: float = 0.4
    batch_size: int = 128
    weight_decay: float = 1e-5
    momentum: float = 0.9
    warmup_epochs: int = 10
    trust_coefficient: float = 1e-3
    trust_clip: bool = False


@dataclass
class EmaSection:
    tau_base: float = 0.996
    bias_correction: bool = True
    schedule: str = "cosine"


@dataclass
class EvalSection:
    protocol: str = "knn"
    knn_k: int = 5
    knn_weighted: bool = False
    knn_temperature: float = 0.07
    probe_epochs: int = 100
    probe_lr: float = 0.5
    probe_batch_size: int = 64
    probe_momentum: float = 0.9
    probe_weight_decay: float = 0.0


@dataclass
class SimulateSection:
    n: int = 64
    K: int = 2
    d: int = 8
    steps: int = 200
    step_size: float = 0.05
    momentum: float = 0.9
    tau: float = 0.99
    init: str = "random"
    init_scale: float = 1.0
    lambda_c: float = 1.0
    lambda_s: float = 0.004
    lambda_b: float = 0.5
    svg: bool = False


@dataclass
class GradcheckSection:
    instances: int = 100
    n: int = 4
    K: int = 2
    d: int = 3
    ops: str = "all"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    ema: EmaSection = field(default_factory=EmaSection)
    eval: EvalSection = field(default_factory=EvalSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    # domain objects built from the sections; each validates its own preconditions

    def loss_weights(self) -> LossWeights:
        s = self.loss
        return LossWeights(
            K=s.K, lambda_s=s.lambda_s, lambda_b=s.lambda_b, lambda_c=s.lambda_c,
            objective=s.objective, sv_input=s.sv_input, multicrop_V=s.multicrop_V,
        )

    def aug_spec(self) -> AugSpec:
        a = self.augment
        return AugSpec(
            crop_p=a.crop_p, crop_scale=(a.crop_scale_min, a.crop_scale_max), flip_p=a.flip_p,
            jitter_p=a.jitter_p, brightness=a.brightness, contrast=a.contrast, saturation=a.saturation,
            hue=a.hue, gray_p=a.gray_p, blur_p=a.blur_p, solarize_p=a.solarize_p, noise_p=a.noise_p,
            noise_std=a.noise_std, vector_noise_p=a.vector_noise_p, vector_noise_std=a.vector_noise_std,
            vector_dropout_p=a.vector_dropout_p, vector_dropout_rate=a.vector_dropout_rate,
        )

    def mlp_spec(self, input_dim: int) -> MlpSpec:
        m = self.model
        return MlpSpec(
            input_dim=input_dim, backbone_widths=tuple(m.backbone_widths), projector_hidden=m.projector_hidden,
            projector_out=m.projector_out, predictor_hidden=m.predictor_hidden, predictor_out=m.projector_out,
            backbone_norm=m.backbone_norm, head_norm=m.head_norm, bn_momentum=m.bn_momentum,
        )

    def optim_config(self, steps_per_epoch: int) -> OptimConfig:
        o = self.optim
        epochs = self.run.epochs
        return OptimConfig(
            base_lr=o.base_lr, batch_size=o.batch_size, K=self.loss.K, weight_decay=o.weight_decay,
            momentum=o.momentum, warmup_epochs=min(o.warmup_epochs, epochs), total_epochs=epochs,
            steps_per_epoch=steps_per_epoch, trust_coefficient=o.trust_coefficient, trust_clip=o.trust_clip,
        )

    def validate(self) -> "RunConfig":
        try:
            self._validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def _validate(self):
        r = self.run
        if r.epochs < 0 or r.eval_every < 1:
            raise ConfigError("run.epochs must be >= 0 and run.eval_every >= 1")
        if r.eval_features not in ("backbone", "projector"):
            raise ConfigError("run.eval_features must be backbone or projector")
        d = self.dataset
        if d.kind not in ("gaussian", "idx"):
            raise ConfigError("dataset.kind must be gaussian or idx")
        if d.kind == "gaussian":
            if d.num_classes < 2 or d.per_class < 1 or d.d_in < 1 or d.test_per_class < 0:
                raise ConfigError("gaussian dataset needs num_classes >= 2, per_class >= 1, d_in >= 1")
            if d.spread <= 0:
                raise ConfigError("dataset.spread must be > 0")
        elif not d.train_images:
            raise ConfigError("dataset.train_images is required for idx datasets")
        self.aug_spec()
        a = self.augment
        if not 0 < a.multicrop_scale_min <= a.multicrop_scale_max <= 1:
            raise ConfigError("multicrop scale range must lie in (0, 1]")
        self.mlp_spec(d.d_in)
        self.loss_weights()
        o = self.optim
        if o.optimizer not in ("lars", "sgd"):
            raise ConfigError("optim.optimizer must be lars or sgd")
        if o.batch_size < 2:
            raise ConfigError("optim.batch_size must be >= 2")
        self.optim_config(1)
        e = self.ema
        if not 0 <= e.tau_base <= 1:
            raise ConfigError("ema.tau_base must lie in [0, 1]")
        if e.schedule not in ("cosine", "constant"):
            raise ConfigError("ema.schedule must be cosine or constant")
        ev = self.eval
        if ev.protocol not in ("knn", "linear", "both"):
            raise ConfigError("eval.protocol must be knn, linear or both")
        if ev.knn_k < 1 or ev.probe_epochs < 1:
            raise ConfigError("eval.knn_k and eval.probe_epochs must be >= 1")
        s = self.simulate
        if s.n < 2 or s.K < 2 or s.d < 1 or s.steps < 0:
            raise ConfigError("simulate needs n >= 2, K >= 2, d >= 1, steps >= 0")
        if s.init not in ("random", "collapsed"):
            raise ConfigError("simulate.init must be random or collapsed")
        if not 0 <= s.tau <= 1 or s.step_size < 0:
            raise ConfigError("simulate.tau must lie in [0, 1] and step_size >= 0")
        LossWeights(K=s.K, lambda_s=s.lambda_s, lambda_b=s.lambda_b, lambda_c=s.lambda_c)
        g = self.gradcheck
        if g.instances < 1 or g.n < 2 or g.K < 2 or g.d < 2:
            raise ConfigError("gradcheck needs instances >= 1, n >= 2, K >= 2, d >= 2")


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _section_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _set(cfg: RunConfig, section: str, key: str, raw: str):
    sections = {f.name for f in fields(RunConfig)}
    if section not in sections:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    types = _section_types(type(obj))
    if key not in types:
        raise ConfigError(f"unknown key {section}.{key}")
    setattr(obj, key, _coerce(raw, types[key], f"{section}.{key}"))


def parse_config(text: str = "", overrides: typing.Sequence[str] = ()) -> RunConfig:
    """Build a validated :class:`RunConfig` from config text and ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _set(cfg, section, key, raw)
    return cfg.validate()


def load_config(path: str | Path | None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable text form."""
    lines = []
    for f in fields(cfg):
        lines.append(f"[{f.name}]")
        for k, v in dataclasses.asdict(getattr(cfg, f.name)).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
