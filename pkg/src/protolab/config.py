"""Experiment configuration: TOML document with one table per section.

Every key has a default; unknown sections or keys are rejected so that typos
fail loudly instead of silently running the default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigInvalid


@dataclass
class DatasetConfig:
    num_clusters: int = 16
    num_points: int = 4096
    input_dim: int = 16
    cluster_kappa: float = 1000.0
    mixing: str = "uniform"  # uniform | power_law
    mixing_alpha: float = 1.0


@dataclass
class EncoderConfig:
    kind: str = "mlp"  # mlp | linear
    hidden_dim: int = 64
    init_bias: float = 0.0  # norm of a random initial output bias; > 0 starts embeddings in a cone


@dataclass
class HeadConfig:
    num_prototypes: int = 256
    dim: int = 16
    mode: str = "plain"  # plain | vmf
    kappa_scale: float = 1.0


@dataclass
class TemperatureConfig:
    student: float = 0.1
    teacher_start: float = 0.04
    teacher_end: float = 0.07
    warmup_frac: float = 0.1


@dataclass
class MLCDConfig:
    """At most one of centering, Sinkhorn-Knopp and ME-MAX may be active."""

    center: str = "probability"  # probability | logit | none
    center_momentum: float = 0.9
    sinkhorn_iters: int = 0  # 0 disables
    me_max_weight: float = 0.0  # 0 disables
    prior: str = "uniform"  # uniform | power_law
    prior_alpha: float = 1.0

    def active(self) -> list[str]:
        out = []
        if self.center != "none":
            out.append(f"{self.center}_center")
        if self.sinkhorn_iters > 0:
            out.append("sinkhorn")
        if self.me_max_weight > 0:
            out.append("me_max")
        return out

    @property
    def method(self) -> str:
        act = self.active()
        return act[0] if act else "none"


@dataclass
class KoleoConfig:
    kind: str = "none"  # none | proto | data
    weight: float = 0.1
    partition_size: int = 64


@dataclass
class OptimConfig:
    steps: int = 3000
    batch_size: int = 128
    optimizer: str = "adam"  # adam | sgd
    lr: float = 2.0
    momentum: float = 0.9  # heavy-ball momentum for sgd, beta1 for adam
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    ema_start: float = 0.996
    ema_end: float = 1.0
    augment_sigma: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    unique_every: int = 50
    epsilon: float = 0.025


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    temperature: TemperatureConfig = field(default_factory=TemperatureConfig)
    mlcd: MLCDConfig = field(default_factory=MLCDConfig)
    koleo: KoleoConfig = field(default_factory=KoleoConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        d, h, t, m, k, o, r = self.dataset, self.head, self.temperature, self.mlcd, self.koleo, self.optim, self.run
        checks = [
            (d.num_clusters >= 2, "dataset.num_clusters must be >= 2"),
            (d.num_points >= d.num_clusters, "dataset.num_points must be >= num_clusters"),
            (d.input_dim >= 2, "dataset.input_dim must be >= 2"),
            (d.cluster_kappa > 0, "dataset.cluster_kappa must be positive"),
            (d.mixing in ("uniform", "power_law"), "dataset.mixing must be uniform or power_law"),
            (self.encoder.kind in ("mlp", "linear"), "encoder.kind must be mlp or linear"),
            (self.encoder.hidden_dim >= 1, "encoder.hidden_dim must be >= 1"),
            (self.encoder.init_bias >= 0, "encoder.init_bias must be >= 0"),
            (h.num_prototypes >= 2 and h.dim >= 2, "head needs num_prototypes >= 2 and dim >= 2"),
            (h.mode in ("plain", "vmf"), "head.mode must be plain or vmf"),
            (h.mode != "vmf" or h.dim >= 12, "head.mode = vmf needs dim >= 12"),
            (h.kappa_scale > 0, "head.kappa_scale must be positive"),
            (0 < t.teacher_start <= t.student and 0 < t.teacher_end <= t.student,
             "teacher temperatures must be positive and not exceed the student temperature"),
            (0 <= t.warmup_frac <= 1, "temperature.warmup_frac must lie in [0, 1]"),
            (m.center in ("probability", "logit", "none"), "mlcd.center must be probability, logit or none"),
            (0 <= m.center_momentum <= 1, "mlcd.center_momentum must lie in [0, 1]"),
            (m.sinkhorn_iters >= 0 and m.me_max_weight >= 0, "mlcd weights/iterations must be >= 0"),
            (len(m.active()) <= 1, f"at most one MLCD mechanism may be active, got {m.active()}"),
            (m.prior in ("uniform", "power_law"), "mlcd.prior must be uniform or power_law"),
            (m.prior_alpha > 0, "mlcd.prior_alpha must be positive"),
            (k.kind in ("none", "proto", "data"), "koleo.kind must be none, proto or data"),
            (k.weight >= 0, "koleo.weight must be >= 0"),
            (k.partition_size >= 2, "koleo.partition_size must be >= 2"),
            (o.steps >= 1 and o.batch_size >= 2, "optim needs steps >= 1 and batch_size >= 2"),
            (o.batch_size <= d.num_points, "optim.batch_size exceeds dataset.num_points"),
            (o.optimizer in ("adam", "sgd"), "optim.optimizer must be adam or sgd"),
            (o.lr >= 0 and 0 <= o.momentum < 1, "optim.lr must be >= 0 and momentum in [0, 1)"),
            (0 <= o.adam_beta2 < 1 and o.adam_eps > 0, "optim.adam_beta2 must lie in [0, 1) and adam_eps > 0"),
            (0 <= o.ema_start <= o.ema_end <= 1, "need 0 <= ema_start <= ema_end <= 1"),
            (o.augment_sigma >= 0, "optim.augment_sigma must be >= 0"),
            (r.unique_every >= 1, "run.unique_every must be >= 1"),
            (r.epsilon >= 0, "run.epsilon must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigInvalid(msg)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(head={"num_prototypes": 64})``."""
        data = self.to_dict()
        for name, values in sections.items():
            data.setdefault(name, {}).update(values)
        return config_from_dict(data)


def _coerce(section: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigInvalid(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = {}
    for key, val in values.items():
        default = getattr(cls(), key)
        typ = type(default)
        if typ is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if type(val) is not typ:
            raise ConfigInvalid(f"{section}.{key} must be {typ.__name__}, got {type(val).__name__}")
        out[key] = val
    return cls(**out)


def config_from_dict(data: dict) -> ExperimentConfig:
    sections = {f.name: f.default_factory for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigInvalid(f"unknown section(s): {', '.join(unknown)}")
    built = {name: _coerce(name, cls, data.get(name, {})) for name, cls in sections.items()}
    return ExperimentConfig(**built).validate()


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigInvalid(f"cannot parse config: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
