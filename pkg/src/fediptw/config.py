"""Experiment configuration: a nested YAML file mapped onto dataclasses.

Every field has a default and the fully resolved configuration is echoed into
the run manifest, so a manifest can itself be passed back as ``--config``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Union

import yaml

from .datagen import DEFAULT_RHO, ConfigError, SyntheticConfig
from .experiment import METHODS, RunSettings
from .federation import FederationConfig
from .propensity import PropensityConfig


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or "csv"
    paths: list = field(default_factory=list)  # one CSV per replication
    replications: int = 10
    n_clients: int = 10
    n_per_client: int = 1000
    d_x: int = 30
    rho: list = field(default_factory=lambda: list(DEFAULT_RHO))
    c0: float = 0.85
    d0: float = 5.2
    coef_var: float = 2.0
    sigma0: float = 1.0
    sigma1: float = 1.0
    strategy_scale: float = 1.0
    rho_concentration: Optional[float] = None


@dataclass
class HospitalSection:
    w_min: float = 0.1
    w_max: float = 10.0
    leave_one_out: bool = True


@dataclass
class ProtocolSection:
    n_folds: int = 10
    n_repeats: int = 20


@dataclass
class EvaluationSection:
    plugin_epochs: int = 50


@dataclass
class ExperimentConfig:
    methods: list = field(default_factory=lambda: ["fed-iptw"])
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    federation: FederationConfig = field(default_factory=FederationConfig)
    propensity: PropensityConfig = field(default_factory=PropensityConfig)
    hospital_weights: HospitalSection = field(default_factory=HospitalSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"unknown method(s) {unknown}; choose from {sorted(METHODS)}")
        if self.protocol.n_folds < 3:
            raise ConfigError("protocol.n_folds must be >= 3")
        if self.protocol.n_repeats < 1:
            raise ConfigError("protocol.n_repeats must be >= 1")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if self.data.source == "csv" and not self.data.paths:
            raise ConfigError("data.paths must list at least one CSV file")
        if self.data.source == "synthetic" and self.data.replications < 1:
            raise ConfigError("data.replications must be >= 1")
        if not 0 < self.hospital_weights.w_min <= self.hospital_weights.w_max:
            raise ConfigError("hospital_weights needs 0 < w_min <= w_max")
        if not 0 < self.propensity.eps_clip < 0.5:
            raise ConfigError("propensity.eps_clip must lie in (0, 0.5)")
        try:
            self.federation.validate()
        except ValueError as exc:
            raise ConfigError(f"federation: {exc}") from exc
        self.synthetic(0).validate()

    @property
    def n_replications(self) -> int:
        return len(self.data.paths) if self.data.source == "csv" else self.data.replications

    def synthetic(self, replication: int) -> SyntheticConfig:
        d = self.data
        return SyntheticConfig(
            n_clients=d.n_clients, n_per_client=d.n_per_client, d_x=d.d_x, rho=tuple(d.rho),
            c0=d.c0, d0=d.d0, coef_var=d.coef_var, sigma0=d.sigma0, sigma1=d.sigma1,
            strategy_scale=d.strategy_scale, rho_concentration=d.rho_concentration,
            seed=self.seed, replication=replication,
        )

    def settings(self) -> RunSettings:
        return RunSettings(
            federation=self.federation, propensity=self.propensity,
            w_min=self.hospital_weights.w_min, w_max=self.hospital_weights.w_max,
            gp_leave_one_out=self.hospital_weights.leave_one_out,
            n_folds=self.protocol.n_folds, seed=self.seed,
            plugin_epochs=self.evaluation.plugin_epochs,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in fields(cls)}
    extra = sorted(set(raw) - set(names))
    if extra:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {extra}")
    kw = {}
    defaults = cls()
    for name, value in raw.items():
        current = getattr(defaults, name)
        key = f"{where}.{name}" if where else name
        if is_dataclass(current):
            kw[name] = _build(type(current), value or {}, key)
        else:
            kw[name] = value
    return cls(**kw)


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    if "method" in raw:
        m = raw.pop("method")
        raw["methods"] = [m] if isinstance(m, str) else list(m)
    cfg = _build(ExperimentConfig, raw, "")
    return cfg


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """Read a YAML config, or the ``config`` block of a run manifest (JSON)."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if isinstance(raw, dict) and "config" in raw and "files" in raw:
        raw = raw["config"]
    return from_dict(raw or {})
