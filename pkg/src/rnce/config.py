"""Declarative experiment configuration (JSON) with defaults and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Any

from .datasets import CTX_DIM, EVENT_DIM
from .edm import EdmConfig
from .training import TrainConfig

TASKS = ("pinwheel", "spiral", "gaussian1d")
METHODS = ("rnce", "irnce", "ibc", "nf", "edm", "edm_phi")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class SamplerConfig:
    """Inference settings. ``kind`` picks the default sampler for the method."""

    kind: str = "two_stage"  # two_stage | three_stage | flow | pflow | langevin
    mcmc: str = "langevin"
    T_mcmc: int = 100
    eta: float = 1e-3
    leapfrog_steps: int = 50
    t_lower: float = 0.9
    budget: int = 200
    eta_sde: float = 1e-2
    eta_mcmc: float = 1e-3
    flow_steps: int = 64
    flow_lp: int = 9
    ibc_box: float = 4.0


@dataclasses.dataclass
class EvalConfig:
    n_samples: int = 8192
    grid_n: int = 256
    box: float = 4.0


@dataclasses.dataclass
class ExperimentConfig:
    task: str = "pinwheel"
    method: str = "rnce"
    seed: int = 0
    n_data: int = 50_000
    out_dir: str = "runs/default"
    energy_arch: dict | None = None
    flow_arch: dict | None = None
    vf_arch: dict | None = None
    flow_steps: int = 16
    flow_lp: int = 5
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    baseline_steps: int = 20_000
    baseline_batch: int = 128
    baseline_lr: float = 1e-3
    edm: EdmConfig = dataclasses.field(default_factory=EdmConfig)
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        c, d = CTX_DIM[self.task], EVENT_DIM[self.task]
        ti = 10 if self.method in ("irnce", "edm_phi") else 0
        if self.energy_arch is None and self.task == "gaussian1d":
            self.energy_arch = {"kind": "gaussian_mean", "event_dim": 1}
        if self.flow_arch is None and self.task == "gaussian1d":
            self.flow_arch = {"kind": "concatsquash_vf", "widths": [16], "event_dim": 1}
        if self.energy_arch is None:
            self.energy_arch = {"kind": "mlp_energy", "widths": [32] * 8, "time_embed_dim": ti,
                                "residual": True, "ctx_dim": c, "event_dim": d}
        if self.flow_arch is None:
            self.flow_arch = {"kind": "concatsquash_vf", "widths": [64, 64], "time_embed_dim": 0,
                              "residual": False, "ctx_dim": c, "event_dim": d}
        if self.vf_arch is None:
            kind = "mlp_energy" if self.method == "edm_phi" else "mlp_vf"
            self.vf_arch = {"kind": kind, "widths": [48] * 8, "time_embed_dim": 10,
                            "residual": True, "ctx_dim": c, "event_dim": d}

    # --- serialisation ---

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


_NESTED = {"train": TrainConfig, "edm": EdmConfig, "sampler": SamplerConfig, "eval": EvalConfig}


def _build(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where or 'config'}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is ExperimentConfig else None
        if sub is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{k} must be an object")
            kw[k] = _build(sub, v, k)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, pairs) -> dict:
    """Apply ``key=value`` overrides to a raw config dict; dotted keys reach sections (``train.K=9``).

    Overrides act on the user's dict before defaults are resolved, so
    changing ``task`` also changes the derived architecture defaults.
    """
    d = json.loads(json.dumps(raw))
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, val = pair.split("=", 1)
        parts = key.split(".")
        fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
        if parts[0] not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        node = d
        for depth, p in enumerate(parts[:-1]):
            sub = _NESTED.get(p) if depth == 0 else None
            if depth == 0 and sub is None and not p.endswith("_arch"):
                raise ConfigError(f"override key {key!r} does not name a config section")
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
            if sub is not None and parts[-1] not in {f.name for f in dataclasses.fields(sub)}:
                raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(val)
    return d


def load_config(path: str, overrides=()) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))
