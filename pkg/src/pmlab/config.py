"""Experiment configuration: one JSON file, dotted overrides, stage-scoped hashes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .activation import STRATEGIES
from .suppress import DEFAULT_LAMBDAS, KINDS


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    n_layers: int = 8
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    max_seq_len: int = 64


@dataclass
class DataSection:
    n_facts: int = 200
    n_entities: int = 100
    distractors: bool = True
    reading_per_fact: int = 1


@dataclass
class PretrainSection:
    steps: int = 3000
    lr: float = 3e-3
    batch: int = 32


@dataclass
class ElicitationSection:
    n: int = 5
    min_freq: int = 3
    temperature: float = 0.8


@dataclass
class BenchmarkSection:
    counterfactual_rate: float = 0.5
    test_fraction: float = 0.5


@dataclass
class AnalysisSection:
    n_perm: int = 1000


@dataclass
class SelectionSection:
    strategy: str = "ua_gap"
    n_layers_to_suppress: int = 8


@dataclass
class SuppressionSection:
    kind: str = "FFN"
    lam: float = 0.0
    snip_sample: int = 64


@dataclass
class AdaptSection:
    alpha: float = 0.5
    beta: float = 0.5
    gamma_start: float = 1.0
    gamma_end: float = 5.0
    rank: int = 4
    lr: float = 5e-3
    steps: int = 600
    batch: int = 16
    init_std: float = 0.1
    contexts_per_question: int = 8


@dataclass
class EvaluateSection:
    max_new: int = 16


@dataclass
class InterventionSection:
    lambda_list: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))


@dataclass
class SweepSection:
    lambda_list: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    n_list: list = field(default_factory=lambda: [1, 2, 4, 8])
    alpha_beta_list: list = field(default_factory=lambda: [[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]])
    kinds: list = field(default_factory=lambda: list(KINDS))
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    adapted: bool = False
    adapt_steps: int = 600


@dataclass
class PathsSection:
    out: str = "runs/default"


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    elicitation: ElicitationSection = field(default_factory=ElicitationSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    suppression: SuppressionSection = field(default_factory=SuppressionSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    intervention: InterventionSection = field(default_factory=InterventionSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        m = self.model
        if min(m.n_layers, m.d_model, m.d_ffn, m.n_heads, m.max_seq_len) < 1:
            raise ConfigError("model sizes must be >= 1")
        if m.d_model % m.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if m.d_ffn < m.d_model:
            raise ConfigError("model.d_ffn must be >= model.d_model")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.data.n_facts < 1 or self.data.n_entities < 2:
            raise ConfigError("data needs n_facts >= 1 and n_entities >= 2")
        if self.pretrain.steps < 0 or self.pretrain.batch < 1 or self.pretrain.lr <= 0:
            raise ConfigError("pretrain needs steps >= 0, batch >= 1, lr > 0")
        e = self.elicitation
        if e.n < 1 or not 1 <= e.min_freq <= e.n or e.temperature <= 0:
            raise ConfigError("elicitation needs n >= 1, 1 <= min_freq <= n, temperature > 0")
        if not 0 <= self.benchmark.counterfactual_rate <= 1 or not 0 <= self.benchmark.test_fraction < 1:
            raise ConfigError("benchmark rates must lie in [0, 1]")
        if self.analysis.n_perm < 100:
            raise ConfigError("analysis.n_perm must be >= 100")
        if self.selection.strategy not in STRATEGIES:
            raise ConfigError(f"selection.strategy must be one of {STRATEGIES}")
        if self.selection.n_layers_to_suppress < 1:
            raise ConfigError("selection.n_layers_to_suppress must be >= 1")
        if self.suppression.kind not in KINDS:
            raise ConfigError(f"suppression.kind must be one of {KINDS}")
        if self.suppression.lam < 0:
            raise ConfigError("suppression.lam must be >= 0")
        a = self.adapt
        if a.alpha < 0 or a.beta < 0 or (a.alpha == 0 and a.beta == 0):
            raise ConfigError("adapt.alpha and adapt.beta must be >= 0 and not both zero")
        if not a.gamma_end >= a.gamma_start >= 0:
            raise ConfigError("adapt needs gamma_end >= gamma_start >= 0")
        if a.rank < 1 or a.batch < 1 or a.steps < 0 or a.contexts_per_question < 0:
            raise ConfigError("adapt needs rank >= 1, batch >= 1, steps >= 0, contexts_per_question >= 0")
        if not self.intervention.lambda_list or any(l < 0 for l in self.intervention.lambda_list):
            raise ConfigError("intervention.lambda_list must be non-empty and >= 0")
        s = self.sweep
        if any(k not in KINDS for k in s.kinds) or any(st not in STRATEGIES for st in s.strategies):
            raise ConfigError("sweep.kinds / sweep.strategies contain unknown names")
        if any(len(ab) != 2 for ab in s.alpha_beta_list):
            raise ConfigError("sweep.alpha_beta_list entries must be [alpha, beta] pairs")


# Which sections feed each stage, in pipeline order. A stage's hash covers its
# own sections plus those of every stage it reads from.
STAGE_SECTIONS = {
    "pretrain": ("seed", "model", "data", "pretrain"),
    "benchmark": ("elicitation", "benchmark"),
    "analyze": ("analysis", "selection"),
    "intervene": ("intervention",),
    "adapt": ("suppression", "adapt"),
    "evaluate": ("evaluate",),
    "sweep": ("sweep",),
}
STAGE_UPSTREAM = {
    "pretrain": (),
    "benchmark": ("pretrain",),
    "analyze": ("benchmark",),
    "intervene": ("analyze",),
    "adapt": ("analyze",),
    "evaluate": ("adapt",),
    "sweep": ("analyze",),
}


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def stage_hash(config: ExperimentConfig, stage: str) -> str:
    if stage not in STAGE_SECTIONS:
        raise KeyError(f"unknown stage {stage!r}")
    d = config.to_dict()
    own = {name: d[name] for name in STAGE_SECTIONS[stage]}
    upstream = [stage_hash(config, up) for up in STAGE_UPSTREAM[stage]]
    if stage == "sweep":
        # the sweep re-runs adaptation and evaluation internally
        own.update({k: d[k] for k in ("suppression", "adapt", "evaluate")})
    return _digest({"stage": stage, "sections": own, "upstream": upstream})[:16]


def config_hash(config: ExperimentConfig) -> str:
    d = config.to_dict()
    d.pop("paths")
    return _digest(d)[:16]


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if is_dataclass(current):
            kwargs[name] = _from_dict(type(current), value, path)
        else:
            kwargs[name] = _coerce(value, current, path)
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return value
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=V`` -> (["a", "b"], V); V is read as JSON, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(data))
    for text in overrides:
        keys, value = parse_override(text)
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    return out


def load_config(path, overrides: list[str] | None = None, seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data.setdefault("paths", {})["out"] = out
    return config_from_dict(data)


def write_default_config(path) -> None:
    Path(path).write_text(json.dumps(ExperimentConfig().to_dict(), indent=2) + "\n", encoding="utf-8")
