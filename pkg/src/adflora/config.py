"""Experiment configuration: a YAML key-value tree validated with pydantic.

Every key is optional except ``task.kind`` and ``method.name``; see
``configs/`` and the README for the annotated grammar.
"""

import os
from typing import Annotated, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .tasks import PARTITION_PRESETS

OUTPUT_ROOT_ENV = "ADFLORA_OUTPUT_ROOT"
DEFAULT_ROUNDS = 150
ALTERNATING = ("rolora_cfl", "rolora_dfl", "adf")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MatFactTaskConfig(_Strict):
    kind: Literal["matfact"] = "matfact"
    n_clients: int = Field(10, ge=1)
    rows: int = Field(16, ge=1)
    cols: int = Field(16, ge=1)
    heterogeneity: float = Field(0.5, ge=0)
    heterogeneity_mode: Literal["isotropic", "tail"] = "isotropic"
    signal_scale: float = Field(1.0, gt=0)
    tail_scale: float = Field(0.3, ge=0)
    base_scale: float = Field(1.0, ge=0)
    seed: Optional[int] = None
    data_file: Optional[str] = None

    @property
    def shape(self):
        return self.rows, self.cols


class LogisticTaskConfig(_Strict):
    kind: Literal["logistic"] = "logistic"
    partition: Union[Literal["binary", "ternary"], List[List[float]]] = "binary"
    samples_per_client: int = Field(100, ge=2)
    n_features: int = Field(16, ge=2)
    class_separation: float = Field(2.0, ge=0)
    holdout_fraction: float = Field(0.2, gt=0, lt=1)
    base_scale: float = Field(1.0, ge=0)
    batch_size: Optional[int] = Field(32, ge=1)
    seed: Optional[int] = None
    data_file: Optional[str] = None

    @property
    def proportions(self):
        return PARTITION_PRESETS[self.partition] if isinstance(self.partition, str) else self.partition

    @property
    def n_clients(self):
        return len(self.proportions)

    @property
    def n_classes(self):
        return len(self.proportions[0])

    @property
    def shape(self):
        return self.n_features, self.n_classes


TaskConfig = Annotated[Union[MatFactTaskConfig, LogisticTaskConfig], Field(discriminator="kind")]


class TopologyConfig(_Strict):
    kind: Literal["complete", "identity", "ring", "gossip"] = "gossip"
    p: float = Field(0.1, ge=0, le=1)


class MethodConfig(_Strict):
    name: Literal["naive", "ffa", "rolora_cfl", "rolora_dfl", "adf"]
    interval: int = Field(5, ge=1)
    ffa_freeze: Literal["a", "b"] = "a"

    @property
    def alternating(self):
        return self.name in ALTERNATING


class OptimizerConfig(_Strict):
    kind: Literal["sgd", "adam", "theory"] = "adam"
    eta: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    safety: float = Field(0.9, gt=0, le=1)
    eta_max: float = Field(1.0, gt=0)
    reset_moments_on_switch: bool = False


class LoraConfig(_Strict):
    rank: int = Field(8, ge=1)
    alpha: float = Field(16.0, gt=0)
    init: Literal["homogeneous", "heterogeneous"] = "homogeneous"
    init_b_scale: float = Field(0.1, ge=0)


class ExperimentConfig(_Strict):
    name: Optional[str] = None
    task: TaskConfig
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    method: MethodConfig
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    lora: LoraConfig = Field(default_factory=LoraConfig)
    rounds: Optional[int] = Field(None, ge=0)
    periods: Optional[int] = Field(None, ge=1)
    local_steps: int = Field(20, ge=0)
    eval_every: Optional[int] = Field(None, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _cross_field(self):
        issues = []
        if self.periods is not None:
            if not self.method.alternating:
                issues.append(("periods", f"only valid for alternating methods {ALTERNATING}"))
            else:
                implied = 2 * self.periods * self.method.interval
                if self.rounds is not None and self.rounds != implied:
                    issues.append(("rounds", f"must equal 2*periods*interval = {implied}"))
                self.rounds = implied
        if self.rounds is None:
            self.rounds = DEFAULT_ROUNDS
        if self.eval_every is None:
            self.eval_every = 1 if self.task.kind == "matfact" else 5
        if self.optimizer.kind == "theory":
            if self.task.kind != "matfact":
                issues.append(("optimizer.kind", "theory step size requires task.kind = matfact"))
            if self.local_steps != 1:
                issues.append(("local_steps", "theory mode requires local_steps = 1"))
        if self.lora.rank > min(self.task.shape):
            issues.append(("lora.rank", f"must be <= min(task dims) = {min(self.task.shape)}"))
        if self.topology.kind == "identity" and self.task.n_clients < 2:
            issues.append(("topology.kind", "identity topology needs at least 2 clients"))
        if self.topology.kind == "ring" and self.task.n_clients < 3:
            issues.append(("topology.kind", "ring topology needs at least 3 clients"))
        if self.task.kind == "logistic":
            for k, props in enumerate(self.task.proportions):
                if len(props) != self.task.n_classes:
                    issues.append((f"task.partition.{k}", "all proportion vectors need the same length"))
                elif abs(sum(props) - 1.0) > 1e-9 or min(props) < 0:
                    issues.append((f"task.partition.{k}", "proportions must be nonnegative and sum to 1"))
            if self.task.n_features < self.task.n_classes:
                issues.append(("task.n_features", "must be >= number of classes"))
        if issues:
            raise _CrossFieldErrors(issues)
        return self

    @property
    def resolved_output_dir(self):
        return self.output_dir or os.environ.get(OUTPUT_ROOT_ENV, "runs")


class _CrossFieldErrors(ValueError):
    def __init__(self, issues):
        super().__init__("; ".join(f"{p}: {m}" for p, m in issues))
        self.issues = issues


class VerifyConfig(_Strict):
    """Parameters of the ``verify`` battery."""

    seed: int = 0
    n_clients: int = Field(5, ge=2)
    rows: int = Field(8, ge=2)
    cols: int = Field(8, ge=2)
    rank: int = Field(2, ge=1)
    periods: int = Field(50, ge=1)
    interval: int = Field(2, ge=1)
    dfl_clients: int = Field(6, ge=3)
    dfl_interval: int = Field(5, ge=1)
    dfl_steps: int = Field(1000, ge=1)
    inject_fault: Literal["none", "nonstochastic"] = "none"


def _format_loc(loc):
    parts = [str(p) for p in loc]
    if len(parts) > 1 and parts[0] == "task" and parts[1] in ("matfact", "logistic"):
        parts.pop(1)
    return ".".join(parts) or "<root>"


def _issues_from(exc):
    issues = []
    for err in exc.errors():
        ctx = err.get("ctx", {})
        inner = ctx.get("error")
        if isinstance(inner, _CrossFieldErrors):
            issues.extend(inner.issues)
            continue
        msg = err["msg"]
        if "input" in err and err["type"] != "missing":
            msg = f"{msg} (got {err['input']!r})"
        issues.append((_format_loc(err["loc"]), msg))
    return issues


def validate(data, model=ExperimentConfig):
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_issues_from(exc)) from None


def parse_config(text, overrides=(), model=ExperimentConfig):
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([("<root>", f"not valid YAML: {exc}")]) from None
    data = apply_overrides(data, overrides)
    return validate(data, model)


def load_config(path, overrides=(), model=ExperimentConfig):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides, model)


def serialize_config(cfg):
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def apply_overrides(data, overrides):
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars."""
    data = dict(data) if isinstance(data, dict) else data
    issues = []
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            issues.append((item, "override must look like key.path=value"))
            continue
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
    if issues:
        raise ConfigError(issues)
    return data
