"""Experiment configuration (TOML) and seed derivation.

Every field has a default, so an empty file is a complete experiment. Seeds
that are not given explicitly derive from ``master_seed`` via
``stable_hash64(master_seed, key, purpose)``; ``key`` is the arm's seed group,
so the click-model arms share initialisation and batch order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ValidationError
from .gbdt import GbdtParams
from .models import TrainConfig
from .simulation import ClickConfig, PolicyConfig, WorldConfig, stable_hash64

ARMS = ("random", "naive", "two_tower", "two_tower_dropout", "two_tower_backdoor", "gbdt_expert", "policy_estimator")
TRAINABLE = ARMS[1:]
SEED_GROUPS = {
    "naive": "click_model",
    "two_tower": "click_model",
    "two_tower_dropout": "click_model",
    "two_tower_backdoor": "click_model",
}


def derive_seed(master_seed: int, key: str, purpose: str) -> int:
    return stable_hash64(master_seed, key, purpose)


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    ci_level: float = 0.95
    ci_method: str = "normal"
    n_buckets: int = 5
    include_oracle: bool = False

    def __post_init__(self):
        if self.k < 1 or not 0 < self.ci_level < 1 or self.n_buckets < 1:
            raise ValidationError(f"invalid eval config {self}")
        if self.ci_method not in ("normal", "bootstrap"):
            raise ValidationError(f"ci_method must be 'normal' or 'bootstrap', got {self.ci_method!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    clicks: ClickConfig = field(default_factory=ClickConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    arms: tuple = ARMS
    master_seed: int = 0
    output_dir: str = "runs"
    scale_features: bool = True
    split: tuple = (0.8, 0.1, 0.1)
    estimator_objective: str = "lambdarank"
    neural_estimator: bool = True
    expert_folds: int = 5
    backdoor_exam_source: str = "two_tower"
    click_log: str | None = None
    annotations: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ValidationError(f"unknown arms {bad}; valid arms are {list(ARMS)}")
        if "random" not in self.arms:
            raise ValidationError("the random arm is required as the evaluation baseline")
        if self.estimator_objective not in ("lambdarank", "pointwise"):
            raise ValidationError("estimator_objective must be 'lambdarank' or 'pointwise'")
        if self.expert_folds < 2:
            raise ValidationError("expert_folds must be >= 2")
        if self.backdoor_exam_source not in ("two_tower", "ctr"):
            raise ValidationError("backdoor_exam_source must be 'two_tower' or 'ctr'")
        if "two_tower_backdoor" in self.arms and not self.neural_estimator:
            raise ValidationError("the backdoor arm needs neural_estimator = true")
        if self.master_seed < 0:
            raise ValidationError("master_seed must be a non-negative integer")

    def arm_seed(self, arm: str, purpose: str = "train") -> int:
        return derive_seed(self.master_seed, SEED_GROUPS.get(arm, arm), purpose)

    def train_config(self, arm: str) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.arm_seed(arm))

    def snapshot(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


SECTIONS = {"world": WorldConfig, "policy": PolicyConfig, "clicks": ClickConfig, "train": TrainConfig,
            "gbdt": GbdtParams, "eval": EvalConfig}


def _build(cls, raw: dict, name: str, **defaults):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"[{name}] unknown keys {sorted(unknown)}")
    kwargs = {**defaults, **raw}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ValidationError(f"[{name}] {e}") from None


def config_from_dict(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a parsed TOML document and resolve derived seeds."""
    raw = dict(raw)
    top = {k: raw.pop(k) for k in list(raw) if k not in SECTIONS}
    if seed_override is not None:
        top["master_seed"] = seed_override
    master = int(top.get("master_seed", 0))
    sections = {}
    for name, cls in SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ValidationError(f"[{name}] must be a table")
        defaults = {}
        if name in ("world", "policy", "clicks"):
            defaults["seed"] = derive_seed(master, name, "simulate")
        sections[name] = _build(cls, sec, name, **defaults)
    return _build(ExperimentConfig, top, "top-level", **sections)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"{path}: {e}") from None
    return config_from_dict(raw, seed_override)
