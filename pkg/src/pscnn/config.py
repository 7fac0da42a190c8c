"""Versioned JSON configs for experiments and dataset generation.

Every config carries a ``schema`` string; unknown keys anywhere are errors so
typos in experiment files fail loudly instead of silently using defaults.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .training import InferenceConfig, TrainConfig, classifier_defaults, localizer_defaults

EXPERIMENT_SCHEMA = "pscnn.experiment/1"
GEN_SCHEMA = "pscnn.gen/1"


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {unknown}")


def _section(cls, d, base, where):
    d = {} if d is None else d
    _check_keys(d, [f.name for f in fields(cls)], where)
    try:
        return replace(base, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64  # localizer conv6 width
    reduce_dim: int = 8
    crop_side: int = 3
    fc6: int = 128
    fc7: int = 64
    input_mean: float = 0.5


@dataclass(frozen=True)
class ManualConfig:
    K: int = 3
    R: int = 3
    T: int = 3
    top_k: int = 3  # size of the one-vs-most pool

    def __post_init__(self):
        if min(self.K, self.R, self.T, self.top_k) < 0:
            raise ConfigurationError("manual sizes must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    localizer: TrainConfig = field(default_factory=localizer_defaults)
    classifier: TrainConfig = field(default_factory=classifier_defaults)
    model: ModelConfig = field(default_factory=ModelConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    manual: ManualConfig = field(default_factory=ManualConfig)

    def with_seed(self, seed):
        """Both training stages seeded from one integer."""
        return replace(self, localizer=replace(self.localizer, seed=seed), classifier=replace(self.classifier, seed=seed))

    def to_dict(self):
        d = {"schema": EXPERIMENT_SCHEMA}
        for f in fields(self):
            sec = asdict(getattr(self, f.name))
            d[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, ["schema"] + [f.name for f in fields(cls)], "experiment config")
        if d.get("schema") != EXPERIMENT_SCHEMA:
            raise ConfigurationError(f"experiment config needs schema {EXPERIMENT_SCHEMA!r}, got {d.get('schema')!r}")
        base = cls()
        return cls(
            localizer=_section(TrainConfig, d.get("localizer"), base.localizer, "localizer"),
            classifier=_section(TrainConfig, d.get("classifier"), base.classifier, "classifier"),
            model=_section(ModelConfig, d.get("model"), base.model, "model"),
            inference=_section(InferenceConfig, d.get("inference"), base.inference, "inference"),
            manual=_section(ManualConfig, d.get("manual"), base.manual, "manual"),
        )


@dataclass(frozen=True)
class GenConfig:
    preset: str = "default"  # "default", "single_part" or "custom"
    spec: dict = None  # CreatureSpec fields; overrides for presets, full spec for "custom"
    per_class: int = 60
    fractions: tuple = (2 / 3, 1 / 3)

    def to_dict(self):
        return {
            "schema": GEN_SCHEMA,
            "preset": self.preset,
            "spec": self.spec,
            "per_class": self.per_class,
            "fractions": list(self.fractions),
        }

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, ["schema", "preset", "spec", "per_class", "fractions"], "gen config")
        if d.get("schema") != GEN_SCHEMA:
            raise ConfigurationError(f"gen config needs schema {GEN_SCHEMA!r}, got {d.get('schema')!r}")
        cfg = cls(
            d.get("preset", "default"), d.get("spec"), int(d.get("per_class", 60)), tuple(d.get("fractions", (2 / 3, 1 / 3)))
        )
        if cfg.preset not in ("default", "single_part", "custom"):
            raise ConfigurationError(f"unknown preset {cfg.preset!r}")
        if cfg.per_class < 2:
            raise ConfigurationError("per_class must be ≥ 2")
        return cfg

    def creature_spec(self):
        from .synthetic import CreatureSpec, default_spec, single_part_spec

        overrides = dict(self.spec or {})
        if self.preset == "custom":
            return CreatureSpec.from_dict(overrides)
        _check_keys(overrides, [f.name for f in fields(CreatureSpec)], "spec")
        try:
            return (default_spec if self.preset == "default" else single_part_spec)(**overrides)
        except TypeError as exc:
            raise ConfigurationError(f"spec: {exc}") from None


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None


def config_hash(d):
    """sha256 of the canonical JSON encoding."""
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
