"""Experiment configuration: a flat ``key = value`` text format with
typed parsing, defaulting, validation and a deterministic resolved dump.

Unknown keys are rejected so typos fail loudly.  The resolved dump
contains every key in a fixed order and no timestamps; hashing it
fingerprints a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .data import ANOMALY_KINDS, SynthConfig, validate_synth_config
from .errors import ConfigError
from .models import KIND_VAE, ModelSpec, validate_model_spec
from .scoring import ScoringConfig, validate_scoring_config
from .training import TrainingConfig, validate_training_config

DEFAULT_BETA_SWEEP = (0.01, 0.1, 1.0, 3.0, 10.0)


@dataclass(frozen=True)
class VizConfig:
    tsne_perplexity: float = 5.0
    tsne_restarts: int = 100
    tsne_iters: int = 1000
    tsne_learning_rate: float = 200.0
    tsne_early_exaggeration: float = 12.0
    tsne_exaggeration_iters: int = 250


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, resolvable from a single config file."""

    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    viz: VizConfig = field(default_factory=VizConfig)
    data_root: str = ""  # empty: use the synthetic fixture
    out_root: str = ""  # empty: environment variable, then ./runs
    run_count: int = 1
    checkpoint_every: int = 0  # 0: best checkpoint only
    beta_sweep: tuple[float, ...] = DEFAULT_BETA_SWEEP


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_float(text: str) -> float:
    value = float(text)
    return value


def _parse_str(text: str) -> str:
    return text


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(_parse_int(part.strip()) for part in text.split(",") if part.strip())


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(_parse_float(part.strip()) for part in text.split(",") if part.strip())


def _parse_str_tuple(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _fmt_plain(value) -> str:
    if isinstance(value, float):
        return format(value, "g")
    return str(value)


def _fmt_tuple(value) -> str:
    return ",".join(_fmt_plain(v) for v in value)


@dataclass(frozen=True)
class _Key:
    section: str  # attribute on ExperimentConfig, or "" for top level
    attr: str
    parse: Callable[[str], object]
    fmt: Callable[[object], str] = _fmt_plain


# Flat key schema; dump order follows this table.
_SCHEMA: dict[str, _Key] = {
    # model
    "model_kind": _Key("model", "kind", _parse_str),
    "latent_dim": _Key("model", "latent_dim", _parse_int),
    "encoder_filters": _Key("model", "encoder_filters", _parse_int_tuple, _fmt_tuple),
    "leaky_slope": _Key("model", "leaky_slope", _parse_float),
    "pool_after": _Key("model", "pool_after", _parse_int_tuple, _fmt_tuple),
    "upsample_after": _Key("model", "upsample_after", _parse_int_tuple, _fmt_tuple),
    # training
    "beta": _Key("training", "beta", _parse_float),
    "alpha": _Key("training", "alpha", _parse_float),
    "lr_init": _Key("training", "lr_init", _parse_float),
    "lr_decay_factor": _Key("training", "lr_decay_factor", _parse_float),
    "plateau_patience": _Key("training", "plateau_patience", _parse_int),
    "plateau_rel_tol": _Key("training", "plateau_rel_tol", _parse_float),
    "epochs": _Key("training", "epochs", _parse_int),
    "weight_decay": _Key("training", "weight_decay", _parse_float),
    "batch_size": _Key("training", "batch_size", _parse_int),
    "adam_beta1": _Key("training", "adam_beta1", _parse_float),
    "adam_beta2": _Key("training", "adam_beta2", _parse_float),
    "adam_eps": _Key("training", "adam_eps", _parse_float),
    "seed": _Key("training", "seed", _parse_int),
    # scoring
    "score_kind": _Key("scoring", "score_kind", _parse_str),
    "gamma": _Key("scoring", "gamma", _parse_float),
    "elbo_score_beta": _Key("scoring", "elbo_score_beta", _parse_float),
    "threshold_strategy": _Key("scoring", "threshold_strategy", _parse_str),
    "threshold_param": _Key("scoring", "threshold_param", _parse_float),
    # synthetic fixture
    "synth_train": _Key("synth", "train_count", _parse_int),
    "synth_val": _Key("synth", "val_count", _parse_int),
    "synth_test_normal": _Key("synth", "test_normal_count", _parse_int),
    "synth_test_abnormal": _Key("synth", "test_abnormal_count", _parse_int),
    "synth_anomaly_kinds": _Key("synth", "anomaly_kinds", _parse_str_tuple, _fmt_tuple),
    "synth_noise": _Key("synth", "noise_std", _parse_float),
    "synth_jitter": _Key("synth", "jitter_px", _parse_int),
    # visualization
    "tsne_perplexity": _Key("viz", "tsne_perplexity", _parse_float),
    "tsne_restarts": _Key("viz", "tsne_restarts", _parse_int),
    "tsne_iters": _Key("viz", "tsne_iters", _parse_int),
    "tsne_learning_rate": _Key("viz", "tsne_learning_rate", _parse_float),
    "tsne_early_exaggeration": _Key("viz", "tsne_early_exaggeration", _parse_float),
    "tsne_exaggeration_iters": _Key("viz", "tsne_exaggeration_iters", _parse_int),
    # run layout
    "data_root": _Key("", "data_root", _parse_str),
    "out_root": _Key("", "out_root", _parse_str),
    "run_count": _Key("", "run_count", _parse_int),
    "checkpoint_every": _Key("", "checkpoint_every", _parse_int),
    "beta_sweep": _Key("", "beta_sweep", _parse_float_tuple, _fmt_tuple),
}

_SECTION_COMMENTS = {
    "model_kind": "model architecture",
    "beta": "training",
    "score_kind": "scoring",
    "synth_train": "synthetic fixture",
    "tsne_perplexity": "visualization",
    "data_root": "run layout",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value pairs from flat config text.

    Blank lines and ``#`` comment lines are skipped.  Duplicate or unknown
    keys are errors.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = value
    return values


def resolve_config(overrides: dict[str, str], source: str = "<config>") -> ExperimentConfig:
    """Apply raw string overrides on top of defaults, with typed parsing."""
    sections: dict[str, dict[str, object]] = {
        "model": {},
        "training": {},
        "scoring": {},
        "synth": {},
        "viz": {},
        "": {},
    }
    for key, raw in overrides.items():
        schema = _SCHEMA[key]
        try:
            value = schema.parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: key {key!r}: cannot parse {raw!r}: {exc}") from exc
        sections[schema.section][schema.attr] = value
    cfg = ExperimentConfig(
        model=ModelSpec(**sections["model"]),
        training=TrainingConfig(**sections["training"]),
        scoring=ScoringConfig(**sections["scoring"]),
        synth=SynthConfig(**sections["synth"]),
        viz=VizConfig(**sections["viz"]),
        **sections[""],
    )
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file missing: {path}")
    return resolve_config(parse_config_text(path.read_text(), str(path)), str(path))


def default_config() -> ExperimentConfig:
    return resolve_config({})


def validate_config(cfg: ExperimentConfig) -> None:
    validate_model_spec(cfg.model)
    validate_training_config(cfg.training)
    validate_scoring_config(cfg.scoring)
    validate_synth_config(cfg.synth)
    if cfg.model.kind == KIND_VAE and cfg.training.beta != 1.0:
        raise ConfigError(
            f"model_kind=vae trains with beta=1; set beta=1 or use "
            f"model_kind=beta_vae (got beta={cfg.training.beta:g})"
        )
    if cfg.run_count < 1:
        raise ConfigError(f"run_count must be >= 1, got {cfg.run_count}")
    if cfg.checkpoint_every < 0:
        raise ConfigError(f"checkpoint_every must be >= 0, got {cfg.checkpoint_every}")
    if not cfg.beta_sweep:
        raise ConfigError("beta_sweep must not be empty")
    if any(b < 0 for b in cfg.beta_sweep):
        raise ConfigError(f"beta_sweep entries must be >= 0, got {cfg.beta_sweep}")
    viz = cfg.viz
    if viz.tsne_perplexity <= 0:
        raise ConfigError(f"tsne_perplexity must be > 0, got {viz.tsne_perplexity}")
    if viz.tsne_restarts < 1:
        raise ConfigError(f"tsne_restarts must be >= 1, got {viz.tsne_restarts}")
    if viz.tsne_iters < 1:
        raise ConfigError(f"tsne_iters must be >= 1, got {viz.tsne_iters}")
    if viz.tsne_learning_rate <= 0:
        raise ConfigError(f"tsne_learning_rate must be > 0, got {viz.tsne_learning_rate}")
    if viz.tsne_early_exaggeration < 1:
        raise ConfigError(
            f"tsne_early_exaggeration must be >= 1, got {viz.tsne_early_exaggeration}"
        )
    if viz.tsne_exaggeration_iters < 0:
        raise ConfigError(
            f"tsne_exaggeration_iters must be >= 0, got {viz.tsne_exaggeration_iters}"
        )


def _lookup(cfg: ExperimentConfig, schema: _Key):
    holder = getattr(cfg, schema.section) if schema.section else cfg
    return getattr(holder, schema.attr)


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved dump: every key, schema order, deterministic, reloadable."""
    lines = []
    for key, schema in _SCHEMA.items():
        if key in _SECTION_COMMENTS:
            if lines:
                lines.append("")
            lines.append(f"# {_SECTION_COMMENTS[key]}")
        lines.append(f"{key} = {schema.fmt(_lookup(cfg, schema))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def with_overrides(cfg: ExperimentConfig, **top_level) -> ExperimentConfig:
    """Rebuild with top-level field replacements (seed and run layout)."""
    seed = top_level.pop("seed", None)
    cfg = dataclasses.replace(cfg, **top_level)
    if seed is not None:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seed=seed))
    validate_config(cfg)
    return cfg


def anomaly_kinds_available() -> tuple[str, ...]:
    return ANOMALY_KINDS
