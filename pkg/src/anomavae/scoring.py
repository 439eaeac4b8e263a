"""Anomaly scores, threshold calibration and the scores CSV format.

Scores never mutate the model or its gradient history.  Scoring is
deterministic: eval mode, zero latent noise.  Anomalies are the positive
class and a sample is flagged iff its score strictly exceeds the
threshold, so ties resolve to normal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from . import losses
from .data import ImageSample, batch_tensor
from .errors import ConfigError, UsageError
from .models import KIND_CAE, decoder_layers
from .training import TrainedModel

VERDICT_ANOMALY = "anomaly"
VERDICT_NORMAL = "normal"

SCORE_KINDS = ("recon", "elbo", "gradcon")
THRESHOLD_STRATEGIES = ("percentile", "mean_plus_k_std")

SCORES_COLUMNS = ("id", "kind", "score", "threshold", "verdict", "ground_truth")
_FLOAT_FMT = ".17g"


@dataclass(frozen=True)
class ScoringConfig:
    score_kind: str = "all"  # "all" or one of SCORE_KINDS
    gamma: float = 1.0
    elbo_score_beta: float = 1.0
    threshold_strategy: str = "percentile"
    threshold_param: float = 95.0


def validate_scoring_config(cfg: ScoringConfig) -> None:
    if cfg.score_kind != "all" and cfg.score_kind not in SCORE_KINDS:
        raise ConfigError(
            f"score_kind must be 'all' or one of {SCORE_KINDS}, got {cfg.score_kind!r}"
        )
    if cfg.score_kind in ("all", "gradcon"):
        if cfg.gamma is None:
            raise ConfigError("gamma is required when the gradcon score is selected")
    if cfg.gamma is not None and not (np.isfinite(cfg.gamma) and cfg.gamma >= 0):
        raise ConfigError(f"gamma must be finite and >= 0, got {cfg.gamma}")
    if not (np.isfinite(cfg.elbo_score_beta) and cfg.elbo_score_beta >= 0):
        raise ConfigError(f"elbo_score_beta must be finite and >= 0, got {cfg.elbo_score_beta}")
    if cfg.threshold_strategy not in THRESHOLD_STRATEGIES:
        raise ConfigError(
            f"threshold_strategy must be one of {THRESHOLD_STRATEGIES}, "
            f"got {cfg.threshold_strategy!r}"
        )
    if not np.isfinite(cfg.threshold_param):
        raise ConfigError("threshold_param must be finite")
    if cfg.threshold_strategy == "percentile" and not 0 <= cfg.threshold_param <= 100:
        raise ConfigError(
            f"percentile threshold_param must lie in [0, 100], got {cfg.threshold_param}"
        )


def applicable_score_kinds(model_kind: str) -> tuple[str, ...]:
    """The plain autoencoder has no latent distribution, hence no elbo score."""
    if model_kind == KIND_CAE:
        return ("recon", "gradcon")
    return SCORE_KINDS


def _require_trained(trained: TrainedModel) -> TrainedModel:
    if not isinstance(trained, TrainedModel):
        raise UsageError(
            "scoring requires a TrainedModel (from train() or load_checkpoint()), "
            f"got {type(trained).__name__}"
        )
    return trained


def _deterministic_forward(trained: TrainedModel, x: torch.Tensor):
    model = trained.model
    if model.spec.kind == KIND_CAE:
        recon, _ = model(x)
        return recon, None
    recon, enc, _ = model(x, generator=None)
    return recon, enc


def score_recon(
    trained: TrainedModel, samples: Sequence[ImageSample], batch_size: int = 64
) -> np.ndarray:
    """Per-sample mean squared reconstruction error."""
    _require_trained(trained)
    model = trained.model
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                x = torch.from_numpy(batch_tensor(samples[start : start + batch_size]))
                recon, _ = _deterministic_forward(trained, x)
                out.append(losses.recon_per_sample(recon, x).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def score_elbo(
    trained: TrainedModel,
    samples: Sequence[ImageSample],
    elbo_beta: float = 1.0,
    batch_size: int = 64,
) -> np.ndarray:
    """Per-sample reconstruction error plus ``elbo_beta`` times KL.

    The KL weight defaults to 1 at scoring time regardless of the weight
    used during training.
    """
    _require_trained(trained)
    if trained.spec.kind == KIND_CAE:
        raise UsageError("elbo score is undefined for the plain autoencoder")
    if elbo_beta < 0:
        raise ConfigError(f"elbo_score_beta must be >= 0, got {elbo_beta}")
    model = trained.model
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                x = torch.from_numpy(batch_tensor(samples[start : start + batch_size]))
                recon, enc, _ = model(x, generator=None)
                per = losses.recon_per_sample(recon, x) + elbo_beta * losses.kl_per_sample(
                    enc.mu, enc.log_var
                )
                out.append(per.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def score_gradcon(
    trained: TrainedModel,
    samples: Sequence[ImageSample],
    gamma: float = 1.0,
) -> np.ndarray:
    """Reconstruction error plus ``gamma`` times the gradient-constraint
    term, evaluated one sample at a time.

    Each sample's decoder gradients are compared against the training-time
    running average; neither the parameters nor the stored average change.
    """
    _require_trained(trained)
    if trained.gradient_state is None or trained.gradient_state.k == 0:
        raise UsageError(
            "gradcon score requires the gradient history captured during "
            "training; this checkpoint has none"
        )
    if not (np.isfinite(gamma) and gamma >= 0):
        raise ConfigError(f"gamma must be finite and >= 0, got {gamma}")
    model = trained.model
    layers = decoder_layers(model)
    state = trained.gradient_state
    was_training = model.training
    model.eval()
    out = np.zeros(len(samples))
    try:
        for i, sample in enumerate(samples):
            x = torch.from_numpy(batch_tensor([sample]))
            recon, _ = _deterministic_forward(trained, x)
            recon_l = losses.recon_loss(recon, x)
            grads = losses.decoder_gradients(recon_l, layers, create_graph=False)
            grad_l = losses.gradient_loss(grads, state)
            out[i] = float(recon_l.detach()) + gamma * float(grad_l.detach())
    finally:
        model.train(was_training)
    return out


def calibrate_threshold(scores: Sequence[float], strategy: str, param: float) -> float:
    """Threshold from validation scores: ``percentile`` (linear
    interpolation) or ``mean_plus_k_std`` (sample standard deviation)."""
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("threshold calibration requires at least one score")
    if not np.isfinite(values).all():
        raise ConfigError("threshold calibration scores must be finite")
    if strategy == "percentile":
        if not 0 <= param <= 100:
            raise ConfigError(f"percentile must lie in [0, 100], got {param}")
        return float(np.percentile(values, param))
    if strategy == "mean_plus_k_std":
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        return float(values.mean()) + param * std
    raise ConfigError(f"unknown threshold strategy {strategy!r}")


def decide(score: float, threshold: float) -> str:
    return VERDICT_ANOMALY if score > threshold else VERDICT_NORMAL


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    kind: str
    score: float
    threshold: float
    verdict: str
    ground_truth: str | None


def _scores_for_kind(
    trained: TrainedModel,
    samples: Sequence[ImageSample],
    kind: str,
    cfg: ScoringConfig,
) -> np.ndarray:
    if kind == "recon":
        return score_recon(trained, samples)
    if kind == "elbo":
        return score_elbo(trained, samples, elbo_beta=cfg.elbo_score_beta)
    if kind == "gradcon":
        return score_gradcon(trained, samples, gamma=cfg.gamma)
    raise ConfigError(f"unknown score kind {kind!r}")


def score_and_decide(
    trained: TrainedModel,
    validation: Sequence[ImageSample],
    test: Sequence[ImageSample],
    cfg: ScoringConfig,
) -> list[ScoreRecord]:
    """Calibrate per score kind on validation normals, then score and
    classify the test samples.  Records come back sorted by (id, kind)."""
    _require_trained(trained)
    validate_scoring_config(cfg)
    if not validation:
        raise UsageError("threshold calibration requires validation samples")
    if cfg.score_kind == "all":
        kinds = applicable_score_kinds(trained.spec.kind)
    else:
        kinds = (cfg.score_kind,)
        if cfg.score_kind not in applicable_score_kinds(trained.spec.kind):
            raise UsageError(
                f"score kind {cfg.score_kind!r} is not applicable to "
                f"model kind {trained.spec.kind!r}"
            )
    records = []
    for kind in kinds:
        val_scores = _scores_for_kind(trained, validation, kind, cfg)
        threshold = calibrate_threshold(
            val_scores, cfg.threshold_strategy, cfg.threshold_param
        )
        test_scores = _scores_for_kind(trained, test, kind, cfg)
        for sample, score in zip(test, test_scores):
            records.append(
                ScoreRecord(
                    sample_id=sample.sample_id,
                    kind=kind,
                    score=float(score),
                    threshold=threshold,
                    verdict=decide(float(score), threshold),
                    ground_truth=sample.label,
                )
            )
    records.sort(key=lambda r: (r.sample_id, r.kind))
    return records


def write_scores_csv(
    path: str | Path, records: Iterable[ScoreRecord], meta: Mapping[str, object]
) -> None:
    """Write records with run provenance as leading ``#`` comment lines.

    Floats use a fixed 17-significant-digit format, so identical runs
    produce bitwise-identical files.
    """
    with open(path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(SCORES_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.sample_id,
                    r.kind,
                    format(r.score, _FLOAT_FMT),
                    format(r.threshold, _FLOAT_FMT),
                    r.verdict,
                    r.ground_truth if r.ground_truth is not None else "",
                ]
            )


def read_scores_csv(path: str | Path) -> tuple[list[ScoreRecord], dict[str, str]]:
    meta: dict[str, str] = {}
    records: list[ScoreRecord] = []
    with open(path, newline="") as fh:
        rows = []
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    meta[key.strip()] = value.strip()
                continue
            rows.append(line)
        reader = csv.reader(rows)
        header = next(reader, None)
        if header is None or tuple(header) != SCORES_COLUMNS:
            raise ConfigError(
                f"{path}: expected scores header {list(SCORES_COLUMNS)}, got {header}"
            )
        for row in reader:
            if len(row) != len(SCORES_COLUMNS):
                raise ConfigError(f"{path}: malformed row {row}")
            records.append(
                ScoreRecord(
                    sample_id=row[0],
                    kind=row[1],
                    score=float(row[2]),
                    threshold=float(row[3]),
                    verdict=row[4],
                    ground_truth=row[5] or None,
                )
            )
    return records, meta
