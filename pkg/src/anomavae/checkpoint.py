"""Checkpoint persistence.

A checkpoint is a directory holding the model weights (``checkpoint.pt``),
the gradient history (``gradient_state.pt``) and a plain-text sidecar
(``checkpoint.meta``) that records the format version and everything
needed to rebuild the network before loading weights.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .errors import CheckpointFormatError
from .models import ModelSpec, build_model
from .losses import GradientState
from .training import TrainedModel

FORMAT_VERSION = 1

WEIGHTS_NAME = "checkpoint.pt"
STATE_NAME = "gradient_state.pt"
META_NAME = "checkpoint.meta"


def _format_tuple(values) -> str:
    return ",".join(str(v) for v in values)


def save_checkpoint(directory: str | Path, trained: TrainedModel) -> Path:
    """Write weights, gradient state and sidecar; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(trained.model.state_dict(), directory / WEIGHTS_NAME)
    state = trained.gradient_state
    if state is not None and state.k > 0:
        torch.save(
            {"k": state.k, "averages": state.averages}, directory / STATE_NAME
        )
        state_ref = STATE_NAME
    else:
        state_ref = "none"
    spec = trained.spec
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"model_kind={spec.kind}",
        f"latent_dim={spec.latent_dim}",
        f"encoder_filters={_format_tuple(spec.encoder_filters)}",
        f"leaky_slope={spec.leaky_slope!r}",
        f"pool_after={_format_tuple(spec.pool_after)}",
        f"upsample_after={_format_tuple(spec.upsample_after)}",
        f"beta={trained.train_config.beta!r}" if trained.train_config else "beta=",
        f"best_epoch={trained.best_epoch}",
        f"best_val_loss={trained.best_val_loss!r}",
        f"config_sha256={trained.config_sha256}",
        f"gradient_state={state_ref}",
    ]
    meta_path = directory / META_NAME
    meta_path.write_text("\n".join(lines) + "\n")
    return meta_path


def _parse_meta(path: Path) -> dict[str, str]:
    meta: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def load_checkpoint(path: str | Path) -> TrainedModel:
    """Load a checkpoint directory (or its ``.meta`` file) back into a
    :class:`TrainedModel`.  Refuses sidecars of any other format version."""
    path = Path(path)
    meta_path = path / META_NAME if path.is_dir() else path
    if not meta_path.is_file():
        raise CheckpointFormatError(f"checkpoint sidecar missing: {meta_path}")
    meta = _parse_meta(meta_path)

    version = meta.get("format_version")
    if version != str(FORMAT_VERSION):
        raise CheckpointFormatError(
            f"{meta_path}: format_version {version!r} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    required = ("model_kind", "latent_dim", "encoder_filters", "leaky_slope")
    missing = [key for key in required if key not in meta]
    if missing:
        raise CheckpointFormatError(f"{meta_path}: missing keys {missing}")

    try:
        spec = ModelSpec(
            kind=meta["model_kind"],
            latent_dim=int(meta["latent_dim"]),
            encoder_filters=tuple(int(v) for v in meta["encoder_filters"].split(",")),
            leaky_slope=float(meta["leaky_slope"]),
            pool_after=tuple(int(v) for v in meta.get("pool_after", "2,3,4").split(",")),
            upsample_after=tuple(
                int(v) for v in meta.get("upsample_after", "2,3,4").split(",")
            ),
        )
    except ValueError as exc:
        raise CheckpointFormatError(f"{meta_path}: malformed field: {exc}") from exc

    directory = meta_path.parent
    weights_path = directory / WEIGHTS_NAME
    if not weights_path.is_file():
        raise CheckpointFormatError(f"checkpoint weights missing: {weights_path}")
    model = build_model(spec)
    model.load_state_dict(torch.load(weights_path, weights_only=True))
    model.eval()

    state_ref = meta.get("gradient_state", "none")
    state = None
    if state_ref != "none":
        state_path = directory / state_ref
        if not state_path.is_file():
            raise CheckpointFormatError(
                f"sidecar references gradient state {state_ref!r} "
                f"but {state_path} is missing"
            )
        payload = torch.load(state_path, weights_only=True)
        state = GradientState(averages=payload["averages"], k=int(payload["k"]))

    return TrainedModel(
        model=model,
        spec=spec,
        gradient_state=state,
        train_config=None,
        best_val_loss=float(meta.get("best_val_loss", "nan")),
        best_epoch=int(meta.get("best_epoch", "0")),
        config_sha256=meta.get("config_sha256", ""),
    )
