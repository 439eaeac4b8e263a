"""Training loop: Adam with decoupled weight decay in the optimizer,
plateau learning-rate decay, best-validation checkpointing and per-epoch
loss logging.

Determinism: model init, shuffling and latent noise all derive from the
configured seed; validation always runs with zero latent noise.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import losses
from .data import DatasetSplit, ImageSample, augment, batch_tensor
from .errors import ConfigError, NumericError, TrainingDiverged, UsageError
from .losses import GradientState, LossBreakdown
from .models import KIND_CAE, ModelSpec, build_model, decoder_layers, validate_model_spec

LOG_COLUMNS = ("epoch", "recon", "kl", "grad_loss", "J", "lr")


@dataclass(frozen=True)
class TrainingConfig:
    beta: float = 3.0
    alpha: float = 0.03
    lr_init: float = 1e-2
    lr_decay_factor: float = 0.1
    plateau_patience: int = 10
    plateau_rel_tol: float = 1e-4
    epochs: int = 100
    weight_decay: float = 1e-4
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


def validate_training_config(cfg: TrainingConfig) -> None:
    checks = (
        (cfg.beta >= 0, "beta must be >= 0"),
        (cfg.alpha >= 0, "alpha must be >= 0"),
        (cfg.lr_init > 0, "lr_init must be > 0"),
        (0 < cfg.lr_decay_factor <= 1, "lr_decay_factor must lie in (0, 1]"),
        (cfg.plateau_patience >= 1, "plateau_patience must be >= 1"),
        (cfg.plateau_rel_tol >= 0, "plateau_rel_tol must be >= 0"),
        (cfg.epochs >= 1, "epochs must be >= 1"),
        (cfg.weight_decay >= 0, "weight_decay must be >= 0"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (0 <= cfg.adam_beta1 < 1, "adam_beta1 must lie in [0, 1)"),
        (0 <= cfg.adam_beta2 < 1, "adam_beta2 must lie in [0, 1)"),
        (cfg.adam_eps > 0, "adam_eps must be > 0"),
    )
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def config_fingerprint(spec: ModelSpec, cfg: TrainingConfig) -> str:
    """Stable sha256 over the fields that determine a training run."""
    lines = []
    for obj in (spec, cfg):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
    return hashlib.sha256("\n".join(sorted(lines)).encode()).hexdigest()


class PlateauLrScheduler:
    """Multiply the learning rate by ``factor`` after ``patience``
    consecutive epochs without relative improvement beyond ``rel_tol``."""

    def __init__(
        self,
        optimizer: torch.optim.Optimizer,
        factor: float,
        patience: int,
        rel_tol: float,
    ):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.rel_tol = rel_tol
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, val_loss: float) -> float:
        """Record one epoch's validation loss; returns the lr to use next."""
        if val_loss < self.best * (1.0 - self.rel_tol):
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                for group in self.optimizer.param_groups:
                    group["lr"] *= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainedModel:
    """A model ready for scoring, with the gradient history it accumulated."""

    model: nn.Module
    spec: ModelSpec
    gradient_state: GradientState | None
    train_config: TrainingConfig | None
    best_val_loss: float
    best_epoch: int
    config_sha256: str
    log_rows: list[dict] = field(default_factory=list)


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def _model_losses(
    model: nn.Module,
    x: torch.Tensor,
    beta: float,
    generator: torch.Generator | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction loss, KL) for either model kind; KL is 0 for the
    plain autoencoder."""
    if model.spec.kind == KIND_CAE:
        recon, _ = model(x)
        return losses.recon_loss(recon, x), torch.zeros((), dtype=x.dtype)
    recon, enc, _ = model(x, generator=generator)
    return losses.recon_loss(recon, x), losses.kl_divergence(enc.mu, enc.log_var)


def validate_epoch(
    model: nn.Module,
    samples: Sequence[ImageSample],
    beta: float,
    batch_size: int = 64,
) -> float:
    """Mean per-sample loss over ``samples`` with zero latent noise.

    Pure: no parameter updates, no gradient-state updates, batch-norm
    statistics frozen (eval mode).
    """
    if not samples:
        raise UsageError("validation requires at least one sample")
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with torch.no_grad():
            x_all = torch.from_numpy(batch_tensor(samples))
            for idx in _batches(len(samples), batch_size):
                x = x_all[torch.from_numpy(np.ascontiguousarray(idx))]
                if model.spec.kind == KIND_CAE:
                    recon, _ = model(x)
                    per = losses.recon_per_sample(recon, x)
                else:
                    recon, enc, _ = model(x, generator=None)
                    per = losses.recon_per_sample(recon, x) + beta * losses.kl_per_sample(
                        enc.mu, enc.log_var
                    )
                total += float(per.sum())
    finally:
        model.train(was_training)
    return total / len(samples)


def write_training_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["epoch"]] + [format(row[c], ".10g") for c in LOG_COLUMNS[1:]]
            )


def train(
    split: DatasetSplit,
    spec: ModelSpec,
    cfg: TrainingConfig,
    log_path: str | Path | None = None,
    epoch_hook: Callable[[int, "TrainedModel"], None] | None = None,
    progress: Callable[[str], None] | None = None,
) -> TrainedModel:
    """Train a model on ``split.train`` and return the parameters that
    scored best on ``split.validation``.

    The gradient history is accumulated every iteration from the
    reconstruction-loss gradients of the decoder, whether or not the
    gradient constraint contributes to the objective (alpha may be 0).
    ``epoch_hook`` runs after each epoch with the current state, which the
    command layer uses for periodic checkpoints.
    """
    validate_model_spec(spec)
    validate_training_config(cfg)
    if not split.train:
        raise UsageError("training requires a non-empty train split")
    if not split.validation:
        raise UsageError("training requires a non-empty validation split")

    torch.manual_seed(cfg.seed)
    model = build_model(spec)
    generator = torch.Generator().manual_seed(cfg.seed)
    flip_rng = np.random.default_rng(cfg.seed)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    layers = decoder_layers(model)
    state = GradientState.for_layers(layers)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.lr_init,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    scheduler = PlateauLrScheduler(
        optimizer, cfg.lr_decay_factor, cfg.plateau_patience, cfg.plateau_rel_tol
    )

    trained = TrainedModel(
        model=model,
        spec=spec,
        gradient_state=state,
        train_config=cfg,
        best_val_loss=math.inf,
        best_epoch=0,
        config_sha256=config_fingerprint(spec, cfg),
    )
    best_params: dict[str, torch.Tensor] | None = None
    n = len(split.train)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        lr_this_epoch = scheduler.lr
        sums = {"recon": 0.0, "kl": 0.0, "grad_loss": 0.0, "J": 0.0}
        weight = 0
        order = shuffle_rng.permutation(n)
        for batch_no, idx in enumerate(_batches(n, cfg.batch_size, order)):
            samples = [augment(split.train[i], flip_rng) for i in idx]
            x = torch.from_numpy(batch_tensor(samples))

            optimizer.zero_grad(set_to_none=True)
            try:
                recon_l, kl = _model_losses(model, x, cfg.beta, generator)
            except NumericError as exc:
                raise TrainingDiverged(
                    f"non-finite activations at epoch {epoch} batch {batch_no}: {exc}"
                ) from exc
            elbo = recon_l + cfg.beta * kl

            if cfg.alpha > 0 and state.k > 0:
                current = losses.decoder_gradients(recon_l, layers, create_graph=True)
                grad_l = losses.gradient_loss(current, state)
                total = losses.total_training_loss(elbo, grad_l, cfg.alpha)
                total.backward()
                harvested = {name: g.detach() for name, g in current.items()}
            else:
                # Either the constraint is disabled or the history is still
                # empty (first iteration), where it contributes 0 by
                # definition.  KL has no decoder dependence, so after
                # backward the decoder .grad fields hold exactly the
                # reconstruction gradients; no second-order pass needed.
                grad_l = torch.zeros(())
                total = elbo
                total.backward()
                harvested = {
                    name: torch.cat([p.grad.flatten() for p in params])
                    for name, params in layers.items()
                }

            terms = LossBreakdown(
                recon=float(recon_l.detach()),
                kl=float(kl.detach()),
                grad_loss=float(grad_l.detach()),
                total=float(total.detach()),
            )
            if not all(map(math.isfinite, (terms.recon, terms.kl, terms.grad_loss, terms.total))):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_no}: "
                    f"recon={terms.recon} kl={terms.kl} "
                    f"grad_loss={terms.grad_loss} J={terms.total}"
                )
            optimizer.step()
            state.update(harvested)

            b = len(idx)
            weight += b
            sums["recon"] += terms.recon * b
            sums["kl"] += terms.kl * b
            sums["grad_loss"] += terms.grad_loss * b
            sums["J"] += terms.total * b

        try:
            val_loss = validate_epoch(model, split.validation, cfg.beta, cfg.batch_size)
        except NumericError as exc:
            raise TrainingDiverged(
                f"non-finite validation loss at epoch {epoch}: {exc}"
            ) from exc
        row = {
            "epoch": epoch,
            "recon": sums["recon"] / weight,
            "kl": sums["kl"] / weight,
            "grad_loss": sums["grad_loss"] / weight,
            "J": sums["J"] / weight,
            "lr": lr_this_epoch,
        }
        trained.log_rows.append(row)
        if progress is not None:
            progress(
                f"epoch {epoch}/{cfg.epochs} "
                f"J={row['J']:.5f} recon={row['recon']:.5f} kl={row['kl']:.5f} "
                f"val={val_loss:.5f} lr={lr_this_epoch:g}"
            )
        if val_loss < trained.best_val_loss:
            trained.best_val_loss = val_loss
            trained.best_epoch = epoch
            best_params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        scheduler.step(val_loss)
        if epoch_hook is not None:
            epoch_hook(epoch, trained)

    if best_params is not None:
        model.load_state_dict(best_params)
    if log_path is not None:
        write_training_log(log_path, trained.log_rows)
    return trained
