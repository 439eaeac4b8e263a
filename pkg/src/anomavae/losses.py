"""Training objectives: reconstruction, KL divergence, gradient constraint.

All reductions are means over the batch so loss magnitudes are comparable
across batch sizes.  Functions are dtype-agnostic; float64 inputs yield
float64 results, which the finite-difference tests rely on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch

from .errors import NumericError, ShapeError


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match"
        )


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")


def recon_per_sample(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean squared error per sample, averaged over pixels and channels."""
    _check_same_shape(x_hat, x, "reconstruction")
    diff = x_hat - x
    return diff.pow(2).flatten(start_dim=1).mean(dim=1)


def recon_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return recon_per_sample(x_hat, x).mean()


def kl_per_sample(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) per sample, closed form.

    -1/2 * sum_j (1 + log sigma_j^2 - mu_j^2 - sigma_j^2).  Clamped at zero:
    the analytic value is non-negative, only rounding can dip below.
    """
    _check_same_shape(mu, log_var, "kl_divergence")
    _check_finite(mu, "mu")
    _check_finite(log_var, "log_var")
    kl = -0.5 * (1.0 + log_var - mu.pow(2) - log_var.exp()).sum(dim=1)
    return kl.clamp_min(0.0)


def kl_divergence(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    return kl_per_sample(mu, log_var).mean()


def elbo_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    mu: torch.Tensor,
    log_var: torch.Tensor,
    beta: float,
) -> torch.Tensor:
    """Reconstruction plus beta-weighted KL (negated evidence bound)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return recon_loss(x_hat, x) + beta * kl_divergence(mu, log_var)


def total_training_loss(
    elbo: torch.Tensor, grad_loss: torch.Tensor, alpha: float
) -> torch.Tensor:
    """J = elbo + alpha * gradient constraint."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return elbo + alpha * grad_loss


@dataclass
class LossBreakdown:
    """Scalar loss terms of one iteration or epoch, for logging."""

    recon: float
    kl: float
    grad_loss: float
    total: float


class GradientState:
    """Running per-layer average of decoder reconstruction gradients.

    ``averages`` maps layer name to a flattened 1-D tensor; ``k`` counts the
    updates folded in.  The running mean avg <- (k*avg + g) / (k+1) equals
    the direct mean of all gradients seen.
    """

    def __init__(self, averages: dict[str, torch.Tensor] | None = None, k: int = 0):
        self.averages: dict[str, torch.Tensor] = dict(averages or {})
        self.k = int(k)

    @classmethod
    def for_layers(cls, layers: Mapping[str, Sequence[torch.Tensor]]) -> "GradientState":
        """Zero-initialised state with one slot per parameterized layer."""
        averages = {
            name: torch.zeros(sum(p.numel() for p in params))
            for name, params in layers.items()
        }
        return cls(averages=averages, k=0)

    def _check_layers(self, current: Mapping[str, torch.Tensor]) -> None:
        if set(current) != set(self.averages):
            raise ShapeError(
                f"layer sets differ: state has {sorted(self.averages)}, "
                f"update has {sorted(current)}"
            )
        for name, avg in self.averages.items():
            if current[name].shape != avg.shape:
                raise ShapeError(
                    f"layer {name!r}: gradient shape {tuple(current[name].shape)} "
                    f"does not match state shape {tuple(avg.shape)}"
                )

    def update(self, current: Mapping[str, torch.Tensor]) -> None:
        """Fold one gradient snapshot into the running average."""
        self._check_layers(current)
        k = self.k
        for name, avg in self.averages.items():
            g = current[name].detach()
            self.averages[name] = (k * avg + g) / (k + 1)
        self.k = k + 1

    def copy(self) -> "GradientState":
        return GradientState(
            averages={n: a.clone() for n, a in self.averages.items()}, k=self.k
        )


def flatten_layer_gradients(
    grads: Sequence[torch.Tensor], layers: Mapping[str, Sequence[torch.Tensor]]
) -> dict[str, torch.Tensor]:
    """Regroup a flat gradient list (one entry per parameter, in layer
    order) into per-layer flattened vectors."""
    out: dict[str, torch.Tensor] = {}
    idx = 0
    for name, params in layers.items():
        pieces = []
        for _ in params:
            pieces.append(grads[idx].flatten())
            idx += 1
        out[name] = torch.cat(pieces) if len(pieces) > 1 else pieces[0]
    if idx != len(grads):
        raise ShapeError(f"gradient count {len(grads)} does not match layer map")
    return out


def decoder_gradients(
    loss: torch.Tensor,
    layers: Mapping[str, Sequence[torch.Tensor]],
    create_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Gradients of ``loss`` w.r.t. every decoder parameter, grouped and
    flattened per layer.  ``create_graph=True`` keeps them differentiable
    so the gradient constraint can enter the training objective."""
    params = [p for group in layers.values() for p in group]
    grads = torch.autograd.grad(loss, params, create_graph=create_graph)
    return flatten_layer_gradients(grads, layers)


def gradient_loss(
    current: Mapping[str, torch.Tensor], state: GradientState
) -> torch.Tensor:
    """Negative mean cosine similarity between current gradients and the
    running averages, one cosine per layer.

    Bounded in [-1, 1].  An empty history (k = 0) or a zero-norm vector on
    either side contributes 0 to keep the first iteration well defined.
    """
    some = next(iter(current.values()), None)
    dtype = some.dtype if some is not None else torch.get_default_dtype()
    if state.k == 0:
        warnings.warn(
            "gradient history is empty (k=0); gradient loss defined as 0",
            stacklevel=2,
        )
        return torch.zeros((), dtype=dtype)
    state._check_layers(current)
    cosines = []
    for name, avg in state.averages.items():
        g = current[name]
        a = avg.to(g.dtype)
        # dot / sqrt(|a|^2 |g|^2) keeps aligned and anti-aligned pairs
        # exactly at +/-1 where the two-norm product would round.
        norm_sq = torch.dot(a, a) * torch.dot(g, g)
        if norm_sq.item() == 0.0:
            cosines.append(torch.zeros((), dtype=dtype))
            continue
        cos = torch.dot(a, g) / torch.sqrt(norm_sq)
        cosines.append(cos.clamp(-1.0, 1.0))
    return -torch.stack(cosines).mean()
