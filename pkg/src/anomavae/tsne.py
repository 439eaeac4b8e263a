"""Exact t-SNE for small latent collections.

Joint probabilities use a per-point bandwidth found by binary search on
the perplexity; the embedding is optimized by gradient descent with
momentum and an early-exaggeration phase.  Several restarts run from
different seeds and the one with the lowest final KL divergence wins.
Exact O(n^2) math only; the test sets here are a few hundred points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

_EPS = 1e-12


@dataclass(frozen=True)
class Embedding2D:
    """2-D embedding scaled to the unit square, plus restart diagnostics."""

    points: np.ndarray  # (n, 2), each axis within [0, 1]
    tsne_kl: float
    labels: tuple[str, ...]
    restart_kls: tuple[float, ...]
    chosen_restart: int


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_probs(neg_dist_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Conditional probabilities and entropy (nats) for one precision.

    The logits are shifted by their max before exponentiating; the shift
    cancels in the normalization but keeps the nearest neighbor's weight
    at exp(0), so large distances (e.g. squared distances of ~10^3 in
    high-dimensional latent spaces) cannot underflow the whole row.
    """
    logits = neg_dist_row * beta
    p = np.exp(logits - logits.max())
    p = p / p.sum()
    entropy = -np.sum(p * np.log(np.maximum(p, _EPS)))
    return p, entropy


def _conditional_probabilities(
    dists: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 64
) -> np.ndarray:
    """Binary search one precision per point so every conditional
    distribution hits the target perplexity."""
    n = dists.shape[0]
    target_entropy = np.log(perplexity)
    p_cond = np.zeros((n, n))
    for i in range(n):
        row = -np.delete(dists[i], i)
        beta, beta_min, beta_max = 1.0, 0.0, np.inf
        p, entropy = _row_probs(row, beta)
        for _ in range(max_iter):
            diff = entropy - target_entropy
            if abs(diff) < tol:
                break
            if diff > 0:  # too flat, sharpen
                beta_min = beta
                beta = beta * 2.0 if not np.isfinite(beta_max) else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == 0.0 else (beta + beta_min) / 2.0
            p, entropy = _row_probs(row, beta)
        p_cond[i, np.arange(n) != i] = p
    return p_cond


def joint_probabilities(latents: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrised joint probabilities P, summing to 1, zero diagonal."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"latents must be 2-D (n, d), got shape {x.shape}")
    n = x.shape[0]
    if perplexity <= 0:
        raise ConfigError(f"perplexity must be > 0, got {perplexity}")
    if n < 3 * perplexity:
        raise ConfigError(
            f"t-SNE needs at least 3*perplexity points (3*{perplexity:g}), got {n}"
        )
    if not np.isfinite(x).all():
        raise NumericError("latents contain non-finite values")
    p_cond = _conditional_probabilities(_pairwise_sq_dists(x), perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    p = np.maximum(p, _EPS)
    np.fill_diagonal(p, 0.0)
    return p


def _kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    q_num = 1.0 / (1.0 + _pairwise_sq_dists(y))
    np.fill_diagonal(q_num, 0.0)
    q = np.maximum(q_num / q_num.sum(), _EPS)
    mask = ~np.eye(p.shape[0], dtype=bool)
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _optimize(
    p: np.ndarray,
    rng: np.random.Generator,
    n_iter: int,
    learning_rate: float,
    early_exaggeration: float,
    exaggeration_iters: int,
    momentum_early: float = 0.5,
    momentum_late: float = 0.8,
    min_gain: float = 0.01,
) -> np.ndarray:
    n = p.shape[0]
    y = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iter):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = momentum_early if it < exaggeration_iters else momentum_late

        q_num = 1.0 / (1.0 + _pairwise_sq_dists(y))
        np.fill_diagonal(q_num, 0.0)
        q = np.maximum(q_num / q_num.sum(), _EPS)

        pq = (exag * p - q) * q_num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)

        # per-coordinate gains: grow while the gradient keeps pushing
        # against the velocity, shrink while they agree
        agree = np.sign(grad) == np.sign(velocity)
        gains = np.where(agree, gains * 0.8, gains + 0.2)
        np.clip(gains, min_gain, None, out=gains)

        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y


def tsne_single(
    latents: np.ndarray,
    perplexity: float,
    seed: int,
    n_iter: int = 1000,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> tuple[np.ndarray, float]:
    """One t-SNE run; returns the raw 2-D embedding and its final KL
    (computed against the unexaggerated P)."""
    p = joint_probabilities(latents, perplexity)
    rng = np.random.default_rng(seed)
    y = _optimize(
        p, rng, n_iter, learning_rate, early_exaggeration, exaggeration_iters
    )
    kl = _kl_divergence(p, y)
    if not np.isfinite(kl):
        raise NumericError(f"t-SNE diverged: final KL is {kl}")
    return y, kl


def scale_unit(points: np.ndarray) -> np.ndarray:
    """Min-max scale each axis to [0, 1]; a constant axis maps to 0.5."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ConfigError(f"scale_unit needs at least 2 points, got shape {points.shape}")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = hi - lo
    out = np.empty_like(points)
    for axis in range(points.shape[1]):
        if span[axis] == 0:
            out[:, axis] = 0.5
        else:
            out[:, axis] = (points[:, axis] - lo[axis]) / span[axis]
    return out


def tsne_embed(
    latents: np.ndarray,
    perplexity: float = 5.0,
    n_restarts: int = 100,
    seed: int = 0,
    labels: tuple[str, ...] | None = None,
    n_iter: int = 1000,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> Embedding2D:
    """Run ``n_restarts`` independent optimizations (seeds seed+0..) and
    keep the embedding with the lowest final KL, scaled to the unit
    square."""
    if n_restarts < 1:
        raise ConfigError(f"n_restarts must be >= 1, got {n_restarts}")
    latents = np.asarray(latents, dtype=np.float64)
    if labels is not None and len(labels) != latents.shape[0]:
        raise ConfigError(
            f"{len(labels)} labels for {latents.shape[0]} points"
        )
    best_y: np.ndarray | None = None
    best_kl = np.inf
    best_index = 0
    kls = []
    for restart in range(n_restarts):
        y, kl = tsne_single(
            latents,
            perplexity,
            seed + restart,
            n_iter=n_iter,
            learning_rate=learning_rate,
            early_exaggeration=early_exaggeration,
            exaggeration_iters=exaggeration_iters,
        )
        kls.append(kl)
        if kl < best_kl:
            best_kl = kl
            best_y = y
            best_index = restart
    assert best_y is not None
    return Embedding2D(
        points=scale_unit(best_y),
        tsne_kl=best_kl,
        labels=tuple(labels) if labels is not None else (),
        restart_kls=tuple(kls),
        chosen_restart=best_index,
    )
