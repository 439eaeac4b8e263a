"""Latent-space scatter plots, reconstruction grids and embedding export."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")  # headless rendering only

import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import LABEL_ABNORMAL, LABEL_NORMAL, ImageSample, batch_tensor
from .errors import UsageError
from .models import KIND_CAE
from .scoring import ScoreRecord
from .training import TrainedModel
from .tsne import Embedding2D

_LABEL_COLORS = {LABEL_NORMAL: "tab:blue", LABEL_ABNORMAL: "tab:red"}
_FALLBACK_COLOR = "tab:gray"


def collect_latents(
    trained: TrainedModel, samples: Sequence[ImageSample], batch_size: int = 64
) -> np.ndarray:
    """Latent mean vectors (bottleneck activations for the plain
    autoencoder), shape (n, latent_dim)."""
    if not isinstance(trained, TrainedModel):
        raise UsageError("collect_latents requires a TrainedModel")
    model = trained.model
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                x = torch.from_numpy(batch_tensor(samples[start : start + batch_size]))
                if trained.spec.kind == KIND_CAE:
                    out.append(model.bottleneck(x).numpy())
                else:
                    out.append(model.encode(x).mu.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def render_scatter(
    embedding: Embedding2D, out_path: str | Path, title: str | None = None
) -> Path:
    """Scatter of the unit-square embedding, colored by label.

    The color assignment also lands in a ``.legend.json`` sidecar next to
    the image so downstream tooling need not parse the PNG.
    """
    out_path = Path(out_path)
    labels = embedding.labels or tuple("" for _ in range(embedding.points.shape[0]))
    present = []
    for label in labels:
        if label not in present:
            present.append(label)
    fig, ax = plt.subplots(figsize=(6, 6))
    legend_map = {}
    for label in present:
        mask = np.array([l == label for l in labels])
        color = _LABEL_COLORS.get(label, _FALLBACK_COLOR)
        legend_map[label or "unlabeled"] = color
        ax.scatter(
            embedding.points[mask, 0],
            embedding.points[mask, 1],
            c=color,
            label=label or "unlabeled",
            s=24,
            alpha=0.85,
        )
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("t-SNE 1 (scaled)")
    ax.set_ylabel("t-SNE 2 (scaled)")
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    legend_path = out_path.with_suffix(".legend.json")
    legend_path.write_text(json.dumps(legend_map, indent=2, sort_keys=True) + "\n")
    return out_path


def render_reconstruction_grid(
    trained: TrainedModel,
    samples: Sequence[ImageSample],
    records: Sequence[ScoreRecord] | None,
    out_path: str | Path,
    max_columns: int = 8,
) -> Path:
    """Two-row grid: originals on top, reconstructions below, titles carry
    ground truth and (when available) score and verdict."""
    if not samples:
        raise UsageError("reconstruction grid requires at least one sample")
    samples = list(samples)[:max_columns]
    model = trained.model
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(batch_tensor(samples))
            if trained.spec.kind == KIND_CAE:
                recon, _ = model(x)
            else:
                recon, _, _ = model(x, generator=None)
    finally:
        model.train(was_training)
    by_id = {}
    if records:
        for r in records:
            by_id.setdefault(r.sample_id, r)

    n = len(samples)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.6), squeeze=False)
    for col, sample in enumerate(samples):
        top, bottom = axes[0][col], axes[1][col]
        top.imshow((sample.tensor + 1.0) / 2.0)
        top.set_title(sample.label, fontsize=8)
        record = by_id.get(sample.sample_id)
        bottom.imshow((recon[col].numpy() + 1.0) / 2.0)
        if record is not None:
            bottom.set_title(f"{record.verdict}\n{record.score:.4f}", fontsize=8)
        for ax in (top, bottom):
            ax.set_xticks(())
            ax.set_yticks(())
    axes[0][0].set_ylabel("input", fontsize=8)
    axes[1][0].set_ylabel("recon", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def write_embedding_csv(
    path: str | Path, sample_ids: Sequence[str], embedding: Embedding2D
) -> None:
    if len(sample_ids) != embedding.points.shape[0]:
        raise UsageError(
            f"{len(sample_ids)} ids for {embedding.points.shape[0]} embedded points"
        )
    labels = embedding.labels or tuple("" for _ in sample_ids)
    with open(path, "w", newline="") as fh:
        fh.write(f"# tsne_kl={embedding.tsne_kl:.17g}\n")
        fh.write(f"# chosen_restart={embedding.chosen_restart}\n")
        fh.write(
            "# restart_kls=" + ",".join(format(k, ".17g") for k in embedding.restart_kls) + "\n"
        )
        writer = csv.writer(fh)
        writer.writerow(("id", "x", "y", "label", "run_kl"))
        kl_text = format(embedding.tsne_kl, ".17g")
        for sid, (x, y), label in zip(sample_ids, embedding.points, labels):
            writer.writerow((sid, format(x, ".17g"), format(y, ".17g"), label, kl_text))
