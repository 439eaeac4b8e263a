"""Detection metrics and multi-run report tables.

Anomalies are the positive class.  Zero-denominator cases yield a metric
of 0 together with an explicit flag instead of NaN, so degenerate runs
stay visible in reports.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import UsageError
from .scoring import VERDICT_ANOMALY, ScoreRecord
from .data import LABEL_ABNORMAL, LABEL_NORMAL


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunAggregate:
    mean: float
    std: float
    n: int

    def format(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def confusion(records: Iterable[ScoreRecord]) -> ConfusionCounts:
    """Count classification outcomes; every record needs ground truth."""
    tp = fp = tn = fn = 0
    for record in records:
        if record.ground_truth not in (LABEL_NORMAL, LABEL_ABNORMAL):
            raise UsageError(
                f"record {record.sample_id!r} has no usable ground truth "
                f"({record.ground_truth!r}); evaluation requires labels"
            )
        positive = record.verdict == VERDICT_ANOMALY
        actual_positive = record.ground_truth == LABEL_ABNORMAL
        if positive and actual_positive:
            tp += 1
        elif positive and not actual_positive:
            fp += 1
        elif not positive and actual_positive:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def precision_recall_f1(counts: ConfusionCounts) -> Metrics:
    degenerate = []
    if counts.tp + counts.fp == 0:
        precision = 0.0
        degenerate.append("no_predicted_positives")
    else:
        precision = counts.tp / (counts.tp + counts.fp)
    if counts.tp + counts.fn == 0:
        recall = 0.0
        degenerate.append("no_positives")
        warnings.warn("no positive samples in the evaluated set", stacklevel=2)
    else:
        recall = counts.tp / (counts.tp + counts.fn)
    if precision + recall == 0:
        f1 = 0.0
        if "no_positives" not in degenerate and "no_predicted_positives" not in degenerate:
            degenerate.append("zero_f1_denominator")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(precision=precision, recall=recall, f1=f1, degenerate=tuple(degenerate))


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    """Mean and sample standard deviation (ddof=1); a single run has std 0."""
    if not values:
        raise UsageError("aggregate_runs requires at least one value")
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        std = 0.0
    else:
        std = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
    return RunAggregate(mean=mean, std=std, n=n)


METRIC_NAMES = ("precision", "recall", "f1")


def metrics_from_records(records: Sequence[ScoreRecord]) -> dict[str, Metrics]:
    """Per score kind metrics for one run's records."""
    by_kind: dict[str, list[ScoreRecord]] = {}
    for record in records:
        by_kind.setdefault(record.kind, []).append(record)
    return {kind: precision_recall_f1(confusion(rs)) for kind, rs in sorted(by_kind.items())}


def aggregate_metric_runs(
    runs: Sequence[Mapping[str, Metrics]],
) -> dict[str, dict[str, RunAggregate]]:
    """Aggregate per-kind metrics over repeated runs.

    Returns kind -> metric name -> aggregate.  All runs must cover the
    same score kinds.
    """
    if not runs:
        raise UsageError("need at least one run to aggregate")
    kinds = sorted(runs[0])
    for run in runs[1:]:
        if sorted(run) != kinds:
            raise UsageError(f"runs cover different score kinds: {kinds} vs {sorted(run)}")
    out: dict[str, dict[str, RunAggregate]] = {}
    for kind in kinds:
        out[kind] = {
            name: aggregate_runs([getattr(run[kind], name) for run in runs])
            for name in METRIC_NAMES
        }
    return out


_KIND_ORDER = {"recon": 0, "elbo": 1, "gradcon": 2}
_MODEL_ORDER = {"cae": 0, "vae": 1, "beta_vae": 2}
_MODEL_LABELS = {"cae": "CAE", "vae": "VAE", "beta_vae": "beta-VAE"}
_KIND_LABELS = {"recon": "Recon", "elbo": "ELBO", "gradcon": "GradCon"}


def format_method_grid(
    table: Mapping[tuple[str, str], Mapping[str, RunAggregate]],
    header_lines: Sequence[str] = (),
) -> tuple[str, list[list[str]]]:
    """Render the method-by-score grid: one column per (model kind, score
    kind) pair, one row per metric, cells as mean +/- std.

    Returns the printable text and the same content as CSV-ready rows.
    """
    columns = sorted(
        table,
        key=lambda key: (_MODEL_ORDER.get(key[0], 99), _KIND_ORDER.get(key[1], 99)),
    )
    labels = [
        f"{_MODEL_LABELS.get(m, m)} {_KIND_LABELS.get(k, k)}" for m, k in columns
    ]
    csv_rows = [["metric"] + labels]
    for metric in METRIC_NAMES:
        csv_rows.append(
            [metric] + [table[col][metric].format() for col in columns]
        )
    widths = [max(len(row[i]) for row in csv_rows) for i in range(len(csv_rows[0]))]
    lines = [f"# {line}" for line in header_lines]
    for row in csv_rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n", csv_rows


def format_beta_grid(
    entries: Sequence[tuple[float, Mapping[str, RunAggregate]]],
    header_lines: Sequence[str] = (),
) -> tuple[str, list[list[str]]]:
    """Render the beta-sweep grid: one column per beta (ascending), the
    beta=1 column labeled as the plain VAE."""
    ordered = sorted(entries, key=lambda e: e[0])

    def label(beta: float) -> str:
        text = format(beta, "g")
        return f"{text} (VAE)" if beta == 1 else text

    csv_rows = [["metric"] + [label(beta) for beta, _ in ordered]]
    for metric in METRIC_NAMES:
        csv_rows.append([metric] + [agg[metric].format() for _, agg in ordered])
    widths = [max(len(row[i]) for row in csv_rows) for i in range(len(csv_rows[0]))]
    lines = [f"# {line}" for line in header_lines]
    for row in csv_rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n", csv_rows
