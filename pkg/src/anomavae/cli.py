"""Command line interface.

Subcommands: train, score, eval, visualize, synth, sweep-beta.  Every run
writes into a fresh timestamped directory under the output root (flag,
config key or ``ANOMAVAE_OUT_ROOT``); existing run directories are never
reused or overwritten.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 training aborted, 4 checkpoint format mismatch, 5 mismatched test sets
in evaluation.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

from . import checkpoint as ckpt
from . import config as config_mod
from . import metrics as metrics_mod
from . import scoring as scoring_mod
from . import visualize as viz_mod
from .config import ExperimentConfig
from .data import DatasetSplit, generate_synthetic, load_split, write_synthetic
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    EvalMismatchError,
    TrainingDiverged,
    UsageError,
)
from .training import train
from .tsne import tsne_embed

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_CHECKPOINT = 4
EXIT_MISMATCH = 5

OUT_ROOT_ENV = "ANOMAVAE_OUT_ROOT"


def resolve_out_root(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.out_root:
        return Path(cfg.out_root)
    env = os.environ.get(OUT_ROOT_ENV, "")
    return Path(env) if env else Path("runs")


def make_run_dir(root: Path, name: str) -> Path:
    """Create a unique timestamped run directory under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{name}-{stamp}"
    counter = 0
    while candidate.exists():
        counter += 1
        candidate = root / f"{name}-{stamp}-{counter}"
    candidate.mkdir()
    return candidate


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = config_mod.load_config(args.config)
    else:
        cfg = config_mod.default_config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        overrides["run_count"] = args.runs
    if overrides:
        cfg = config_mod.with_overrides(cfg, **overrides)
    return cfg


def resolve_dataset(cfg: ExperimentConfig) -> DatasetSplit:
    """Load the configured dataset; an empty data_root selects the
    synthetic fixture, generated from the base seed."""
    if cfg.data_root:
        return load_split(cfg.data_root)
    return generate_synthetic(cfg.synth, cfg.training.seed)


def _scores_meta(cfg: ExperimentConfig, trained, seed: int) -> dict[str, object]:
    return {
        "model_kind": trained.spec.kind,
        "beta": format(cfg.training.beta, "g"),
        "alpha": format(cfg.training.alpha, "g"),
        "gamma": format(cfg.scoring.gamma, "g"),
        "elbo_score_beta": format(cfg.scoring.elbo_score_beta, "g"),
        "threshold_strategy": cfg.scoring.threshold_strategy,
        "threshold_param": format(cfg.scoring.threshold_param, "g"),
        "seed": seed,
        "config_sha256": trained.config_sha256,
        "data": cfg.data_root or "synthetic",
    }


def _train_one(
    cfg: ExperimentConfig, split: DatasetSplit, seed: int, run_dir: Path
):
    train_cfg = dataclasses.replace(cfg.training, seed=seed)
    (run_dir / "resolved_config.cfg").write_text(
        config_mod.dump_config(
            dataclasses.replace(cfg, training=train_cfg)
        )
    )

    def hook(epoch: int, trained) -> None:
        if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            ckpt.save_checkpoint(run_dir / f"epoch_{epoch:04d}", trained)

    trained = train(
        split,
        cfg.model,
        train_cfg,
        log_path=run_dir / "training_log.csv",
        epoch_hook=hook,
        progress=lambda msg: print(f"[{run_dir.name}] {msg}"),
    )
    ckpt.save_checkpoint(run_dir, trained)
    return trained


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    split = resolve_dataset(cfg)
    out_root = resolve_out_root(cfg, args.out)
    run_root = make_run_dir(out_root, "train")
    for run_index in range(cfg.run_count):
        seed = cfg.training.seed + run_index
        run_dir = run_root / f"run_{run_index:03d}"
        run_dir.mkdir()
        trained = _train_one(cfg, split, seed, run_dir)
        print(
            f"run {run_index}: best epoch {trained.best_epoch} "
            f"val loss {trained.best_val_loss:.6f} -> {run_dir}"
        )
    print(run_root)
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    trained = ckpt.load_checkpoint(args.checkpoint)
    split = resolve_dataset(cfg)
    records = scoring_mod.score_and_decide(
        trained, split.validation, split.test, cfg.scoring
    )
    out_root = resolve_out_root(cfg, args.out)
    run_dir = make_run_dir(out_root, "score")
    path = run_dir / "scores.csv"
    scoring_mod.write_scores_csv(
        path, records, _scores_meta(cfg, trained, cfg.training.seed)
    )
    flagged = sum(r.verdict == scoring_mod.VERDICT_ANOMALY for r in records)
    print(f"{len(records)} records ({flagged} flagged) -> {path}")
    return EXIT_OK


def _check_same_test_sets(per_file_ids: dict[str, set[str]]) -> None:
    reference: set[str] | None = None
    ref_name = ""
    for name, ids in per_file_ids.items():
        if reference is None:
            reference, ref_name = ids, name
        elif ids != reference:
            only_ref = sorted(reference - ids)[:3]
            only_this = sorted(ids - reference)[:3]
            raise EvalMismatchError(
                f"score files cover different test sets: {ref_name} vs {name} "
                f"(e.g. {only_ref} vs {only_this})"
            )


def cmd_eval(args: argparse.Namespace) -> int:
    runs_by_group: dict[tuple[str, str], list[float]] = {}
    metric_runs: dict[tuple[str, str], list[metrics_mod.Metrics]] = {}
    per_file_ids: dict[str, set[str]] = {}
    alphas, gammas = set(), set()
    for path in args.scores:
        records, meta = scoring_mod.read_scores_csv(path)
        per_file_ids[str(path)] = {r.sample_id for r in records}
        alphas.add(meta.get("alpha", "?"))
        gammas.add(meta.get("gamma", "?"))
        model_kind = meta.get("model_kind", "unknown")
        for kind, metric in metrics_mod.metrics_from_records(records).items():
            metric_runs.setdefault((model_kind, kind), []).append(metric)
    _check_same_test_sets(per_file_ids)

    table = {}
    run_counts = set()
    for group, metric_list in metric_runs.items():
        table[group] = {
            name: metrics_mod.aggregate_runs([getattr(m, name) for m in metric_list])
            for name in metrics_mod.METRIC_NAMES
        }
        run_counts.add(len(metric_list))
    header = [
        f"runs={','.join(str(n) for n in sorted(run_counts))}",
        "std=sample (ddof=1)",
        f"alpha={','.join(sorted(alphas))} gamma={','.join(sorted(gammas))}",
    ]
    text, csv_rows = metrics_mod.format_method_grid(table, header)
    print(text, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text)
        with open(out_dir / "report.csv", "w", newline="") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            for line in header:
                fh.write(f"# {line}\n")
            writer.writerows(csv_rows)
        print(out_dir / "report.txt")
    return EXIT_OK


def cmd_visualize(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    trained = ckpt.load_checkpoint(args.checkpoint)
    split = resolve_dataset(cfg)
    out_root = resolve_out_root(cfg, args.out)
    run_dir = make_run_dir(out_root, "viz")

    latents = viz_mod.collect_latents(trained, split.test)
    embedding = tsne_embed(
        latents,
        perplexity=cfg.viz.tsne_perplexity,
        n_restarts=cfg.viz.tsne_restarts,
        seed=cfg.training.seed,
        labels=tuple(s.label for s in split.test),
        n_iter=cfg.viz.tsne_iters,
        learning_rate=cfg.viz.tsne_learning_rate,
        early_exaggeration=cfg.viz.tsne_early_exaggeration,
        exaggeration_iters=cfg.viz.tsne_exaggeration_iters,
    )
    ids = [s.sample_id for s in split.test]
    viz_mod.write_embedding_csv(run_dir / "embedding.csv", ids, embedding)
    viz_mod.render_scatter(embedding, run_dir / "latent_scatter.png")

    normal = [s for s in split.test if s.label == "normal"][:4]
    abnormal = [s for s in split.test if s.label == "abnormal"][:4]
    grid_samples = normal + abnormal
    recon_scores = scoring_mod.score_recon(trained, grid_samples)
    threshold = scoring_mod.calibrate_threshold(
        scoring_mod.score_recon(trained, split.validation),
        cfg.scoring.threshold_strategy,
        cfg.scoring.threshold_param,
    )
    records = [
        scoring_mod.ScoreRecord(
            sample_id=s.sample_id,
            kind="recon",
            score=float(v),
            threshold=threshold,
            verdict=scoring_mod.decide(float(v), threshold),
            ground_truth=s.label,
        )
        for s, v in zip(grid_samples, recon_scores)
    ]
    viz_mod.render_reconstruction_grid(
        trained, grid_samples, records, run_dir / "reconstructions.png"
    )
    print(run_dir)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.out:
        target = Path(args.out)
        if target.exists() and any(target.iterdir()):
            raise ConfigError(f"refusing to write fixture into non-empty {target}")
    else:
        target = make_run_dir(resolve_out_root(cfg, None), "synth")
    count = write_synthetic(cfg.synth, cfg.training.seed, target)
    print(f"{count} images -> {target}")
    return EXIT_OK


def cmd_sweep_beta(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    split = resolve_dataset(cfg)
    out_root = resolve_out_root(cfg, args.out)
    run_root = make_run_dir(out_root, "sweep-beta")
    sweep_scoring = dataclasses.replace(cfg.scoring, score_kind="gradcon")

    entries = []
    for beta in cfg.beta_sweep:
        per_run = []
        beta_dir = run_root / f"beta_{format(beta, 'g')}"
        beta_dir.mkdir()
        for run_index in range(cfg.run_count):
            seed = cfg.training.seed + run_index
            run_dir = beta_dir / f"run_{run_index:03d}"
            run_dir.mkdir()
            run_cfg = dataclasses.replace(
                cfg,
                training=dataclasses.replace(cfg.training, beta=beta, seed=seed),
                scoring=sweep_scoring,
            )
            trained = _train_one(run_cfg, split, seed, run_dir)
            records = scoring_mod.score_and_decide(
                trained, split.validation, split.test, sweep_scoring
            )
            scoring_mod.write_scores_csv(
                run_dir / "scores.csv",
                records,
                _scores_meta(run_cfg, trained, seed),
            )
            per_run.append(metrics_mod.metrics_from_records(records)["gradcon"])
        entries.append(
            (
                beta,
                {
                    name: metrics_mod.aggregate_runs([getattr(m, name) for m in per_run])
                    for name in metrics_mod.METRIC_NAMES
                },
            )
        )
    header = [
        f"score=gradcon runs={cfg.run_count}",
        "std=sample (ddof=1)",
        f"alpha={cfg.training.alpha:g} gamma={cfg.scoring.gamma:g}",
    ]
    text, csv_rows = metrics_mod.format_beta_grid(entries, header)
    print(text, end="")
    (run_root / "sweep.txt").write_text(text)
    with open(run_root / "sweep.csv", "w", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        for line in header:
            fh.write(f"# {line}\n")
        writer.writerows(csv_rows)
    print(run_root)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomavae",
        description="Variational-autoencoder anomaly detection for board images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="output root (overrides config and environment)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--runs", type=int, help="run count override")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory or .meta file")

    p_train = sub.add_parser("train", help="train a model, write checkpoint and log")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_score = sub.add_parser("score", help="score the test split with a checkpoint")
    common(p_score, checkpoint=True)
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser("eval", help="aggregate score files into a metric report")
    p_eval.add_argument("scores", nargs="+", help="scores.csv files, one per run")
    p_eval.add_argument("--out", help="directory for report.txt / report.csv")
    p_eval.set_defaults(func=cmd_eval)

    p_viz = sub.add_parser("visualize", help="latent embedding and reconstruction grid")
    common(p_viz, checkpoint=True)
    p_viz.set_defaults(func=cmd_visualize)

    p_synth = sub.add_parser("synth", help="materialise the synthetic fixture as PNGs")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_sweep = sub.add_parser("sweep-beta", help="train and evaluate across beta values")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep_beta)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except CheckpointFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except EvalMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DataError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
