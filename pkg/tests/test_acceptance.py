"""Shipping checks for the package, one test per release criterion.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible under
``pytest -s``, and in the captured output of any failure), so a verbose
run doubles as the acceptance report.  The end-to-end fixture check at
the bottom trains full-size models and dominates the runtime; everything
else finishes in seconds.
"""

import csv
import math
import os
import re
import time
from dataclasses import replace

import numpy as np
import torch
from torch import nn

from anomavae import (
    ModelSpec,
    ScoringConfig,
    SynthConfig,
    TrainingConfig,
    generate_synthetic,
    metrics_from_records,
    score_and_decide,
    train,
)
from anomavae.cli import EXIT_OK, main
from anomavae.data import ImageSample
from anomavae.losses import GradientState, gradient_loss, kl_per_sample, recon_loss
from anomavae.scoring import score_gradcon, score_recon
from anomavae.tsne import tsne_embed
from conftest import TINY_SPEC

# Recipe for the end-to-end fixture check: recorded alongside the fixture
# so the detection bound below is reproducible.  Plateau decay is disabled
# (patience past the epoch budget) and weight decay off; both otherwise
# stall convergence on a 200-image dataset long before 30 epochs.
FIXTURE_SEED = 1234
TRAIN_SEEDS = 5
ACCEPT_SPEC = ModelSpec(latent_dim=64)
MIN_GRADCON_F1 = 0.85


def accept_training_config(seed: int) -> TrainingConfig:
    return TrainingConfig(
        beta=3.0,
        alpha=0.03,
        epochs=30,
        batch_size=16,
        lr_init=1e-3,
        plateau_patience=31,
        weight_decay=0.0,
        seed=seed,
    )


def _verdict(name: str, ok: bool, detail: str = "") -> bool:
    tail = f"  ({detail})" if detail else ""
    print(f"[{'PASS' if ok else 'FAIL'}] {name}{tail}")
    return ok


def test_kl_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(20240817)
    pairs = rng.uniform(-0.5, 0.5, size=(20, 2))
    draws = 1_000_000
    max_err = 0.0
    for mu, log_var in pairs:
        sigma = math.exp(0.5 * log_var)
        z = rng.normal(mu, sigma, size=draws)
        # E_q[log q(z) - log p(z)]; the 2-pi terms cancel
        mc = np.mean(-0.5 * ((z - mu) / sigma) ** 2 - 0.5 * log_var + 0.5 * z**2)
        closed = kl_per_sample(
            torch.tensor([[mu]], dtype=torch.float64),
            torch.tensor([[log_var]], dtype=torch.float64),
        ).item()
        max_err = max(max_err, abs(closed - mc))
    ok = max_err <= 1e-3

    zeros = torch.zeros((1, 4), dtype=torch.float64)
    ok &= kl_per_sample(zeros, zeros).item() == 0.0
    mu_t = torch.tensor([[0.3, -1.2, 0.7, 0.0]], dtype=torch.float64)
    ok &= math.isclose(
        kl_per_sample(mu_t, torch.zeros_like(mu_t)).item(),
        0.5 * float((mu_t**2).sum()),
        rel_tol=0.0,
        abs_tol=1e-12,
    )
    lv_t = torch.tensor([[0.5, -0.25, 1.0, 0.0]], dtype=torch.float64)
    ok &= math.isclose(
        kl_per_sample(torch.zeros_like(lv_t), lv_t).item(),
        0.5 * float((lv_t.exp() - 1.0 - lv_t).sum()),
        rel_tol=0.0,
        abs_tol=1e-12,
    )
    assert _verdict(
        "closed-form KL within 1e-3 of a 1e6-draw Monte Carlo estimate",
        ok,
        f"max |closed - mc| = {max_err:.2e}",
    )


def test_backprop_gradients_match_finite_differences():
    torch.manual_seed(3)
    net = nn.Sequential(
        nn.Conv2d(2, 4, 3, padding=1),
        nn.Tanh(),
        nn.ConvTranspose2d(4, 2, 3, padding=1),
    ).double()
    x = torch.randn(3, 2, 8, 8, dtype=torch.float64)
    target = torch.randn(3, 2, 8, 8, dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        return recon_loss(net(x), target)

    net.zero_grad()
    loss_value().backward()
    grads = [p.grad.clone() for p in net.parameters()]

    h = 1e-5
    good = total = 0
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(net.parameters(), grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                rel = abs(gflat[i].item() - fd) / max(abs(fd), 1e-8)
                worst = max(worst, rel)
                good += rel < 1e-4
                total += 1
    share = good / total
    assert _verdict(
        "backprop gradients match central finite differences (step 1e-5)",
        share >= 0.99,
        f"{good}/{total} params under rel err 1e-4, worst {worst:.2e}",
    )


def test_gradient_constraint_bounds_and_running_mean():
    rng = np.random.default_rng(11)
    sizes = {"tconv1": 17, "bn1": 6, "tconv2": 23}

    def snapshot() -> dict[str, torch.Tensor]:
        return {n: torch.tensor(rng.normal(size=s)) for n, s in sizes.items()}

    in_bounds = True
    for _ in range(1000):
        state = GradientState(averages=snapshot(), k=int(rng.integers(1, 50)))
        val = gradient_loss(snapshot(), state).item()
        in_bounds &= -1.0 <= val <= 1.0

    base = snapshot()
    state = GradientState(averages={n: t.clone() for n, t in base.items()}, k=3)
    # scale by a power of two: the cosine must come out exactly at the bound
    aligned = gradient_loss({n: 2.0 * t for n, t in base.items()}, state).item()
    opposed = gradient_loss({n: -t for n, t in base.items()}, state).item()
    axis = GradientState(averages={"a": torch.tensor([1.0, 0.0])}, k=1)
    orth = gradient_loss({"a": torch.tensor([0.0, 1.0])}, axis).item()
    exact = aligned == -1.0 and opposed == 1.0 and orth == 0.0

    state = GradientState.for_layers(
        {"a": [torch.zeros(9)], "b": [torch.zeros(4)]}
    )
    seen: dict[str, list[np.ndarray]] = {"a": [], "b": []}
    for _ in range(100):
        snap = {
            n: torch.tensor(rng.normal(size=s), dtype=torch.float64)
            for n, s in (("a", 9), ("b", 4))
        }
        for n, t in snap.items():
            seen[n].append(t.numpy().copy())
        state.update(snap)
    drift = max(
        float(np.abs(state.averages[n].numpy() - np.mean(seen[n], axis=0)).max())
        for n in seen
    )
    incremental = drift <= 1e-10 and state.k == 100

    assert _verdict(
        "gradient constraint bounded in [-1, 1], exact at the poles, "
        "running mean matches direct mean",
        in_bounds and exact and incremental,
        f"running-vs-direct drift {drift:.2e} over 100 updates",
    )


def test_unit_beta_equals_vae_and_score_degeneracies(tiny_split):
    cfg = TrainingConfig(
        beta=1.0, alpha=0.03, epochs=2, batch_size=8, lr_init=1e-3, seed=7
    )
    as_vae = train(tiny_split, replace(TINY_SPEC, kind="vae"), cfg)
    as_beta = train(tiny_split, replace(TINY_SPEC, kind="beta_vae"), cfg)
    params_equal = all(
        torch.equal(a, b)
        for a, b in zip(
            as_vae.model.state_dict().values(), as_beta.model.state_dict().values()
        )
    )
    scores_equal = np.array_equal(
        score_recon(as_vae, tiny_split.test), score_recon(as_beta, tiny_split.test)
    )

    gamma_zero = np.array_equal(
        score_gradcon(as_beta, tiny_split.test, gamma=0.0),
        score_recon(as_beta, tiny_split.test, batch_size=1),
    )

    # alpha = 0: history still accumulates once per iteration, and the very
    # first step is alpha-independent because the empty history scores zero
    single = generate_synthetic(
        SynthConfig(
            train_count=8, val_count=4, test_normal_count=2, test_abnormal_count=2
        ),
        seed=9,
    )
    one = TrainingConfig(
        beta=3.0, alpha=0.0, epochs=1, batch_size=8, lr_init=1e-3, seed=3
    )
    plain = train(single, TINY_SPEC, one)
    constrained = train(single, TINY_SPEC, replace(one, alpha=0.5))
    alpha_zero = plain.gradient_state is not None and plain.gradient_state.k == 1
    first_step_equal = all(
        torch.equal(a, b)
        for a, b in zip(
            plain.model.state_dict().values(),
            constrained.model.state_dict().values(),
        )
    )

    assert _verdict(
        "beta=1 training is the plain VAE, gamma=0 scoring is recon, "
        "alpha=0 keeps history and the first step",
        params_equal and scores_equal and gamma_zero and alpha_zero and first_step_equal,
    )


ACC_TINY = """\
latent_dim = 64
encoder_filters = 8,8,16,16,256
epochs = 1
batch_size = 8
lr_init = 1e-3
synth_train = 16
synth_val = 6
synth_test_normal = 4
synth_test_abnormal = 4
"""

_CELL = re.compile(r"^\d+\.\d{3} ± \d+\.\d{3}$")


def _run_cli(args: list[str], capsys) -> str:
    code = main(args)
    out = capsys.readouterr().out.strip().splitlines()
    assert code == EXIT_OK, f"cli {args} exited {code}"
    return out[-1]


def test_report_grids_follow_published_layouts(tmp_path, capsys):
    methods = {
        "cae": ACC_TINY + "model_kind = cae\n",
        "vae": ACC_TINY + "model_kind = vae\nbeta = 1\nscore_kind = elbo\n",
        "beta_vae": ACC_TINY + "score_kind = gradcon\n",
    }
    score_paths = []
    for name, text in methods.items():
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(text)
        run_root = _run_cli(
            ["train", "--config", str(cfg), "--out", str(tmp_path / name), "--runs", "2"],
            capsys,
        )
        for run in ("run_000", "run_001"):
            line = _run_cli(
                [
                    "score",
                    "--config",
                    str(cfg),
                    "--checkpoint",
                    os.path.join(run_root, run),
                    "--out",
                    str(tmp_path / f"{name}_{run}"),
                ],
                capsys,
            )
            score_paths.append(line.split("-> ")[-1])

    report_dir = tmp_path / "report"
    _run_cli(["eval", *score_paths, "--out", str(report_dir)], capsys)
    with open(report_dir / "report.csv", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    method_header = rows[0] == [
        "metric",
        "CAE Recon",
        "CAE GradCon",
        "VAE ELBO",
        "beta-VAE GradCon",
    ]
    method_metrics = [r[0] for r in rows[1:]] == ["precision", "recall", "f1"]
    method_cells = all(_CELL.match(c) for r in rows[1:] for c in r[1:])

    sweep_cfg = tmp_path / "sweep.cfg"
    sweep_cfg.write_text(ACC_TINY)  # default sweep values
    sweep_root = _run_cli(
        ["sweep-beta", "--config", str(sweep_cfg), "--out", str(tmp_path / "sweep")],
        capsys,
    )
    with open(os.path.join(sweep_root, "sweep.csv"), newline="") as fh:
        srows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    sweep_header = srows[0] == ["metric", "0.01", "0.1", "1 (VAE)", "3", "10"]
    sweep_cells = all(_CELL.match(c) for r in srows[1:] for c in r[1:])

    assert _verdict(
        "eval and sweep reports keep the published grid layouts with "
        "mean ± std cells",
        method_header and method_metrics and method_cells and sweep_header and sweep_cells,
        f"method columns {rows[0][1:]}, sweep columns {srows[0][1:]}",
    )


def test_embedding_separates_synthetic_clusters():
    rng = np.random.default_rng(42)
    points = np.vstack(
        [rng.normal(0.0, 1.0, size=(30, 640)), rng.normal(4.0, 1.0, size=(30, 640))]
    )
    start = time.time()
    emb = tsne_embed(points, perplexity=5.0, n_restarts=10, seed=0)
    elapsed = time.time() - start

    y = emb.points
    ca, cb = y[:30].mean(axis=0), y[30:].mean(axis=0)
    gap = float(np.linalg.norm(ca - cb))
    spread = 0.5 * (
        float(np.linalg.norm(y[:30] - ca, axis=1).mean())
        + float(np.linalg.norm(y[30:] - cb, axis=1).mean())
    )
    separated = gap > 4.0 * spread
    on_unit_square = all(
        y[:, axis].min() == 0.0 and y[:, axis].max() == 1.0 for axis in (0, 1)
    )
    picked_best = emb.chosen_restart == int(np.argmin(emb.restart_kls)) and (
        emb.tsne_kl == min(emb.restart_kls)
    )
    assert _verdict(
        "t-SNE separates two 640-d clusters and keeps the lowest-KL restart",
        separated and on_unit_square and picked_best and elapsed < 120.0,
        f"centroid gap {gap:.2f} vs spread {spread:.2f}, "
        f"restart {emb.chosen_restart}, {elapsed:.0f}s",
    )


def test_same_seed_reproduces_scores_csv(tmp_path, capsys):
    cfg = tmp_path / "repro.cfg"
    cfg.write_text(ACC_TINY.replace("epochs = 1", "epochs = 2"))
    payloads = []
    for tag in ("first", "second"):
        run_root = _run_cli(
            ["train", "--config", str(cfg), "--out", str(tmp_path / tag)], capsys
        )
        line = _run_cli(
            [
                "score",
                "--config",
                str(cfg),
                "--checkpoint",
                os.path.join(run_root, "run_000"),
                "--out",
                str(tmp_path / f"{tag}_scores"),
            ],
            capsys,
        )
        with open(line.split("-> ")[-1], "rb") as fh:
            payloads.append(fh.read())
    assert _verdict(
        "identical master seed reproduces the scores CSV byte for byte",
        payloads[0] == payloads[1],
        f"{len(payloads[0])} bytes each",
    )


def test_fixture_detection_across_seeds():
    split = generate_synthetic(SynthConfig(), seed=FIXTURE_SEED)
    start = time.time()
    f1s = []
    means: dict[str, dict[str, list[float]]] = {}
    last = None
    for seed in range(TRAIN_SEEDS):
        trained = train(split, ACCEPT_SPEC, accept_training_config(seed))
        last = trained
        records = score_and_decide(
            trained, split.validation, split.test, ScoringConfig()
        )
        f1s.append(metrics_from_records(records)["gradcon"].f1)
        per_seed: dict[str, dict[str, list[float]]] = {}
        for r in records:
            per_seed.setdefault(r.kind, {}).setdefault(r.ground_truth, []).append(
                r.score
            )
        for kind, groups in per_seed.items():
            for label, scores in groups.items():
                means.setdefault(kind, {}).setdefault(label, []).append(
                    float(np.mean(scores))
                )
    elapsed = time.time() - start

    separated = {
        kind: float(np.mean(groups["abnormal"])) > float(np.mean(groups["normal"]))
        for kind, groups in means.items()
    }
    mean_f1 = float(np.mean(f1s))

    # a model that has learned the board scores unstructured noise as anomalous
    rng = np.random.default_rng(0)
    noise = ImageSample(
        tensor=rng.uniform(-1.0, 1.0, size=(64, 64, 3)).astype(np.float32),
        label="abnormal",
        sample_id="noise",
    )
    noise_above_val = float(score_recon(last, [noise])[0]) > float(
        np.mean(score_recon(last, split.validation))
    )

    ok = (
        sorted(separated) == ["elbo", "gradcon", "recon"]
        and all(separated.values())
        and mean_f1 >= MIN_GRADCON_F1
        and noise_above_val
    )
    assert _verdict(
        "fixture detection: every score kind separates and mean GradCon F1 "
        f"clears {MIN_GRADCON_F1}",
        ok,
        f"gradcon F1 {['%.3f' % v for v in f1s]} mean {mean_f1:.3f}, "
        f"separation {separated}, noise above val {noise_above_val}, "
        f"{elapsed / 60:.1f} min",
    )
