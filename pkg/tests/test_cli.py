import os
import re

import numpy as np
import pytest

from anomavae import load_checkpoint
from anomavae.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_MISMATCH,
    EXIT_OK,
    OUT_ROOT_ENV,
    main,
    make_run_dir,
)
from anomavae.scoring import read_scores_csv

TINY_CFG = """\
# small everything: fast end-to-end runs
latent_dim = 64
encoder_filters = 8,8,16,16,256
epochs = 1
batch_size = 8
lr_init = 1e-3
synth_train = 16
synth_val = 6
synth_test_normal = 4
synth_test_abnormal = 4
tsne_perplexity = 2
tsne_restarts = 2
tsne_iters = 120
"""


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def _last_line(capsys) -> str:
    return capsys.readouterr().out.strip().splitlines()[-1]


@pytest.fixture()
def trained_run(tmp_path, cfg_file, capsys):
    """One `train` invocation; returns (run_root, checkpoint_dir)."""
    out = tmp_path / "runs"
    code = main(["train", "--config", str(cfg_file), "--out", str(out)])
    assert code == EXIT_OK
    run_root = _last_line(capsys)
    ckpt = os.path.join(run_root, "run_000")
    return run_root, ckpt


class TestRunDirs:
    def test_unique_directories_even_within_one_second(self, tmp_path):
        a = make_run_dir(tmp_path, "train")
        b = make_run_dir(tmp_path, "train")
        c = make_run_dir(tmp_path, "train")
        assert len({a, b, c}) == 3
        for d in (a, b, c):
            assert d.is_dir()

    def test_name_carries_stamp(self, tmp_path):
        d = make_run_dir(tmp_path, "score")
        assert re.match(r"score-\d{8}-\d{6}", d.name)


class TestTrain:
    def test_writes_artifacts(self, trained_run):
        run_root, ckpt = trained_run
        assert os.path.isfile(os.path.join(ckpt, "checkpoint.pt"))
        assert os.path.isfile(os.path.join(ckpt, "checkpoint.meta"))
        assert os.path.isfile(os.path.join(ckpt, "gradient_state.pt"))
        assert os.path.isfile(os.path.join(ckpt, "training_log.csv"))
        assert os.path.isfile(os.path.join(ckpt, "resolved_config.cfg"))

    def test_resolved_config_reloads(self, trained_run):
        from anomavae import load_config

        _, ckpt = trained_run
        cfg = load_config(os.path.join(ckpt, "resolved_config.cfg"))
        assert cfg.model.latent_dim == 64
        assert cfg.training.epochs == 1

    def test_multi_run_seeds_offset(self, tmp_path, cfg_file, capsys):
        out = tmp_path / "multi"
        code = main(
            ["train", "--config", str(cfg_file), "--out", str(out), "--runs", "2"]
        )
        assert code == EXIT_OK
        run_root = _last_line(capsys)
        meta0 = open(os.path.join(run_root, "run_000", "checkpoint.meta")).read()
        meta1 = open(os.path.join(run_root, "run_001", "checkpoint.meta")).read()
        sha = lambda text: re.search(r"config_sha256=(\w+)", text).group(1)
        assert sha(meta0) != sha(meta1)  # differing per-run seed

    def test_env_var_out_root(self, tmp_path, cfg_file, capsys, monkeypatch):
        monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path / "from_env"))
        code = main(["train", "--config", str(cfg_file)])
        assert code == EXIT_OK
        assert _last_line(capsys).startswith(str(tmp_path / "from_env"))

    def test_periodic_checkpoints(self, tmp_path, capsys):
        cfg = tmp_path / "period.cfg"
        cfg.write_text(TINY_CFG.replace("epochs = 1", "epochs = 2") + "checkpoint_every = 1\n")
        out = tmp_path / "runs"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        run_root = _last_line(capsys)
        run_dir = os.path.join(run_root, "run_000")
        assert os.path.isdir(os.path.join(run_dir, "epoch_0001"))
        assert os.path.isdir(os.path.join(run_dir, "epoch_0002"))


class TestScore:
    def test_scores_csv_schema_and_meta(self, tmp_path, cfg_file, trained_run, capsys):
        _, ckpt = trained_run
        out = tmp_path / "scores_out"
        code = main(
            [
                "score",
                "--config",
                str(cfg_file),
                "--checkpoint",
                ckpt,
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        path = _last_line(capsys).split("-> ")[-1]
        records, meta = read_scores_csv(path)
        # 8 test samples x 3 score kinds
        assert len(records) == 24
        assert meta["model_kind"] == "beta_vae"
        assert meta["beta"] == "3"
        assert meta["gamma"] == "1"
        assert meta["data"] == "synthetic"
        assert "config_sha256" in meta

    def test_same_checkpoint_scores_are_bitwise_identical(
        self, tmp_path, cfg_file, trained_run, capsys
    ):
        _, ckpt = trained_run
        args = ["score", "--config", str(cfg_file), "--checkpoint", ckpt]
        assert main(args + ["--out", str(tmp_path / "s1")]) == EXIT_OK
        p1 = _last_line(capsys).split("-> ")[-1]
        assert main(args + ["--out", str(tmp_path / "s2")]) == EXIT_OK
        p2 = _last_line(capsys).split("-> ")[-1]
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_checkpoint_version_exits_4(self, tmp_path, cfg_file, trained_run, capsys):
        _, ckpt = trained_run
        meta = os.path.join(ckpt, "checkpoint.meta")
        text = open(meta).read().replace("format_version=1", "format_version=9")
        open(meta, "w").write(text)
        code = main(
            [
                "score",
                "--config",
                str(cfg_file),
                "--checkpoint",
                ckpt,
                "--out",
                str(tmp_path / "x"),
            ]
        )
        assert code == EXIT_CHECKPOINT
        assert "format_version" in capsys.readouterr().err


class TestEval:
    def _score(self, tmp_path, cfg_file, ckpt, capsys, name):
        args = [
            "score",
            "--config",
            str(cfg_file),
            "--checkpoint",
            ckpt,
            "--out",
            str(tmp_path / name),
        ]
        assert main(args) == EXIT_OK
        return _last_line(capsys).split("-> ")[-1]

    def test_report_grid(self, tmp_path, cfg_file, trained_run, capsys):
        _, ckpt = trained_run
        scores = self._score(tmp_path, cfg_file, ckpt, capsys, "e1")
        out = tmp_path / "report"
        code = main(["eval", scores, "--out", str(out)])
        assert code == EXIT_OK
        text = (out / "report.txt").read_text()
        assert "beta-VAE Recon" in text
        assert "beta-VAE ELBO" in text
        assert "beta-VAE GradCon" in text
        for metric in ("precision", "recall", "f1"):
            assert metric in text
        assert "±" in text
        assert (out / "report.csv").is_file()

    def test_mismatched_test_sets_exit_5(self, tmp_path, cfg_file, trained_run, capsys):
        _, ckpt = trained_run
        scores = self._score(tmp_path, cfg_file, ckpt, capsys, "e2")
        # second file with one id renamed
        mutated = tmp_path / "mutated.csv"
        text = open(scores).read().replace("test/normal/0000", "test/normal/9999")
        mutated.write_text(text)
        code = main(["eval", scores, str(mutated)])
        assert code == EXIT_MISMATCH
        assert "different test sets" in capsys.readouterr().err

    def test_unlabeled_records_exit_1(self, tmp_path, cfg_file, trained_run, capsys):
        _, ckpt = trained_run
        scores = self._score(tmp_path, cfg_file, ckpt, capsys, "e3")
        stripped = tmp_path / "unlabeled.csv"
        lines = open(scores).read().splitlines()
        out_lines = []
        for line in lines:
            if line.startswith("#") or line.startswith("id,"):
                out_lines.append(line)
            else:
                cells = line.split(",")
                cells[-1] = ""
                out_lines.append(",".join(cells))
        stripped.write_text("\n".join(out_lines) + "\n")
        assert main(["eval", str(stripped)]) == EXIT_FAILURE


class TestVisualize:
    def test_writes_embedding_scatter_grid(self, tmp_path, cfg_file, trained_run, capsys):
        _, ckpt = trained_run
        out = tmp_path / "viz_out"
        code = main(
            [
                "visualize",
                "--config",
                str(cfg_file),
                "--checkpoint",
                ckpt,
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        run_dir = _last_line(capsys)
        for name in (
            "embedding.csv",
            "latent_scatter.png",
            "latent_scatter.legend.json",
            "reconstructions.png",
        ):
            assert os.path.isfile(os.path.join(run_dir, name)), name
        first = open(os.path.join(run_dir, "embedding.csv")).readline()
        assert first.startswith("# tsne_kl=")


class TestSynth:
    def test_materializes_fixture(self, tmp_path, cfg_file, capsys):
        target = tmp_path / "fixture"
        code = main(["synth", "--config", str(cfg_file), "--out", str(target)])
        assert code == EXIT_OK
        assert "30 images" in capsys.readouterr().out  # 16 + 6 + 4 + 4
        assert (target / "train" / "normal" / "0000.png").is_file()
        assert any((target / "test" / "abnormal").iterdir())

    def test_refuses_nonempty_target(self, tmp_path, cfg_file, capsys):
        target = tmp_path / "occupied"
        target.mkdir()
        (target / "keep.txt").write_text("data")
        code = main(["synth", "--config", str(cfg_file), "--out", str(target)])
        assert code == EXIT_CONFIG
        assert "refusing" in capsys.readouterr().err

    def test_roundtrip_through_train(self, tmp_path, cfg_file, capsys):
        # a materialized fixture loads back as data_root and trains
        target = tmp_path / "fixture"
        assert main(["synth", "--config", str(cfg_file), "--out", str(target)]) == EXIT_OK
        capsys.readouterr()
        cfg2 = tmp_path / "disk.cfg"
        cfg2.write_text(TINY_CFG + f"data_root = {target}\n")
        out = tmp_path / "disk_runs"
        assert main(["train", "--config", str(cfg2), "--out", str(out)]) == EXIT_OK


class TestSweepBeta:
    def test_grid_and_artifacts(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text(TINY_CFG + "beta_sweep = 0.1,1\n")
        out = tmp_path / "sweep_out"
        code = main(["sweep-beta", "--config", str(cfg), "--out", str(out)])
        assert code == EXIT_OK
        run_root = _last_line(capsys)
        text = open(os.path.join(run_root, "sweep.txt")).read()
        assert "0.1" in text
        assert "1 (VAE)" in text
        assert os.path.isfile(os.path.join(run_root, "sweep.csv"))
        for beta_name in ("beta_0.1", "beta_1"):
            scores = os.path.join(run_root, beta_name, "run_000", "scores.csv")
            assert os.path.isfile(scores), beta_name
            records, meta = read_scores_csv(scores)
            assert {r.kind for r in records} == {"gradcon"}


class TestErrorPaths:
    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 1\n")
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        assert "no_such_key" in capsys.readouterr().err

    def test_missing_data_root_exits_2(self, tmp_path, cfg_file, capsys):
        cfg = tmp_path / "missing_data.cfg"
        cfg.write_text(TINY_CFG + f"data_root = {tmp_path / 'nowhere'}\n")
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_divergence_exits_3(self, tmp_path, capsys):
        cfg = tmp_path / "diverge.cfg"
        cfg.write_text(TINY_CFG.replace("lr_init = 1e-3", "lr_init = 1e12"))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "training aborted" in capsys.readouterr().err

    def test_checkpoint_loadable_by_api(self, trained_run):
        _, ckpt = trained_run
        trained = load_checkpoint(ckpt)
        assert trained.spec.latent_dim == 64
        assert trained.gradient_state is not None
