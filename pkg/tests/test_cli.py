import csv
import json

import pytest

from dancelab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from dancelab.data import load_dataset
from dancelab.training import load_checkpoint

TINY = ["--layers", "2", "--d-model", "16", "--heads", "2", "--lora-rank", "2", "--batch-size", "4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert run("datagen", "--out", out, "--n-structured", 12, "--n-wild", 12, "--seed", 1) == EXIT_OK
    assert run("train", "--out", out, "--stage", "base", "--steps", 4, "--eval-every", 0, *TINY) == EXIT_OK
    return out


def test_datagen_writes_container_manifest_and_config(workdir):
    ds = load_dataset(workdir / "dataset.mids")
    assert len(ds) == 24
    assert (workdir / "dataset.manifest.csv").exists()
    assert "n_wild = 12" in (workdir / "datagen.config").read_text()


def test_datagen_is_deterministic(workdir, tmp_path):
    assert run("datagen", "--out", tmp_path, "--n-structured", 12, "--n-wild", 12, "--seed", 1) == EXIT_OK
    assert (tmp_path / "dataset.mids").read_bytes() == (workdir / "dataset.mids").read_bytes()


def test_invalid_tempo_is_a_usage_error_and_writes_nothing(tmp_path, capsys):
    assert run("datagen", "--out", tmp_path / "x", "--tempo-min", 20) == EXIT_USAGE
    assert not (tmp_path / "x").exists()
    assert "tempo" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "gen.config"
    cfg.write_text("# small set\nn_structured = 4\nn_wild = 6\n")
    assert run("datagen", "--out", tmp_path, "--config", cfg, "--n-wild", 2) == EXIT_OK
    assert len(load_dataset(tmp_path / "dataset.mids")) == 6


def test_bad_config_value_is_a_usage_error(tmp_path):
    cfg = tmp_path / "bad.config"
    cfg.write_text("n_wild = many\n")
    assert run("datagen", "--out", tmp_path, "--config", cfg) == EXIT_USAGE


def test_unknown_command_and_missing_args():
    assert run("dance") == EXIT_USAGE
    assert run("probe") == EXIT_USAGE


def test_base_training_outputs(workdir):
    ckpt = load_checkpoint(workdir / "base.mick")
    assert ckpt.stage == "base" and ckpt.step == 4
    rows = (workdir / "base_loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,beta,sigma_mean" and len(rows) == 5
    assert (workdir / "base_loss.png").stat().st_size > 0
    assert (workdir / "train_base.config").exists()


def test_adapter_stage_needs_base_checkpoint(workdir):
    assert run("train", "--out", workdir, "--stage", "adapter", "--steps", 2) == EXIT_USAGE


def test_missing_data_is_a_runtime_error(tmp_path):
    assert run("train", "--out", tmp_path, "--data", tmp_path / "none.mids", "--steps", 1) == EXIT_RUNTIME


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path):
    bad = tmp_path / "bad.mick"
    bad.write_bytes(b"MICK0009")
    assert run("sample", "--out", tmp_path, "--ckpt", bad) == EXIT_RUNTIME


def test_interrupted_cli_training_resumes(workdir, tmp_path):
    common = ["--out", tmp_path, "--data", workdir / "dataset.mids", "--steps", 6, "--eval-every", 0, *TINY]
    assert run("train", *common, "--output", "full.mick") == EXIT_OK
    assert run("train", *common, "--until", 3, "--output", "part.mick") == EXIT_OK
    assert run("train", *common, "--resume", tmp_path / "part.mick", "--output", "part.mick") == EXIT_OK
    assert (tmp_path / "part.mick").read_bytes() == (tmp_path / "full.mick").read_bytes()
    assert (tmp_path / "part_loss.csv").read_text() == (tmp_path / "full_loss.csv").read_text()


def test_adapter_training_probe_sample_and_eval(workdir):
    base = workdir / "base.mick"
    assert run("probe", "--out", workdir, "--ckpt", base, "--n-samples", 2, "--steps", 3) == EXIT_OK
    rows = list(csv.DictReader(open(workdir / "probe.csv")))
    assert len(rows) == 2 and sum(int(r["selected"]) for r in rows) == 1
    assert (workdir / "probe.png").exists() and (workdir / "probe_series.csv").exists()

    assert run("train", "--out", workdir, "--stage", "adapter", "--base-ckpt", base, "--steps", 3,
               "--probe-csv", workdir / "probe.csv", "--eval-every", 0, "--batch-size", 4,
               "--lora-rank", 2) == EXIT_OK
    adapted = load_checkpoint(workdir / "adapter.mick")
    assert adapted.base_hash() == load_checkpoint(base).base_hash()
    assert adapted.cfg.zica_layers == tuple(int(r["layer"]) for r in rows if r["selected"] == "1")

    assert run("sample", "--out", workdir, "--ckpt", workdir / "adapter.mick", "--n", 3, "--steps", 3,
               "--caption", "house") == EXIT_OK
    assert len(load_dataset(workdir / "samples.mids")) == 3
    assert run("sample", "--out", workdir, "--ckpt", base, "--caption", "tango") == EXIT_USAGE

    assert run("eval", "--out", workdir, "--ckpt", workdir / "adapter.mick", "--base-ckpt", base,
               "--tempo-seeds", 2, "--steps", 3) == EXIT_OK
    metrics = json.loads((workdir / "metrics.json").read_text())
    assert 0.0 <= metrics["beat_alignment"] <= 1.0
    assert set(metrics["tempo_response"]) == {"0.75", "1.0", "1.25"}
    assert (workdir / "metrics_energy.png").exists() and (workdir / "metrics_breakdown.csv").exists()


def test_feature_addition_and_explicit_layers(workdir, tmp_path):
    assert run("train", "--out", tmp_path, "--data", workdir / "dataset.mids", "--stage", "adapter",
               "--base-ckpt", workdir / "base.mick", "--steps", 2, "--zica-layers", "1", "--feature-addition",
               "--batch-size", 4, "--lora-rank", 2, "--eval-every", 0) == EXIT_OK
    ckpt = load_checkpoint(tmp_path / "adapter.mick")
    assert ckpt.cfg.adapter_kind == "feature_addition" and ckpt.adapters.layers == (1,)


def test_report_runs_every_toggle(workdir, capsys):
    code = run("report", "--out", workdir, "--base-ckpt", workdir / "base.mick", "--steps", 2, "--n-eval", 2,
               "--tempo-seeds", 2, "--sample-steps", 3)
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(workdir / "report.csv")))
    names = [r["model"] for r in rows]
    assert names[:2] == ["base", "untrained-adapters"]
    for v in ("full", "no-zica-selection", "low-rank", "uniform-schedule", "feature-addition"):
        assert v in names
    assert (workdir / "report.md").exists() and (workdir / "report_alignment.png").exists()
    assert "| model |" in capsys.readouterr().out
    assert run("report", "--out", workdir, "--base-ckpt", workdir / "base.mick", "--variants", "best") == EXIT_USAGE
