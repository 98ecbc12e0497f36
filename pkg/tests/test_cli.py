"""
Tests for the click command-line interface.
"""
import json

import pytest
from click.testing import CliRunner

from sparse_graph_attention.cli import cli
from sparse_graph_attention.modules.checkpoint import load_checkpoint

from tests.helpers import FIGURE_SNIPPET, SAMPLE_PROGRAM

SMALL_CONFIG = """
# tiny model for fast runs
layers = 1
heads = 2
d_model = 8
d_k = 4
d_v = 4
d_ff = 16
epochs = 1
batch_size = 8
lr = 0.01
k = 2
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path, runner):
    config = tmp_path / "small.cfg"
    config.write_text(SMALL_CONFIG)
    dataset = tmp_path / "data.jsonl"
    result = runner.invoke(cli, ["generate", "--n", "20", "--seed", "3", "--out", str(dataset)])
    assert result.exit_code == 0, result.output
    return tmp_path, config, dataset


def train_args(config, dataset, checkpoint, *extra):
    return ["train", "--dataset", str(dataset), "--config", str(config), "--checkpoint", str(checkpoint), *extra]


def test_help_lists_commands(runner):
    result = runner.invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("parse", "graph", "train", "ablate", "eval", "ensemble", "bench", "gradcheck", "generate"):
        assert command in result.output


def test_unknown_flag_is_a_usage_error(runner):
    assert runner.invoke(cli, ["bench", "--bogus"]).exit_code == 2
    assert runner.invoke(cli, ["bench", "--out", "x", "--variants", "nope"]).exit_code == 2


def test_parse_writes_graph_json(runner, tmp_path):
    source = tmp_path / "figure.mini"
    source.write_text(FIGURE_SNIPPET)
    result = runner.invoke(cli, ["parse", "--input", str(source), "--out", str(tmp_path / "graphs")])
    assert result.exit_code == 0, result.output
    data = json.loads((tmp_path / "graphs" / "figure.json").read_text())
    assert len(data["nodes"]) == 11


def test_parse_reports_bad_source(runner, tmp_path):
    source = tmp_path / "bad.mini"
    source.write_text("x = $")
    result = runner.invoke(cli, ["parse", "--input", str(source), "--out", str(tmp_path / "graphs")])
    assert result.exit_code == 1


def test_graph_stats(runner, tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "a.mini").write_text(FIGURE_SNIPPET)
    (corpus / "b.mini").write_text(SAMPLE_PROGRAM)
    out = tmp_path / "stats.json"
    result = runner.invoke(cli, ["graph", "--corpus", str(corpus), "--stats", "--out", str(out)])
    assert result.exit_code == 0, result.output
    data = json.loads(out.read_text())
    assert data["graphs"] == 2 and data["skipped"] == 0
    assert len(data["rows"]) == 2


def test_gradcheck_passes(runner, tmp_path):
    out = tmp_path / "grad.json"
    result = runner.invoke(cli, ["gradcheck", "--seeds", "1", "--out", str(out)])
    assert result.exit_code == 0, result.output
    reports = json.loads(out.read_text())
    assert len(reports) == 1 and reports[0]["passed"]


def test_generate_is_deterministic(runner, workspace):
    tmp_path, _, dataset = workspace
    again = tmp_path / "again.jsonl"
    runner.invoke(cli, ["generate", "--n", "20", "--seed", "3", "--out", str(again)])
    assert again.read_bytes() == dataset.read_bytes()
    assert len(dataset.read_text().splitlines()) == 20


def test_train_then_eval(runner, workspace):
    tmp_path, config, dataset = workspace
    checkpoint = tmp_path / "model.ckpt"
    history = tmp_path / "history.json"
    result = runner.invoke(cli, train_args(config, dataset, checkpoint, "--metrics-out", str(history)))
    assert result.exit_code == 0, result.output
    assert load_checkpoint(checkpoint).config.model.layers == 1
    assert json.loads(history.read_text())["best_epoch"] == 0

    metrics = tmp_path / "metrics.json"
    result = runner.invoke(
        cli, ["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset), "--out", str(metrics)]
    )
    assert result.exit_code == 0, result.output
    data = json.loads(metrics.read_text())
    assert data["samples"] == 20
    assert 0.0 <= data["joint_acc"] <= 1.0


def test_training_is_byte_deterministic(runner, workspace):
    tmp_path, config, dataset = workspace
    for name in ("a.ckpt", "b.ckpt"):
        result = runner.invoke(cli, train_args(config, dataset, tmp_path / name, "--seed", "4"))
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_without_diffusion_and_with_positions(runner, workspace):
    tmp_path, config, dataset = workspace
    checkpoint = tmp_path / "plain.ckpt"
    result = runner.invoke(cli, train_args(config, dataset, checkpoint, "--diffusion", "off", "--pe", "on"))
    assert result.exit_code == 0, result.output
    saved = load_checkpoint(checkpoint).config
    assert saved.diffusion is None and saved.use_positional_encoding


def test_ablate_and_ensemble(runner, workspace):
    tmp_path, config, dataset = workspace
    deep, shallow = tmp_path / "deep.ckpt", tmp_path / "shallow.ckpt"
    result = runner.invoke(cli, ["ablate", *train_args(config, dataset, deep)[1:], "--mask", "complete"])
    assert result.exit_code == 0, result.output
    assert load_checkpoint(deep).extra["mask"]["kind"] == "complete"
    result = runner.invoke(cli, train_args(config, dataset, shallow, "--k", "0"))
    assert result.exit_code == 0, result.output
    out = tmp_path / "ensemble.json"
    result = runner.invoke(cli, [
        "ensemble", "--deep", str(deep), "--shallow", str(shallow), "--dataset", str(dataset), "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert json.loads(out.read_text())["samples"] == 20


def test_bad_config_key_exits_with_error(runner, workspace):
    tmp_path, _, dataset = workspace
    config = tmp_path / "bad.cfg"
    config.write_text("layers = 1\nwidth = 3\n")
    result = runner.invoke(cli, train_args(config, dataset, tmp_path / "x.ckpt"))
    assert result.exit_code == 1


def test_bench_single_length(runner, tmp_path):
    out = tmp_path / "bench"
    result = runner.invoke(cli, [
        "bench", "--max-len", "100", "--variants", "sparse", "--repeats", "3", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    lines = (out / "bench.csv").read_text().splitlines()
    assert lines[0] == "variant,length,nnz,peak_bytes,cpu_time_ms"
    assert len(lines) == 2 and lines[1].startswith("sparse,100,")
    summary = json.loads((out / "bench_summary.json").read_text())
    assert summary["fits"] == []


def test_log_file_receives_messages(runner, tmp_path):
    log = tmp_path / "run.log"
    out = tmp_path / "data.jsonl"
    result = runner.invoke(cli, ["-v", "--log-file", str(log), "generate", "--n", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Generated 2 samples" in log.read_text()


def test_ablation_mask_seed_follows_the_resolved_training_seed(runner, workspace):
    tmp_path, _, dataset = workspace
    config = tmp_path / "seeded.cfg"
    config.write_text(SMALL_CONFIG + "seed = 7\n")
    args = ["ablate", "--dataset", str(dataset), "--config", str(config), "--mask", "random"]

    from_file = tmp_path / "file.ckpt"
    result = runner.invoke(cli, [*args, "--checkpoint", str(from_file)])
    assert result.exit_code == 0, result.output
    assert load_checkpoint(from_file).extra["mask"]["seed"] == 7

    explicit = tmp_path / "explicit.ckpt"
    result = runner.invoke(cli, [*args, "--seed", "0", "--checkpoint", str(explicit)])
    assert result.exit_code == 0, result.output
    assert load_checkpoint(explicit).extra["mask"]["seed"] == 0
