"""
Command-line interface for the sparse graph attention library.

Machine outputs (graph JSON, metrics JSON, bench CSV/JSON, checkpoints) go to
explicit paths or stdout; logs always go to stderr.
"""
import os

# Benchmarks and gradient checks assume single-threaded BLAS
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import functools  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Optional, Tuple  # noqa: E402

import click  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from .modules.bench import emit, run_bench  # noqa: E402
from .modules.code_graph import graph_from_source, graph_stats, ingest_corpus, write_graph_json  # noqa: E402
from .modules.data_types import (  # noqa: E402
    BenchConfig,
    BenchVariant,
    DiffusionConfig,
    EncoderConfig,
    MaskKind,
    MaskSpec,
    ModelConfig,
    TrainConfig,
    read_config_file,
    split_config_values,
)
from .modules.errors import GraphAttentionError  # noqa: E402
from .modules.tasks import VarMisuseModel, evaluate, evaluate_ensemble, generate_dataset, load_dataset, save_dataset  # noqa: E402
from .modules.training import train  # noqa: E402
from .modules.verification import check_encoder_gradients  # noqa: E402

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(verbose: int, log_file: Optional[str]) -> None:
    """stderr handler at WARNING / INFO / DEBUG, plus an optional log file."""
    level = logging.DEBUG if verbose >= 2 else logging.INFO if verbose >= 1 else logging.WARNING
    handlers = [logging.StreamHandler(sys.stderr)]
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    if log_file:
        try:
            file_handler = logging.FileHandler(log_file, mode='a')
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            logging.getLogger().addHandler(file_handler)
        except (PermissionError, OSError):
            logger.warning(f"Could not create log file {log_file}, using console only")


def handle_errors(func):
    """Map library and I/O failures to exit code 1."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (GraphAttentionError, OSError, ValidationError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise click.exceptions.Exit(1)
    return wrapper


def write_json(data, out: Optional[Path]) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


@click.group()
@click.option("-v", "--verbose", count=True, help="Verbose logging (-v for INFO, -vv for DEBUG)")
@click.option("--log-file", default=None, help="Also append logs to this file")
def cli(verbose: int, log_file: Optional[str]):
    """Graph-conditioned sparse attention with attention diffusion for code graphs."""
    configure_logging(verbose, log_file)


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, path_type=Path),
              help="A .mini source file or a directory of them")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path), help="Output directory")
@handle_errors
def parse(input_path: Path, out: Path):
    """Emit graph JSON for every source file."""
    out.mkdir(parents=True, exist_ok=True)
    if input_path.is_dir():
        graphs = ingest_corpus(input_path).graphs
    else:
        graphs = [graph_from_source(input_path.read_text(encoding="ascii"), name=input_path.name)]
    for graph in graphs:
        write_graph_json(graph, out / f"{Path(graph.name).stem}.json")
    logger.info(f"Wrote {len(graphs)} graph files to {out}")


@cli.command()
@click.option("--corpus", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Directory of .mini files")
@click.option("--stats", is_flag=True, help="Include per-graph (tokens, nodes, edges) rows")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write JSON here instead of stdout")
@handle_errors
def graph(corpus: Path, stats: bool, out: Optional[Path]):
    """Fit edge count against node count over a corpus."""
    result = ingest_corpus(corpus)
    summary = graph_stats(result.graphs)
    data = {"graphs": len(result.graphs), "skipped": len(result.skipped), "slope": summary.slope}
    if stats:
        data["rows"] = [list(row) for row in summary.rows]
    write_json(data, out)


@cli.command()
@click.option("--seeds", default=5, show_default=True, type=click.IntRange(min=1), help="Number of seeds")
@click.option("--tol", default=1e-4, show_default=True, type=click.FloatRange(min=0.0, min_open=True),
              help="Maximum relative error")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write the reports here")
@handle_errors
def gradcheck(seeds: int, tol: float, out: Optional[Path]):
    """Full-stack gradient verification; exits 1 on failure."""
    reports = [check_encoder_gradients(seed, tol) for seed in range(seeds)]
    write_json([r.model_dump() for r in reports], out)
    failed = [r.seed for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for seeds {failed}")
        raise click.exceptions.Exit(1)


@cli.command()
@click.option("--n", "count", default=2000, show_default=True, type=click.IntRange(min=1))
@click.option("--bug-rate", default=0.5, show_default=True, type=click.FloatRange(0.0, 1.0))
@click.option("--min-statements", default=3, show_default=True, type=click.IntRange(min=1))
@click.option("--max-statements", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Dataset JSONL")
@handle_errors
def generate(count: int, bug_rate: float, min_statements: int, max_statements: int, seed: int, out: Path):
    """Generate a synthetic variable-misuse dataset."""
    save_dataset(generate_dataset(count, bug_rate, (min_statements, max_statements), seed), out)


def build_configs(
    config_file: Optional[Path], pe: str, diffusion: str, k: Optional[int], alpha: Optional[float],
    seed: Optional[int], mask: MaskSpec,
) -> Tuple[EncoderConfig, TrainConfig]:
    """Merge a key=value config file with command-line overrides."""
    values = read_config_file(config_file) if config_file else {}
    model_values, diffusion_values, train_values, dropout = split_config_values(values)
    if k is not None:
        diffusion_values["k"] = k
    if alpha is not None:
        diffusion_values["alpha"] = alpha
    if seed is not None:
        train_values["seed"] = seed
    encoder_values = {
        "model": ModelConfig(**model_values),
        "diffusion": DiffusionConfig(**diffusion_values) if diffusion == "on" else None,
        "use_positional_encoding": pe == "on",
        "vocab_size": 1,
    }
    if dropout is not None:
        encoder_values["dropout_rate"] = dropout
    train_cfg = TrainConfig(**train_values)
    # random masks follow the resolved training seed
    train_cfg = train_cfg.model_copy(update={"mask": mask.model_copy(update={"seed": train_cfg.seed})})
    return EncoderConfig(**encoder_values), train_cfg


def train_options(func):
    options = [
        click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path)),
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="key=value hyper-parameter file"),
        click.option("--pe", type=click.Choice(["on", "off"]), default="off", show_default=True,
                     help="Sinusoidal positional encoding on token nodes"),
        click.option("--diffusion", type=click.Choice(["on", "off"]), default="on", show_default=True),
        click.option("--k", type=click.IntRange(min=0), help="Diffusion hops (overrides the config file)"),
        click.option("--alpha", type=click.FloatRange(0.0, 1.0, min_open=True), help="Restart weight"),
        click.option("--seed", type=click.IntRange(min=0), help="Training seed (overrides the config file)"),
        click.option("--checkpoint", required=True, type=click.Path(dir_okay=False, path_type=Path),
                     help="Where to write the best model"),
        click.option("--metrics-out", type=click.Path(dir_okay=False, path_type=Path),
                     help="Per-epoch history JSON"),
        click.option("--progress", is_flag=True, help="Show a progress bar"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def run_training(dataset, config_file, pe, diffusion, k, alpha, seed, checkpoint, metrics_out, progress, mask):
    encoder_cfg, train_cfg = build_configs(config_file, pe, diffusion, k, alpha, seed, mask)
    result = train(load_dataset(dataset), encoder_cfg, train_cfg, progress=progress)
    result.model.save(checkpoint)
    if metrics_out is not None:
        write_json(
            {"best_epoch": result.best_epoch, "history": [r.model_dump(mode="json") for r in result.history]},
            metrics_out,
        )
    best = result.history[result.best_epoch].validation if result.best_epoch is not None else None
    write_json(best.model_dump() if best else {}, None)


@cli.command(name="train")
@train_options
@handle_errors
def train_command(**kwargs):
    """Train the variable-misuse model with the code-graph mask."""
    run_training(**kwargs, mask=MaskSpec(kind=MaskKind.GRAPH))


@cli.command()
@train_options
@click.option("--mask", "mask_kind", type=click.Choice([k.value for k in MaskKind]), default="graph",
              show_default=True)
@click.option("--density", type=click.FloatRange(0.0, 1.0, min_open=True),
              help="Random-mask density; defaults to each graph's own density")
@handle_errors
def ablate(mask_kind: str, density: Optional[float], **kwargs):
    """Train with a graph, random or complete attention mask."""
    run_training(**kwargs, mask=MaskSpec(kind=MaskKind(mask_kind), density=density))


@cli.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write metrics JSON here")
@handle_errors
def eval_command(checkpoint: Path, dataset: Path, out: Optional[Path]):
    """Print TaskMetrics JSON for a checkpoint on a dataset."""
    metrics = evaluate(VarMisuseModel.load(checkpoint), load_dataset(dataset))
    write_json(metrics.model_dump(), out)


@cli.command()
@click.option("--deep", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--shallow", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write metrics JSON here")
@handle_errors
def ensemble(deep: Path, shallow: Path, dataset: Path, out: Optional[Path]):
    """Shallow model decides bug presence, deep model points."""
    metrics = evaluate_ensemble(VarMisuseModel.load(deep), VarMisuseModel.load(shallow), load_dataset(dataset))
    write_json(metrics.model_dump(), out)


def _parse_variants(ctx, param, value: Optional[str]):
    if value is None:
        return list(BenchVariant)
    try:
        return [BenchVariant(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"choose from {', '.join(v.value for v in BenchVariant)}")


@cli.command()
@click.option("--max-len", default=4096, show_default=True, type=click.IntRange(min=1))
@click.option("--step", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--variants", callback=_parse_variants, help="Comma-separated variants (default: all)")
@click.option("--repeats", default=5, show_default=True, type=click.IntRange(min=3))
@click.option("--dense-cutoff", default=4096, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path), help="Output directory")
@click.option("--progress", is_flag=True, help="Show a progress bar")
@handle_errors
def bench(max_len, step, variants, repeats, dense_cutoff, seed, out, progress):
    """Memory and CPU time against sequence length."""
    cfg = BenchConfig(
        max_len=max_len, step=step, variants=variants, repeats=repeats, dense_cutoff=dense_cutoff, seed=seed,
    )
    emit(run_bench(cfg, progress=progress), cfg, out)


def main():
    """CLI entry point."""
    cli()


if __name__ == "__main__":
    main()
