"""
Scaling harness: encoder-only inference memory and CPU time against sequence
length for the sparse, diffused and dense variants.

Each point uses a seeded random mask with edges_per_token * L directed edges
(symmetrized, self-loops added). Time is the median of `repeats` untraced runs
after one warm-up; peak bytes come from a separate tracemalloc-traced run so
tracing overhead never enters the timings.
"""
import json
import logging
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .code_graph import EDGE_TYPE_COUNT, random_edge_mask
from .data_types import (
    AttentionBackend,
    BenchConfig,
    BenchRecord,
    BenchStatus,
    BenchVariant,
    DiffusionConfig,
    EdgeType,
    EncoderConfig,
    ScalingFit,
)
from .encoder import EncoderParams, encoder_forward, init_params
from .errors import InsufficientPoints
from .sparse_core import CsrMatrix, DenseMatrix

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["variant", "length", "nnz", "peak_bytes", "cpu_time_ms"]
MIN_FIT_POINTS = 8
CSV_NAME = "bench.csv"
SUMMARY_NAME = "bench_summary.json"


def bench_edge_counts(mask: CsrMatrix) -> np.ndarray:
    """Diagonal slots are SelfLoop edges, every other slot an AstChild edge."""
    counts = np.zeros((mask.nnz, EDGE_TYPE_COUNT))
    diagonal = mask.pattern.row_ids == mask.col_indices
    counts[diagonal, EdgeType.SELF_LOOP.index] = 1.0
    counts[~diagonal, EdgeType.AST_CHILD.index] = 1.0
    return counts


def _variant_runner(
    variant: BenchVariant, h0: DenseMatrix, mask: CsrMatrix, counts: np.ndarray,
    params: EncoderParams, base: EncoderConfig,
) -> Callable[[], DenseMatrix]:
    if variant.is_dense:
        backend = AttentionBackend.DENSE if variant == BenchVariant.DENSE_MASK else AttentionBackend.VANILLA
        return lambda: encoder_forward(h0, mask, counts, params, base, backend=backend)[0]
    cfg = base
    if variant.diffusion_k is not None:
        cfg = base.model_copy(update={"diffusion": DiffusionConfig(k=variant.diffusion_k)})
    return lambda: encoder_forward(h0, mask, counts, params, cfg)[0]


def measure(run: Callable[[], DenseMatrix], repeats: int) -> Tuple[float, int, DenseMatrix]:
    """(median wall time in ms, peak traced bytes, output) of a callable."""
    output = run()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        run()
        times.append((time.perf_counter() - start) * 1000.0)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        run()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return statistics.median(times), max(int(peak), 1), output


@dataclass
class BenchResult:
    records: List[BenchRecord] = field(default_factory=list)
    fits: List[ScalingFit] = field(default_factory=list)
    equivalence_max_error: Optional[float] = None


def run_bench(cfg: BenchConfig, progress: bool = False) -> BenchResult:
    """
    Measure every (length, variant) point of the sweep.

    Dense variants above dense_cutoff are recorded as skipped; a MemoryError
    is recorded as out_of_memory and the sweep continues. Wherever both the
    sparse and dense_mask variants ran, their outputs are compared.
    """
    encoder_cfg = EncoderConfig(model=cfg.model, vocab_size=1, dropout_rate=0.0)
    params = init_params(encoder_cfg, cfg.seed)
    result = BenchResult()
    points = [(length, variant) for length in cfg.lengths for variant in cfg.variants]
    outputs: Dict[BenchVariant, DenseMatrix] = {}
    current_length = None
    for length, variant in tqdm(points, desc="bench", disable=not progress):
        if length != current_length:
            current_length = length
            outputs.clear()
            mask = random_edge_mask(length, cfg.edges_per_token * length, cfg.seed * 1_000_003 + length)
            counts = bench_edge_counts(mask)
            h0 = np.random.default_rng([cfg.seed, length]).normal(size=(length, cfg.model.d_model))
        if variant.is_dense and length > cfg.dense_cutoff:
            result.records.append(
                BenchRecord(variant=variant, length=length, nnz=mask.nnz, status=BenchStatus.SKIPPED)
            )
            continue
        try:
            runner = _variant_runner(variant, h0, mask, counts, params, encoder_cfg)
            millis, peak, output = measure(runner, cfg.repeats)
        except MemoryError:
            logger.warning(f"{variant.value} ran out of memory at length {length}")
            result.records.append(
                BenchRecord(variant=variant, length=length, nnz=mask.nnz, status=BenchStatus.OUT_OF_MEMORY)
            )
            continue
        outputs[variant] = output
        result.records.append(BenchRecord(
            variant=variant, length=length, nnz=mask.nnz, peak_bytes=peak, cpu_time_ms=millis,
        ))
        logger.info(f"{variant.value} L={length} nnz={mask.nnz}: {millis:.2f} ms, {peak} bytes")
        if BenchVariant.SPARSE in outputs and BenchVariant.DENSE_MASK in outputs and variant in (
            BenchVariant.SPARSE, BenchVariant.DENSE_MASK
        ):
            error = float(np.max(np.abs(outputs[BenchVariant.SPARSE] - outputs[BenchVariant.DENSE_MASK])))
            result.equivalence_max_error = max(error, result.equivalence_max_error or 0.0)
            if error > 1e-10:
                logger.warning(f"sparse and dense_mask outputs differ by {error:.3e} at length {length}")

    for variant in cfg.variants:
        for metric in ("peak_bytes", "cpu_time_ms"):
            try:
                result.fits.append(fit_scaling(result.records, variant, metric))
            except InsufficientPoints as e:
                logger.warning(f"No {metric} fit for {variant.value}: {e.message}")
    return result


def fit_scaling(records: Sequence[BenchRecord], variant: BenchVariant, metric: str = "peak_bytes") -> ScalingFit:
    """
    Least-squares slope of log(metric) against log(length).

    Raises:
        InsufficientPoints: With fewer than 8 measured points or a length span under one decade
    """
    points = [
        (r.length, getattr(r, metric)) for r in records
        if r.variant == variant and r.status == BenchStatus.OK and getattr(r, metric) is not None
    ]
    lengths = np.array([p[0] for p in points], dtype=np.float64)
    if len(points) < MIN_FIT_POINTS or lengths.max() < 10 * lengths.min():
        raise InsufficientPoints(
            f"need {MIN_FIT_POINTS} points spanning a decade, got {len(points)}",
            {"variant": variant.value, "metric": metric, "points": len(points)},
        )
    x = np.log(lengths)
    y = np.log(np.array([p[1] for p in points], dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residual ** 2)) / total if total > 0 else 1.0
    return ScalingFit(variant=variant, metric=metric, exponent=float(slope), r2=r2, points=len(points))


def records_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [{column: getattr(r, column) for column in CSV_COLUMNS} for r in records], columns=CSV_COLUMNS
    )
    frame["variant"] = frame["variant"].map(lambda v: BenchVariant(v).value).astype(object)
    frame["length"] = frame["length"].astype("int64")
    frame["nnz"] = frame["nnz"].astype("int64")
    frame["peak_bytes"] = frame["peak_bytes"].astype("Int64")
    frame["cpu_time_ms"] = frame["cpu_time_ms"].astype("float64")
    return frame


def emit(result: BenchResult, cfg: BenchConfig, out_dir: Path) -> Tuple[Path, Path]:
    """
    Write bench.csv (one row per point, empty metric cells for skipped points)
    and bench_summary.json (config, fits, skipped points, equivalence error).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / CSV_NAME
    json_path = out / SUMMARY_NAME
    records_frame(result.records).to_csv(csv_path, index=False, float_format="%.6f")
    summary = {
        "config": cfg.model_dump(mode="json"),
        "fits": [fit.model_dump(mode="json") for fit in result.fits],
        "not_measured": [
            {"variant": r.variant.value, "length": r.length, "status": r.status.value}
            for r in result.records if r.status != BenchStatus.OK
        ],
        "equivalence_max_error": result.equivalence_max_error,
    }
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote {len(result.records)} bench rows to {csv_path}")
    return csv_path, json_path


def load_records(csv_path: Path) -> List[BenchRecord]:
    """
    Read bench.csv back.

    The CSV has no status column: rows without metrics take their status from
    the not_measured list of bench_summary.json beside it, or default to
    skipped when there is no summary.
    """
    csv_path = Path(csv_path)
    frame = pd.read_csv(csv_path, dtype={"variant": str, "peak_bytes": "Int64"})
    summary_path = csv_path.with_name(SUMMARY_NAME)
    statuses: Dict[Tuple[str, int], BenchStatus] = {}
    if summary_path.exists():
        for entry in json.loads(summary_path.read_text()).get("not_measured", []):
            statuses[(entry["variant"], int(entry["length"]))] = BenchStatus(entry["status"])
    records = []
    for row in frame.itertuples(index=False):
        measured = not pd.isna(row.peak_bytes)
        status = BenchStatus.OK if measured else statuses.get((row.variant, int(row.length)), BenchStatus.SKIPPED)
        records.append(BenchRecord(
            variant=BenchVariant(row.variant),
            length=int(row.length),
            nnz=int(row.nnz),
            peak_bytes=int(row.peak_bytes) if measured else None,
            cpu_time_ms=float(row.cpu_time_ms) if measured else None,
            status=status,
        ))
    return records
