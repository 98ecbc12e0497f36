"""
Tests for the scaling harness: measurement, fits and CSV output.
"""
import json

import numpy as np
import pytest

from sparse_graph_attention.modules.bench import (
    CSV_COLUMNS,
    BenchResult,
    bench_edge_counts,
    emit,
    fit_scaling,
    load_records,
    measure,
    run_bench,
)
from sparse_graph_attention.modules.code_graph import random_edge_mask
from sparse_graph_attention.modules.data_types import (
    BenchConfig,
    BenchRecord,
    BenchStatus,
    BenchVariant,
    EdgeType,
    ModelConfig,
)
from sparse_graph_attention.modules.errors import InsufficientPoints

SMALL_MODEL = ModelConfig(layers=1, heads=2, d_model=8, d_k=4, d_v=4, d_ff=16)


def synthetic(variant, lengths, metric):
    return [
        BenchRecord(variant=variant, length=length, nnz=4 * length, peak_bytes=int(metric(length)), cpu_time_ms=1.0)
        for length in lengths
    ]


@pytest.mark.parametrize("power", [1, 2])
def test_fit_recovers_exponent(power):
    records = synthetic(BenchVariant.SPARSE, range(10, 110, 10), lambda n: 64 * n ** power)
    fit = fit_scaling(records, BenchVariant.SPARSE)
    assert fit.exponent == pytest.approx(power, abs=1e-3)
    assert fit.r2 == pytest.approx(1.0, abs=1e-6)
    assert fit.points == 10


def test_fit_ignores_other_variants_and_unmeasured_points():
    records = synthetic(BenchVariant.SPARSE, range(10, 110, 10), lambda n: 8 * n)
    records += synthetic(BenchVariant.DENSE_FULL, range(10, 110, 10), lambda n: 8 * n * n)
    records.append(BenchRecord(variant=BenchVariant.SPARSE, length=500, nnz=1, status="skipped"))
    assert fit_scaling(records, BenchVariant.SPARSE).exponent == pytest.approx(1.0, abs=1e-3)
    assert fit_scaling(records, BenchVariant.DENSE_FULL).exponent == pytest.approx(2.0, abs=1e-3)


@pytest.mark.parametrize("lengths", [range(10, 60, 10), range(50, 130, 10)])
def test_fit_needs_enough_points_over_a_decade(lengths):
    with pytest.raises(InsufficientPoints):
        fit_scaling(synthetic(BenchVariant.SPARSE, lengths, lambda n: n), BenchVariant.SPARSE)


def test_bench_edge_counts_mark_self_loops():
    mask = random_edge_mask(12, 36, seed=2)
    counts = bench_edge_counts(mask)
    diagonal = mask.pattern.row_ids == mask.col_indices
    np.testing.assert_array_equal(counts.sum(axis=1), 1.0)
    assert counts[diagonal, EdgeType.SELF_LOOP.index].sum() == 12
    assert counts[~diagonal, EdgeType.AST_CHILD.index].all()


def test_measure_reports_peak_allocation():
    millis, peak, output = measure(lambda: np.ones((100, 100)), repeats=3)
    assert millis > 0
    assert peak >= 100 * 100 * 8
    assert output.shape == (100, 100)


def test_small_sweep_skips_dense_variants_above_cutoff():
    cfg = BenchConfig(
        lengths=[20, 40],
        variants=[BenchVariant.SPARSE, BenchVariant.DENSE_MASK, BenchVariant.DENSE_FULL],
        repeats=3,
        dense_cutoff=30,
        model=SMALL_MODEL,
    )
    result = run_bench(cfg)
    statuses = [(r.variant, r.length, r.status) for r in result.records]
    assert statuses == [
        (BenchVariant.SPARSE, 20, "ok"),
        (BenchVariant.DENSE_MASK, 20, "ok"),
        (BenchVariant.DENSE_FULL, 20, "ok"),
        (BenchVariant.SPARSE, 40, "ok"),
        (BenchVariant.DENSE_MASK, 40, "skipped"),
        (BenchVariant.DENSE_FULL, 40, "skipped"),
    ]
    assert result.equivalence_max_error is not None and result.equivalence_max_error < 1e-10
    assert result.fits == []
    skipped = result.records[-1]
    assert skipped.peak_bytes is None and skipped.cpu_time_ms is None


def test_sparse_uses_less_memory_than_dense_attention():
    cfg = BenchConfig(
        lengths=[400], variants=[BenchVariant.SPARSE, BenchVariant.DENSE_FULL], repeats=3, model=SMALL_MODEL,
    )
    peaks = {r.variant: r.peak_bytes for r in run_bench(cfg).records}
    assert peaks[BenchVariant.SPARSE] < peaks[BenchVariant.DENSE_FULL]


def test_diffusion_variants_run():
    cfg = BenchConfig(
        lengths=[30], variants=[BenchVariant.SPARSE_DIFFUSION_K2, BenchVariant.SPARSE_DIFFUSION_K6],
        repeats=3, model=SMALL_MODEL,
    )
    records = run_bench(cfg).records
    assert [r.status for r in records] == ["ok", "ok"]
    assert records[0].nnz == records[1].nnz


def test_emit_writes_csv_and_summary(tmp_path):
    cfg = BenchConfig(lengths=[20, 40], variants=[BenchVariant.SPARSE, BenchVariant.DENSE_MASK],
                      repeats=3, dense_cutoff=30, model=SMALL_MODEL)
    result = run_bench(cfg)
    csv_path, json_path = emit(result, cfg, tmp_path / "out")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + len(result.records)
    assert lines[-1].startswith("dense_mask,40,") and lines[-1].endswith(",,")
    summary = json.loads(json_path.read_text())
    assert summary["not_measured"] == [{"variant": "dense_mask", "length": 40, "status": "skipped"}]
    loaded = load_records(csv_path)
    assert [(r.variant, r.length, r.nnz, r.status) for r in loaded] == [
        (r.variant, r.length, r.nnz, r.status) for r in result.records
    ]
    assert [r.peak_bytes for r in loaded] == [r.peak_bytes for r in result.records]


def test_emit_without_records_writes_header_only(tmp_path):
    csv_path, _ = emit(BenchResult(), BenchConfig(lengths=[10]), tmp_path)
    assert csv_path.read_text().splitlines() == [",".join(CSV_COLUMNS)]


def test_config_fills_lengths_from_step():
    assert BenchConfig(max_len=300, step=100).lengths == [100, 200, 300]
    assert BenchConfig(max_len=50, step=100).lengths == [50]


def test_load_records_keeps_out_of_memory_status(tmp_path):
    records = synthetic(BenchVariant.SPARSE, [10, 20], lambda n: 8 * n)
    records += [
        BenchRecord(variant=BenchVariant.DENSE_FULL, length=10, nnz=40, status=BenchStatus.OUT_OF_MEMORY),
        BenchRecord(variant=BenchVariant.DENSE_MASK, length=20, nnz=80, status=BenchStatus.SKIPPED),
    ]
    csv_path, json_path = emit(BenchResult(records=records), BenchConfig(lengths=[10, 20]), tmp_path)
    assert [r.status for r in load_records(csv_path)] == [
        BenchStatus.OK, BenchStatus.OK, BenchStatus.OUT_OF_MEMORY, BenchStatus.SKIPPED,
    ]
    json_path.unlink()
    assert load_records(csv_path)[2].status == BenchStatus.SKIPPED


def test_sparse_memory_grows_linearly_and_dense_quadratically():
    cfg = BenchConfig(
        lengths=list(range(200, 2001, 200)),
        variants=[BenchVariant.SPARSE, BenchVariant.SPARSE_DIFFUSION_K2, BenchVariant.DENSE_FULL],
        repeats=3,
        model=SMALL_MODEL,
    )
    fits = {(f.variant, f.metric): f.exponent for f in run_bench(cfg).fits}
    for variant in (BenchVariant.SPARSE, BenchVariant.SPARSE_DIFFUSION_K2):
        assert fits[(variant, "peak_bytes")] < 1.2
        assert fits[(variant, "cpu_time_ms")] < 1.3
    assert fits[(BenchVariant.DENSE_FULL, "peak_bytes")] > 1.5


def test_more_diffusion_steps_cost_more_time():
    variants = [BenchVariant.SPARSE, BenchVariant.SPARSE_DIFFUSION_K2, BenchVariant.SPARSE_DIFFUSION_K6]
    result = run_bench(BenchConfig(lengths=[1000, 2000], variants=variants, repeats=5))
    times = {(r.variant, r.length): r.cpu_time_ms for r in result.records}
    for length in (1000, 2000):
        sparse, k2, k6 = (times[(variant, length)] for variant in variants)
        assert k6 > k2 > sparse
