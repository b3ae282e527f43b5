"""Evaluation statistics, iterative inference bookkeeping, benchmark I/O."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tailsid import evaluation
from tailsid.errors import CsvFormatError
from tailsid.evaluation import (
    BenchmarkSeries,
    evaluate_batch,
    iterative_inference,
    load_two_column_csv,
    run_benchmark,
)
from tailsid.metamodel import PredictiveOutput
from tailsid.sysgen import TaskDataset


def make_task(m=6, n=5, c=2, fill=0.0, rng=None):
    if rng is None:
        u = np.full(n, fill, dtype=float)
        y = np.full(n, fill, dtype=float)
        cu = np.zeros(m)
        cy = np.zeros(m)
    else:
        u, y, cu, cy = (rng.standard_normal(k) for k in (n, n, m, m))
    return TaskDataset(context_u=cu, context_y=cy, query_u=u, query_y=y, init_len=c)


def echo_model(tasks):
    """Predicts the query input itself; unit sigma."""
    return [
        PredictiveOutput(
            mu=t.query_u[t.init_len:].astype(float), sigma=np.ones(len(t.query_u) - t.init_len)
        )
        for t in tasks
    ]


def perfect_model(tasks):
    return [
        PredictiveOutput(mu=t.target.copy(), sigma=np.ones(len(t.target))) for t in tasks
    ]


def residual_model(residuals):
    """Constant per-task residual, so task i has RMSE |residuals[i]|."""

    def model(tasks):
        return [
            PredictiveOutput(
                mu=t.target + residuals[i], sigma=np.ones(len(t.target))
            )
            for i, t in enumerate(tasks)
        ]

    return model


class TestEvaluateBatch:
    def test_perfect_model_zero_statistics(self, rng):
        tasks = [make_task(rng=rng) for _ in range(5)]
        report = evaluate_batch(perfect_model, tasks, tail_fraction=0.4)
        assert report.mean_rmse == 0.0
        assert report.median_rmse == 0.0
        assert report.tail_mean_rmse == 0.0
        assert report.histogram.counts.sum() == 5

    def test_known_rmse_set(self, rng):
        tasks = [make_task(rng=rng) for _ in range(5)]
        report = evaluate_batch(residual_model([1.0, 2.0, 3.0, 4.0, 5.0]), tasks, 0.4)
        assert report.mean_rmse == pytest.approx(3.0, rel=1e-12)
        assert report.tail_mean_rmse == pytest.approx(4.5, rel=1e-12)
        assert report.median_rmse == pytest.approx(3.0, rel=1e-12)
        assert report.n_tasks == 5
        assert len(report.per_task) == 5

    def test_lower_median_for_even_count(self, rng):
        tasks = [make_task(rng=rng) for _ in range(4)]
        report = evaluate_batch(residual_model([1.0, 2.0, 3.0, 4.0]), tasks, 0.5)
        assert report.median_rmse == pytest.approx(2.0, rel=1e-12)

    def test_duplication_invariance(self, rng):
        tasks = [make_task(rng=rng) for _ in range(5)]
        resid = [0.5, 1.5, 2.5, 3.5, 4.5]
        a = evaluate_batch(residual_model(resid), tasks, 0.4)
        b = evaluate_batch(residual_model(resid * 2), tasks * 2, 0.4)
        assert a.mean_rmse == b.mean_rmse
        assert a.median_rmse == b.median_rmse
        assert a.tail_mean_rmse == b.tail_mean_rmse

    def test_order_invariance(self, rng):
        tasks = [make_task(rng=rng) for _ in range(7)]
        resid = [3.0, 1.0, 4.0, 1.5, 9.0, 2.0, 6.0]
        a = evaluate_batch(residual_model(resid), tasks, 0.4)
        perm = [4, 0, 6, 2, 5, 3, 1]
        b = evaluate_batch(
            residual_model([resid[i] for i in perm]), [tasks[i] for i in perm], 0.4
        )
        assert a.mean_rmse == b.mean_rmse
        assert a.median_rmse == b.median_rmse
        assert a.tail_mean_rmse == b.tail_mean_rmse
        np.testing.assert_array_equal(a.histogram.counts, b.histogram.counts)

    def test_histogram_conservation_and_empty_bins(self, rng):
        tasks = [make_task(rng=rng) for _ in range(6)]
        report = evaluate_batch(
            residual_model([0.1, 0.1, 0.1, 0.1, 0.1, 10.0]), tasks, 0.5, n_bins=10
        )
        assert report.histogram.counts.sum() == 6
        assert (report.histogram.counts == 0).any()

    def test_tail_dominates_mean(self, rng):
        tasks = [make_task(rng=rng) for _ in range(9)]
        report = evaluate_batch(residual_model(list(range(1, 10))), tasks, 0.3)
        assert report.tail_mean_rmse >= report.mean_rmse


class TestIterativeInference:
    def test_chunk_arithmetic_330_30_100(self):
        calls = {"n": 0}

        def counting_echo(tasks):
            calls["n"] += 1
            return echo_model(tasks)

        long_u = np.random.default_rng(0).standard_normal(330)
        ctx = np.zeros(10)
        out = iterative_inference(counting_echo, ctx, ctx, long_u, np.zeros(30), chunk=100)
        assert calls["n"] == 3
        assert len(out) == 300
        np.testing.assert_array_equal(out, long_u[30:])

    def test_single_pass_when_chunk_covers_everything(self):
        long_u = np.arange(50, dtype=float)
        out = iterative_inference(echo_model, np.zeros(4), np.zeros(4), long_u,
                                  np.zeros(10), chunk=40)
        np.testing.assert_array_equal(out, long_u[10:])

    def test_insufficient_length_rejected(self):
        with pytest.raises(ValueError, match="c \\+ chunk"):
            iterative_inference(echo_model, np.zeros(4), np.zeros(4),
                                np.zeros(20), np.zeros(10), chunk=15)

    @given(
        total=st.integers(5, 400),
        c=st.integers(1, 40),
        chunk=st.integers(1, 120),
    )
    def test_echo_property_random_shapes(self, total, c, chunk):
        if total < c + chunk:
            return
        long_u = np.random.default_rng(total).standard_normal(total)
        out = iterative_inference(echo_model, np.zeros(3), np.zeros(3),
                                  long_u, np.zeros(c), chunk=chunk)
        assert len(out) == total - c
        np.testing.assert_array_equal(out, long_u[c:])

    def test_initial_conditions_feed_forward(self):
        # A model that predicts the mean of its initial conditions: checks that
        # chunk k+1 sees chunk k's predictions, not the true outputs.
        def ic_mean_model(tasks):
            outs = []
            for t in tasks:
                level = float(t.query_y[: t.init_len].mean())
                outs.append(
                    PredictiveOutput(
                        mu=np.full(len(t.query_u) - t.init_len, level + 1.0),
                        sigma=np.ones(len(t.query_u) - t.init_len),
                    )
                )
            return outs

        out = iterative_inference(ic_mean_model, np.zeros(3), np.zeros(3),
                                  np.zeros(30), np.zeros(10), chunk=10)
        np.testing.assert_allclose(out, np.repeat([1.0, 2.0], 10))


class TestRunBenchmark:
    def test_context_count_rule(self):
        rng = np.random.default_rng(1)
        train = BenchmarkSeries(u=rng.standard_normal(1000), y=rng.standard_normal(1000), name="train")
        test = BenchmarkSeries(u=rng.standard_normal(150), y=rng.standard_normal(150), name="t")
        report = run_benchmark(echo_model, train, [test], m=400, c=30, chunk=100)
        assert report.series[0].n_contexts == 2

    def test_echo_stub_rmse_computable_directly(self):
        rng = np.random.default_rng(2)
        train = BenchmarkSeries(u=rng.standard_normal(200), y=rng.standard_normal(200), name="train")
        test = BenchmarkSeries(u=rng.standard_normal(80), y=rng.standard_normal(80), name="t")
        report = run_benchmark(echo_model, train, [test], m=100, c=10, chunk=30)
        expected = float(np.sqrt(np.mean((test.u[10:] - test.y[10:]) ** 2)))
        assert report.series[0].rmse == pytest.approx(expected, rel=1e-12)
        assert len(report.series[0].per_step_rmse) == 70

    def test_single_context_single_chunk_equals_one_pass(self):
        rng = np.random.default_rng(3)
        train = BenchmarkSeries(u=rng.standard_normal(100), y=rng.standard_normal(100), name="train")
        test = BenchmarkSeries(u=rng.standard_normal(40), y=rng.standard_normal(40), name="t")
        report = run_benchmark(echo_model, train, [test], m=100, c=5, chunk=35)
        direct = iterative_inference(echo_model, train.u, train.y, test.u, test.y[:5], 35)
        expected = float(np.sqrt(np.mean((direct - test.y[5:]) ** 2)))
        assert report.series[0].rmse == pytest.approx(expected, rel=1e-12)

    def test_short_training_record_rejected(self):
        train = BenchmarkSeries(u=np.zeros(50), y=np.zeros(50), name="train")
        test = BenchmarkSeries(u=np.zeros(40), y=np.zeros(40), name="t")
        with pytest.raises(ValueError, match="context"):
            run_benchmark(echo_model, train, [test], m=100, c=5, chunk=10)


class TestCsvLoader:
    def test_with_header(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("u,y\n1.0,2.0\n3.0,4.0\n")
        series = load_two_column_csv(path, "u", "y")
        np.testing.assert_array_equal(series.u, [1.0, 3.0])
        np.testing.assert_array_equal(series.y, [2.0, 4.0])
        assert series.sample_count == 2
        assert series.name == "data"

    def test_headerless_by_index(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("1.0,2.0\n3.0,4.0\n")
        series = load_two_column_csv(path, 0, 1)
        np.testing.assert_array_equal(series.u, [1.0, 3.0])

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("u,y\n1.0,2.0\n3.0,oops\n4.0,5.0\n")
        with pytest.raises(CsvFormatError, match="line 3"):
            load_two_column_csv(path, "u", "y")

    def test_missing_column(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("a,b\n1.0,2.0\n")
        with pytest.raises(CsvFormatError, match="missing input column"):
            load_two_column_csv(path, "u", "b")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(CsvFormatError, match="no data"):
            load_two_column_csv(path)

    def test_short_row_names_line(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("1.0,2.0\n3.0\n")
        with pytest.raises(CsvFormatError, match="line 2"):
            load_two_column_csv(path)


class TestEmitReport:
    def make_report(self, rng, n=3):
        tasks = [make_task(rng=rng) for _ in range(n)]
        return evaluate_batch(residual_model(list(range(1, n + 1))), tasks, 0.5, n_bins=8)

    def test_file_layout(self, tmp_path, rng):
        report = self.make_report(rng)
        paths = evaluation.emit_report(report, tmp_path)
        per_task = (tmp_path / "per_task.csv").read_text()
        lines = per_task.splitlines()
        assert lines[0] == "task_id,rmse"
        assert len(lines) == 4
        hist_lines = (tmp_path / "histogram.csv").read_text().splitlines()
        assert hist_lines[0] == "bin_left,bin_right,count"
        assert len(hist_lines) == 9
        assert any(line.endswith(",0") for line in hist_lines[1:])
        assert (tmp_path / "histogram.svg").read_text().startswith("<svg")
        assert "report" in paths

    def test_rerun_is_byte_identical(self, tmp_path, rng):
        report = self.make_report(rng)
        evaluation.emit_report(report, tmp_path)
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        evaluation.emit_report(report, tmp_path)
        second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        assert first == second
