import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tdvcl.evalreport import (CSV_COLUMNS, AccuracyMatrix, accuracy, aggregate, avg_accuracy,
                              emit_report, predictive, read_csv, table_rows, write_csv)
from tdvcl.network import forward, n_params
from tdvcl.numcore import ContractError, SeededRng, Tensor
from tdvcl.tasks import TaskDataset
from tdvcl.vardist import MeanFieldGaussian, inverse_softplus

SPEC = (5, 7, 4)


def posterior(rng, std):
    P = n_params(SPEC)
    return MeanFieldGaussian(rng.normal(size=P), np.full(P, inverse_softplus(std)), SPEC)


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestPredictive:
    def test_zero_variance_limit(self):
        rng = np.random.default_rng(0)
        q = posterior(rng, 1e-9)
        x = rng.uniform(size=(6, 5))
        expected = softmax(forward(Tensor(q.mu), SPEC, x).value)
        np.testing.assert_allclose(predictive(q, x, 10, SeededRng(1)), expected, atol=1e-7)
        np.testing.assert_allclose(predictive(q, x, 1, SeededRng(1), deterministic=True), expected,
                                   atol=1e-15)

    def test_vector_input(self):
        q = posterior(np.random.default_rng(1), 0.1)
        p = predictive(q, np.ones(5), 7, SeededRng(0))
        assert p.shape == (4,)

    def test_monte_carlo_converges(self):
        rng = np.random.default_rng(2)
        q = posterior(rng, 0.3)
        x = rng.uniform(size=(3, 5))
        ref = predictive(q, x, 20000, SeededRng(10))
        err_small = np.abs(predictive(q, x, 20, SeededRng(11)) - ref).max()
        err_large = np.abs(predictive(q, x, 2000, SeededRng(12)) - ref).max()
        assert err_large < err_small and err_large < 0.02

    @given(st.integers(0, 2 ** 31), st.floats(1e-3, 2.0), st.integers(1, 30))
    def test_on_simplex(self, seed, std, S):
        rng = np.random.default_rng(seed)
        q = posterior(rng, std)
        p = predictive(q, rng.uniform(size=(4, 5)), S, SeededRng(seed))
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_heads_restrict_classes(self):
        q = posterior(np.random.default_rng(3), 0.1)
        p = predictive(q, np.ones((2, 5)), 4, SeededRng(0), head=(1, 2))
        assert p.shape == (2, 2)

    def test_zero_samples(self):
        with pytest.raises(ContractError):
            predictive(posterior(np.random.default_rng(0), 0.1), np.ones(5), 0, SeededRng(0))

    def test_accuracy_in_unit_interval(self):
        rng = np.random.default_rng(4)
        q = posterior(rng, 0.1)
        data = TaskDataset(rng.uniform(size=(20, 5)), rng.integers(0, 4, 20), 1, 4)
        assert 0.0 <= accuracy(q, data, 5, SeededRng(0)) <= 1.0


def matrix(rows, seed=0, method="VCL"):
    m = AccuracyMatrix(seed=seed, method=method)
    for r in rows:
        m.append_row(r)
    return m


def random_matrix(rng, T, seed, method):
    return matrix([rng.uniform(size=t).tolist() for t in range(1, T + 1)], seed, method)


class TestAvgAccuracy:
    def test_examples(self):
        m = matrix([[0.5], [0.9, 0.7]])
        assert avg_accuracy(m, 2) == pytest.approx(0.8)
        assert avg_accuracy(matrix([[1.0], [1.0, 1.0]]), 2) == 1.0

    def test_incomplete_row(self):
        m = matrix([[0.5]])
        with pytest.raises(ContractError):
            avg_accuracy(m, 2)
        with pytest.raises(ContractError):
            m.append_row([0.1])

    def test_out_of_range_entry(self):
        with pytest.raises(ContractError):
            matrix([[1.5]])


class TestReport:
    def test_row_count(self, tmp_path):
        m = random_matrix(np.random.default_rng(0), 6, 0, "VCL")
        emit_report([m], tmp_path)
        with open(tmp_path / "runs.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) - 1 == sum(range(1, 7))

    def test_aggregate_recomputation(self, tmp_path):
        rng = np.random.default_rng(1)
        ms = [random_matrix(rng, 4, s, "TDLambda") for s in range(10)]
        emit_report(ms, tmp_path, plots=False)
        doc = json.loads((tmp_path / "aggregate.json").read_text())
        assert doc["schema"] == 1
        by_t = {}
        with open(tmp_path / "runs.csv") as fh:
            for rec in csv.DictReader(fh):
                by_t.setdefault((int(rec["t"]), rec["run_id"]), []).append(float(rec["accuracy"]))
        for row in doc["rows"]:
            per_seed = [np.mean(v) for (t, _), v in by_t.items() if t == row["t"]]
            assert row["n_seeds"] == 10
            assert row["mean"] == pytest.approx(np.mean(per_seed), abs=1e-12)
            assert row["two_sigma"] == pytest.approx(2 * np.std(per_seed), abs=1e-12)

    def test_csv_round_trip_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        ms = [random_matrix(rng, 5, s, meth) for s in range(3) for meth in ("VCL", "NStepKL")]
        for i, m in enumerate(ms):
            m.run_id = f"run{i}"
        back = read_csv(write_csv(ms, tmp_path / "runs.csv"))
        assert [m.rows for m in back] == [m.rows for m in ms]
        assert [(m.seed, m.method) for m in back] == [(m.seed, m.method) for m in ms]

    def test_svg_files(self, tmp_path):
        paths = emit_report([random_matrix(np.random.default_rng(3), 3, 0, "VCL")], tmp_path)
        for key in ("avg_svg", "task_1_svg", "task_3_svg"):
            text = paths[key].read_text()
            assert text.startswith("<svg") and text.endswith("</svg>")

    def test_table_rows(self):
        agg = aggregate([matrix([[0.5], [0.9, 0.7]])])
        lines = table_rows(agg)
        assert "t=2" in lines[0] and "0.80±0.00" in lines[1]

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_report([matrix([[0.5]])], blocker / "sub")

    def test_empty_input(self, tmp_path):
        with pytest.raises(ContractError):
            emit_report([], tmp_path)
