"""Report shapes, tx-count grouping, the shared-split checksum, and small
end-to-end benchmark / curve / grid runs."""
from __future__ import annotations

import json

import numpy as np
import pytest

from seqscore.data import build_vocabularies, derive_and_encode, out_of_time_split
from seqscore.evaluation import (
    EvaluationReport,
    ReportRow,
    auc_by_tx_count,
    benchmark_compare,
    learning_curve,
    loss_grid,
    lr_grid,
    split_checksum,
)
from seqscore.metrics import roc_auc
from seqscore.model import ModelConfig
from seqscore.synth import GenConfig, generate_dataset
from seqscore.training import TrainConfig

from conftest import make_history


@pytest.fixture(scope="module")
def synth_split():
    cfg = GenConfig(n_clients=900, base_default_rate=0.15, signal_strength=1.5,
                    tx_count_min=5, tx_count_max=60, seed=21)
    clients, _ = generate_dataset(cfg)
    train, valid = out_of_time_split(clients, cfg.boundary_for(16))
    schema = build_vocabularies(train, max_sequence_length=64)
    return clients, train, valid, schema


def small_model_config(schema):
    return ModelConfig(schema=schema, hidden_size=6, seed=4)


def small_train_config(**kw):
    defaults = dict(epochs=2, batch_size_train=16, base_lr=0.02, seed=9)
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

def test_report_csv_and_text(tmp_path):
    report = EvaluationReport("demo", [
        ReportRow("model_a", 0.8123, 0.002, {"n_features": 12}),
        ReportRow("missing", None, None, {"note": "not implemented"}),
    ])
    path = tmp_path / "r.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "label,auc,std,metadata"
    assert len(lines) == 3
    assert json.loads(lines[1].split(",", 3)[3].replace('""', '"').strip('"')) == {"n_features": 12}
    text = report.to_text()
    assert "model_a" in text and "0.8123" in text
    assert "not implemented" in text


def test_figure_data_skips_rows_without_x(tmp_path):
    report = EvaluationReport("fig", [
        ReportRow("a", 0.7, 0.01, {"x": 10}),
        ReportRow("b", None, None, {"x": 20, "note": "skipped"}),
        ReportRow("c", 0.8, None, {}),
    ])
    path = tmp_path / "fig.csv"
    report.write_figure_data(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y,std"
    assert len(lines) == 2  # only row "a" qualifies


# ---------------------------------------------------------------------------
# tx-count grouping
# ---------------------------------------------------------------------------

def test_single_bucket_covering_all_equals_overall_auc():
    rng = np.random.default_rng(0)
    scores = rng.random(300)
    labels = rng.integers(0, 2, 300)
    labels[:2] = [0, 1]
    counts = rng.integers(1, 500, 300)
    report = auc_by_tx_count(scores, labels, counts, thresholds=[1])
    assert report.rows[0].auc == pytest.approx(roc_auc(scores, labels))
    assert report.rows[0].metadata["n_clients"] == 300


def test_threshold_above_max_count_is_skipped():
    scores = np.array([0.2, 0.8, 0.5])
    labels = np.array([0, 1, 0])
    counts = np.array([5, 10, 20])
    report = auc_by_tx_count(scores, labels, counts, thresholds=[50])
    assert report.rows[0].auc is None
    assert "skipped" in report.rows[0].metadata["note"]


def test_single_class_group_skipped_with_note():
    scores = np.array([0.2, 0.8, 0.5, 0.9])
    labels = np.array([0, 0, 1, 1])
    counts = np.array([5, 5, 100, 100])
    report = auc_by_tx_count(scores, labels, counts, thresholds=[1, 50])
    assert report.rows[0].auc is not None
    assert report.rows[1].auc is None  # only positives above 50
    assert "single class" in report.rows[1].metadata["note"]


def test_disjoint_buckets_partition_clients():
    rng = np.random.default_rng(1)
    scores = rng.random(400)
    labels = rng.integers(0, 2, 400)
    labels[:2] = [0, 1]
    counts = rng.integers(1, 300, 400)
    report = auc_by_tx_count(scores, labels, counts, bucket_edges=[1, 50, 150])
    total = sum(r.metadata["n_clients"] for r in report.rows)
    assert total == 400


# ---------------------------------------------------------------------------
# split checksum
# ---------------------------------------------------------------------------

def test_split_checksum_order_invariant_and_sensitive():
    a = [make_history(f"a{i}") for i in range(4)]
    b = [make_history(f"b{i}") for i in range(3)]
    c1 = split_checksum(a, b)
    c2 = split_checksum(list(reversed(a)), list(reversed(b)))
    assert c1 == c2
    # moving one client across the split changes the fingerprint
    c3 = split_checksum(a[:-1], b + [a[-1]])
    assert c3 != c1


# ---------------------------------------------------------------------------
# harnesses on a small synthetic split
# ---------------------------------------------------------------------------

def test_benchmark_compare_shape_and_reuse(synth_split):
    _, train, valid, schema = synth_split
    result = benchmark_compare(train, valid, schema, small_model_config(schema),
                               small_train_config(), n_ensemble=2, base_seed=3)
    labels = [r.label for r in result.report.rows]
    assert labels == ["logistic_regression", "gbm", "rnn_ensemble"]
    gbm = result.report.rows[1]
    assert gbm.auc is None and gbm.metadata["note"] == "not implemented"
    rnn = result.report.rows[2]
    assert rnn.metadata["n_features"] == 12
    assert len(result.member_aucs) == 2
    assert len(result.rnn_scores) == len(valid)
    assert result.valid_tx_counts.shape == (len(valid),)
    assert 0.0 <= result.baseline_auc <= 1.0
    assert 0.0 <= result.ensemble_auc <= 1.0


def test_learning_curve_rows_and_duplicate_sizes(synth_split):
    _, train, valid, schema = synth_split
    report = learning_curve(train, valid, schema, small_model_config(schema),
                            small_train_config(epochs=1), sizes=[200, 200],
                            repeats=1, base_seed=5)
    assert len(report.rows) == 4  # 2 models x 2 size entries
    # duplicate size entries share the (size, repeat)-keyed subsample
    assert report.rows[0].auc == report.rows[2].auc
    assert report.rows[1].auc == report.rows[3].auc


def test_learning_curve_skips_sizes_without_positives(synth_split):
    _, train, valid, schema = synth_split
    report = learning_curve(train, valid, schema, small_model_config(schema),
                            small_train_config(epochs=1), sizes=[3],
                            repeats=1, base_seed=6)
    assert any(r.auc is None and "skipped" in r.metadata.get("note", "") for r in report.rows) or \
        all(r.auc is not None for r in report.rows)


def test_loss_grid_completes_with_expected_rows(synth_split):
    _, train, valid, schema = synth_split
    seqs = [derive_and_encode(c, schema) for c in valid]
    labels = np.array([c.label for c in valid])
    report = loss_grid(train, schema, seqs, labels, small_model_config(schema),
                       small_train_config(epochs=1), base_seed=2)
    assert [r.label for r in report.rows] == [
        "bce", "hinge_0.5", "hinge_0.1", "hinge_0.01", "hinge_0.01_plus_bce"]
    for row in report.rows:
        assert row.auc is not None and np.isfinite(row.auc)


def test_lr_grid_completes_nine_cells(synth_split):
    _, train, valid, schema = synth_split
    seqs = [derive_and_encode(c, schema) for c in valid]
    labels = np.array([c.label for c in valid])
    report = lr_grid(train, schema, seqs, labels, small_model_config(schema),
                     small_train_config(epochs=3), gammas=(1.0, 0.5), cycles=(1, 3),
                     base_seed=2)
    assert len(report.rows) == 4
    for row in report.rows:
        assert row.auc is not None and np.isfinite(row.auc)
