"""Experiment harnesses: benchmark table, learning curve, transaction-count
analysis, and the loss/schedule grids, all reported through a common
EvaluationReport shape.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline import FeatureRegistry, fit_aggregate_baseline
from .data import ClientHistory, SchemaSpec, build_negative_pool, derive_and_encode, rng_from
from .metrics import SingleClassError, roc_auc
from .model import ModelConfig
from .training import TrainConfig, ensemble_predict, train_ensemble, train_model


@dataclass
class ReportRow:
    label: str
    auc: float | None
    std: float | None = None
    metadata: dict = field(default_factory=dict)


@dataclass
class EvaluationReport:
    title: str
    rows: list[ReportRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "auc", "std", "metadata"])
            for r in self.rows:
                writer.writerow([
                    r.label,
                    "" if r.auc is None else repr(r.auc),
                    "" if r.std is None else repr(r.std),
                    json.dumps(r.metadata, sort_keys=True),
                ])

    def to_text(self) -> str:
        label_w = max([len(r.label) for r in self.rows] + [len(self.title), 5])
        lines = [self.title, "-" * (label_w + 24)]
        for r in self.rows:
            auc = "   --  " if r.auc is None else f"{r.auc:.4f}"
            std = "" if r.std is None else f" ({r.std:.4f})"
            extra = ""
            if "n_features" in r.metadata:
                extra = f"  n_features={r.metadata['n_features']}"
            if "note" in r.metadata:
                extra += f"  [{r.metadata['note']}]"
            lines.append(f"{r.label:<{label_w}}  {auc}{std}{extra}")
        return "\n".join(lines)

    def write_figure_data(self, path, x_key: str = "x") -> None:
        """Plain (x, y, std) columns for external plotting."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "std"])
            for r in self.rows:
                if x_key not in r.metadata or r.auc is None:
                    continue
                writer.writerow([r.metadata[x_key], repr(r.auc),
                                 "" if r.std is None else repr(r.std)])


def split_checksum(train: list[ClientHistory], valid: list[ClientHistory]) -> str:
    """Fingerprint of the split membership a model path consumed."""
    digest = hashlib.sha256()
    for cid in sorted(c.client_id for c in train):
        digest.update(cid.encode("utf-8") + b"\x00")
    digest.update(b"|")
    for cid in sorted(c.client_id for c in valid):
        digest.update(cid.encode("utf-8") + b"\x00")
    return digest.hexdigest()


@dataclass
class BenchmarkResult:
    report: EvaluationReport
    baseline_auc: float
    ensemble_auc: float
    member_aucs: list[float]
    baseline_scores: np.ndarray
    rnn_scores: np.ndarray
    valid_labels: np.ndarray
    valid_tx_counts: np.ndarray
    models: list


def benchmark_compare(
    train: list[ClientHistory],
    valid: list[ClientHistory],
    schema: SchemaSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_ensemble: int = 6,
    base_seed: int = 0,
    registry: FeatureRegistry | None = None,
    negative_ratio: int = 10,
    encode_cache: dict | None = None,
    valid_auc_sample: int | None = 1500,
) -> BenchmarkResult:
    """Train the aggregate baseline and the sequence-model ensemble on one
    shared split, evaluate both on the identical validation set.

    The per-epoch history AUC may be tracked on a validation subsample
    (valid_auc_sample) to save time; reported AUCs always use the full set.
    """
    registry = registry or FeatureRegistry.from_dataset(train)
    baseline_split = split_checksum(train, valid)

    baseline = fit_aggregate_baseline(train, registry)
    baseline_scores = baseline.score(valid)
    valid_labels = np.array([c.label for c in valid])
    baseline_auc = roc_auc(baseline_scores, valid_labels)

    rnn_split = split_checksum(train, valid)
    if rnn_split != baseline_split:
        raise RuntimeError("benchmark_compare: model paths consumed different splits")
    cache = encode_cache if encode_cache is not None else {}
    valid_seqs = [derive_and_encode(c, schema) for c in valid]
    if valid_auc_sample is not None and valid_auc_sample < len(valid):
        pick = rng_from(base_seed, 0xA0C).choice(len(valid), valid_auc_sample, replace=False)
        track_seqs = [valid_seqs[i] for i in pick]
        track_labels = valid_labels[pick]
    else:
        track_seqs, track_labels = valid_seqs, valid_labels
    results = train_ensemble(train, schema, track_seqs, track_labels, model_config,
                             train_config, n=n_ensemble, base_seed=base_seed,
                             negative_ratio=negative_ratio, encode_cache=cache)
    models = [r.params for r in results]
    rnn_scores = ensemble_predict(models, valid_seqs, model_config,
                                  train_config.batch_size_valid)
    ensemble_auc = roc_auc(rnn_scores, valid_labels)
    member_aucs = [
        roc_auc(_member_scores(m, valid_seqs, model_config, train_config), valid_labels)
        for m in models
    ]

    n_raw = len(schema.fields) + len(schema.scalar_features)
    report = EvaluationReport("benchmark", [
        ReportRow("logistic_regression", baseline_auc,
                  metadata={"n_features": baseline.n_features}),
        ReportRow("gbm", None, metadata={"note": "not implemented"}),
        ReportRow("rnn_ensemble", ensemble_auc, std=float(np.std(member_aucs)),
                  metadata={"n_features": n_raw, "n_members": n_ensemble}),
    ])
    tx_counts = np.array([c.n_transactions for c in valid])
    return BenchmarkResult(report, baseline_auc, ensemble_auc, member_aucs,
                           baseline_scores, rnn_scores, valid_labels, tx_counts, models)


def _member_scores(params, seqs, config, train_config):
    from .model import score_sequences
    return score_sequences(params, seqs, config, train_config.batch_size_valid)


def learning_curve(
    train: list[ClientHistory],
    valid: list[ClientHistory],
    schema: SchemaSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    sizes: list[int],
    repeats: int = 3,
    base_seed: int = 0,
    registry: FeatureRegistry | None = None,
    negative_ratio: int = 10,
    encode_cache: dict | None = None,
) -> EvaluationReport:
    """Validation AUC of the baseline and a single sequence model as a
    function of the number of training applications."""
    registry = registry or FeatureRegistry.from_dataset(train)
    cache = encode_cache if encode_cache is not None else {}
    valid_seqs = [derive_and_encode(c, schema) for c in valid]
    valid_labels = np.array([c.label for c in valid])
    report = EvaluationReport("learning_curve")
    for size in sizes:
        size = min(size, len(train))
        base_aucs, rnn_aucs = [], []
        for rep in range(repeats):
            rng = rng_from(base_seed, 0x1C, size, rep)
            subset = [train[i] for i in rng.choice(len(train), size, replace=False)]
            if not any(c.label == 1 for c in subset) or not any(c.label == 0 for c in subset):
                continue
            baseline = fit_aggregate_baseline(subset, registry)
            try:
                base_aucs.append(roc_auc(baseline.score(valid), valid_labels))
            except SingleClassError:
                continue
            pool = build_negative_pool(subset, ratio=negative_ratio,
                                       seed=int(rng.integers(2**32)))
            m_cfg = replace(model_config, seed=int(rng.integers(2**32)))
            t_cfg = replace(train_config, seed=int(rng.integers(2**32)))
            result = train_model(pool, schema, valid_seqs, valid_labels, m_cfg, t_cfg,
                                 encode_cache=cache)
            rnn_aucs.append(result.history.epochs[-1].valid_auc if result.history.epochs
                            else float("nan"))
        for label, aucs in (("logistic_regression", base_aucs), ("rnn_single", rnn_aucs)):
            if aucs:
                report.rows.append(ReportRow(label, float(np.mean(aucs)),
                                             float(np.std(aucs)),
                                             {"x": size, "n_repeats": len(aucs)}))
            else:
                report.rows.append(ReportRow(label, None, None,
                                             {"x": size, "note": "skipped: no viable subsample"}))
    return report


def auc_by_tx_count(
    scores,
    labels,
    tx_counts,
    thresholds: list[int] | None = None,
    bucket_edges: list[int] | None = None,
) -> EvaluationReport:
    """AUC per client group, grouped by raw transaction count.

    Two modes: cumulative (clients with count >= t) and disjoint buckets
    [edge_i, edge_{i+1}). Groups with a single class are reported as skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tx_counts = np.asarray(tx_counts)
    report = EvaluationReport("auc_by_tx_count")

    def add_row(label, mask, x):
        meta = {"x": x, "n_clients": int(mask.sum())}
        if not mask.any():
            report.rows.append(ReportRow(label, None, None, {**meta, "note": "skipped: empty"}))
            return
        try:
            report.rows.append(ReportRow(label, roc_auc(scores[mask], labels[mask]), None, meta))
        except SingleClassError:
            report.rows.append(ReportRow(label, None, None,
                                         {**meta, "note": "skipped: single class"}))

    for t in thresholds or []:
        add_row(f"count>={t}", tx_counts >= t, t)
    edges = list(bucket_edges or [])
    for lo, hi in zip(edges, edges[1:]):
        add_row(f"count[{lo},{hi})", (tx_counts >= lo) & (tx_counts < hi), lo)
    if edges:
        add_row(f"count>={edges[-1]}", tx_counts >= edges[-1], edges[-1])
    return report


def loss_grid(
    train: list[ClientHistory],
    schema: SchemaSpec,
    valid_seqs,
    valid_labels,
    model_config: ModelConfig,
    train_config: TrainConfig,
    margins: tuple[float, ...] = (0.5, 0.1, 0.01),
    base_seed: int = 0,
    negative_ratio: int = 10,
    encode_cache: dict | None = None,
) -> EvaluationReport:
    """One single-model run per loss variant: BCE, each hinge margin, and
    the combined hinge+BCE row."""
    cache = encode_cache if encode_cache is not None else {}
    pool = build_negative_pool(train, ratio=negative_ratio, seed=base_seed)
    report = EvaluationReport("loss_grid")
    variants = [("bce", {"loss_kind": "bce"})]
    variants += [(f"hinge_{m}", {"loss_kind": "margin_rank", "margin": m}) for m in margins]
    variants.append(("hinge_0.01_plus_bce",
                     {"loss_kind": "margin_rank_plus_bce", "margin": 0.01}))
    for label, overrides in variants:
        t_cfg = replace(train_config, **overrides)
        result = train_model(pool, schema, valid_seqs, valid_labels, model_config, t_cfg,
                             encode_cache=cache)
        auc = result.history.epochs[-1].valid_auc if result.history.epochs else None
        report.rows.append(ReportRow(label, auc, metadata={"loss": label}))
    return report


def lr_grid(
    train: list[ClientHistory],
    schema: SchemaSpec,
    valid_seqs,
    valid_labels,
    model_config: ModelConfig,
    train_config: TrainConfig,
    gammas: tuple[float, ...] = (1.0, 0.8, 0.5),
    cycles: tuple[int, ...] = (1, 2, 3),
    base_seed: int = 0,
    negative_ratio: int = 10,
    encode_cache: dict | None = None,
) -> EvaluationReport:
    """One single-model run per (gamma, cycles) schedule cell."""
    cache = encode_cache if encode_cache is not None else {}
    pool = build_negative_pool(train, ratio=negative_ratio, seed=base_seed)
    report = EvaluationReport("lr_grid")
    for gamma in gammas:
        for n_cycles in cycles:
            label = f"gamma_{gamma}_cycles_{n_cycles}"
            meta = {"gamma": gamma, "cycles": n_cycles}
            if n_cycles > train_config.epochs:
                report.rows.append(ReportRow(label, None, None,
                                             {**meta, "note": "skipped: cycles exceed epochs"}))
                continue
            t_cfg = replace(train_config, gamma=gamma, cycles=n_cycles)
            result = train_model(pool, schema, valid_seqs, valid_labels, model_config, t_cfg,
                                 encode_cache=cache)
            auc = result.history.epochs[-1].valid_auc if result.history.epochs else None
            report.rows.append(ReportRow(label, auc, metadata=meta))
    return report
