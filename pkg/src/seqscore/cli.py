"""Command-line pipeline: generate | train | evaluate | score.

Every command echoes its fully resolved configuration into the output
directory; identical (config, seed, input files) reproduce identical outputs
(timing aside). Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .artifact import ArtifactError, ModelArtifact, load_model, save_model
from .baseline import fit_aggregate_baseline
from .config import RunConfig, UsageError, load_config
from .data import (
    DataError,
    build_vocabularies,
    derive_and_encode,
    ingest_csv,
    out_of_time_split,
    rng_from,
    write_dataset_csv,
)
from .evaluation import (
    EvaluationReport,
    ReportRow,
    auc_by_tx_count,
    learning_curve,
    loss_grid,
    lr_grid,
)
from .metrics import SingleClassError, roc_auc
from .model import ModelConfig
from .synth import GenConfig, generate_dataset, write_ground_truth_csv
from .training import (
    NumericFailure,
    TrainConfig,
    ensemble_predict,
    member_seeds,
    train_ensemble,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqscore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (("generate", "write a synthetic dataset CSV + ground-truth sidecar"),
                       ("train", "train the scoring ensemble and save model artifacts"),
                       ("evaluate", "run evaluation experiments against saved artifacts"),
                       ("score", "score a transaction CSV with saved artifacts")):
        cmd = sub.add_parser(name, help=desc)
        cmd.add_argument("--config", type=Path, default=None, help="flat key = value file")
        cmd.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override one config key (repeatable)")
        cmd.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="override the global seed")
        if name == "score":
            cmd.add_argument("input", type=Path, help="transaction CSV to score")
            cmd.add_argument("--timing-grid", action="store_true",
                             help="also time scoring at 1k/2k/4k clients")
    return parser


class _OutputDir:
    """Exclusive output directory (lock file guards concurrent writers)."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = path / ".lock"

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"{self.path}: already in use (stale {self.lock.name}?)") from None
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock)
        except FileNotFoundError:
            pass
        return False


def _gen_config(cfg: RunConfig) -> GenConfig:
    return GenConfig(
        n_clients=cfg["gen.n_clients"],
        months_span=cfg["gen.months_span"],
        base_default_rate=cfg["gen.base_default_rate"],
        signal_mode=cfg["gen.signal_mode"],
        signal_strength=cfg["gen.signal_strength"],
        tx_count_min=cfg["gen.tx_count_min"],
        tx_count_max=cfg["gen.tx_count_max"],
        tx_count_shape=cfg["gen.tx_count_shape"],
        vocab_sizes={
            "currency": cfg["gen.vocab_currency"],
            "country": cfg["gen.vocab_country"],
            "merchant_type": cfg["gen.vocab_merchant_type"],
            "card_type": cfg["gen.vocab_card_type"],
            "issuing_branch": cfg["gen.vocab_issuing_branch"],
        },
        seed=cfg["seed"],
        start_date=cfg["gen.start_date"],
        window_days=cfg["gen.window_days"],
        risky_merchant_count=cfg["gen.risky_merchant_count"],
        risky_rate=cfg["gen.risky_rate"],
        placement_sharpness=cfg["gen.placement_sharpness"],
        trend_sharpness=cfg["gen.trend_sharpness"],
        history_days_min=cfg["gen.history_days_min"],
        history_days_max=cfg["gen.history_days_max"],
    )


def _model_config(cfg: RunConfig, schema) -> ModelConfig:
    return ModelConfig(schema=schema, encoder_kind=cfg["model.encoder"],
                       bidirectional=cfg["model.bidirectional"],
                       hidden_size=cfg["model.hidden_size"], seed=cfg["seed"])


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        loss_kind=cfg["train.loss"], margin=cfg["train.margin"],
        bce_weight=cfg["train.bce_weight"], base_lr=cfg["train.base_lr"],
        gamma=cfg["train.gamma"], cycles=cfg["train.cycles"], epochs=cfg["train.epochs"],
        batch_size_train=cfg["train.batch_size"],
        batch_size_valid=cfg["train.batch_size_valid"],
        reg=cfg["train.reg"], reg_p=cfg["train.reg_p"], seed=cfg["seed"],
    )


def _echo_config(cfg: RunConfig, out: Path) -> str:
    text = cfg.resolved_text()
    (out / "config_used.txt").write_text(text, encoding="utf-8")
    return text


def _load_split(cfg: RunConfig):
    dataset_path = Path(cfg["data.dataset"])
    if not dataset_path.exists():
        raise DataError(f"dataset not found: {dataset_path}")
    clients = ingest_csv(dataset_path)
    boundary = cfg["data.boundary"]
    if boundary is None:
        raise UsageError("data.boundary is required (generate echoes a suitable one)")
    train, valid = out_of_time_split(clients, boundary)
    if not train or not valid:
        raise DataError(
            f"out-of-time split at {boundary.isoformat()} leaves an empty side "
            f"(train={len(train)}, valid={len(valid)})"
        )
    return clients, train, valid, dataset_path


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_artifacts(cfg: RunConfig, out: Path) -> list[ModelArtifact]:
    art_dir = Path(cfg["eval.artifacts"]) if cfg["eval.artifacts"] else out
    paths = sorted(art_dir.glob("model_*.bin"))
    if not paths:
        raise DataError(f"no model_*.bin artifacts under {art_dir}")
    artifacts = [load_model(p) for p in paths]

    def architecture(art):
        # member seeds legitimately differ; everything else must agree
        return (art.config.encoder_kind, art.config.bidirectional,
                art.config.hidden_size, art.schema.to_json())

    first = artifacts[0]
    for art, path in zip(artifacts[1:], paths[1:]):
        if architecture(art) != architecture(first):
            raise ArtifactError(f"{path}: artifact config/schema differs from {paths[0]}")
    return artifacts


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    gen_cfg = _gen_config(cfg)
    clients, truth = generate_dataset(gen_cfg)
    dataset_path = out / "dataset.csv"
    rows = write_dataset_csv(clients, dataset_path)
    write_ground_truth_csv(truth, out / "ground_truth.csv")
    boundary = cfg["data.boundary"] or gen_cfg.boundary_for(round(gen_cfg.months_span * 0.8))
    cfg.values["data.boundary"] = boundary
    cfg.values["data.dataset"] = str(dataset_path)
    _echo_config(cfg, out)
    rate = float(truth.labels.mean())
    print(f"wrote {dataset_path} ({rows} transactions, {len(clients)} clients, "
          f"positive rate {rate:.4f})")
    print(f"wrote {out / 'ground_truth.csv'}")
    print(f"suggested out-of-time boundary: {boundary.isoformat()}")
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    clients, train, valid, dataset_path = _load_split(cfg)
    schema = build_vocabularies(
        train,
        include_days_since_issue=cfg["data.include_days_since_issue"],
        max_sequence_length=cfg["data.max_sequence_length"],
    )
    (out / "schema.json").write_text(schema.to_json(), encoding="utf-8")
    model_cfg = _model_config(cfg, schema)
    train_cfg = _train_config(cfg)

    valid_labels = np.array([c.label for c in valid])
    valid_seqs = [derive_and_encode(c, schema) for c in valid]
    sample = cfg["train.valid_auc_sample"]
    if sample and sample < len(valid_seqs):
        pick = rng_from(cfg["seed"], 0xA0C).choice(len(valid_seqs), sample, replace=False)
        track_seqs = [valid_seqs[i] for i in pick]
        track_labels = valid_labels[pick]
    else:
        track_seqs, track_labels = valid_seqs, valid_labels

    config_text = _echo_config(cfg, out)
    provenance_base = {
        "config_hash": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "seed": cfg["seed"],
        "data_fingerprint": _file_sha256(dataset_path),
        "boundary": cfg["data.boundary"].isoformat(),
    }
    results = train_ensemble(train, schema, track_seqs, track_labels, model_cfg, train_cfg,
                             n=cfg["train.n_ensemble"], base_seed=cfg["seed"],
                             negative_ratio=cfg["data.negative_ratio"])
    for member, result in enumerate(results):
        _, model_seed, _ = member_seeds(cfg["seed"], member)
        art = ModelArtifact(replace(model_cfg, seed=model_seed), result.params,
                            {**provenance_base, "member": member})
        save_model(art, out / f"model_{member:02d}.bin")
        result.history.to_csv(out / f"history_{member:02d}.csv")
        if result.history.epochs:
            last = result.history.epochs[-1]
            print(f"member {member}: final valid AUC {last.valid_auc:.4f} "
                  f"(loss {last.train_loss:.4f})")
        else:
            print(f"member {member}: initialized only (0 epochs)")
    print(f"wrote {len(results)} artifacts to {out}")
    return 0


def _score_artifacts(artifacts: list[ModelArtifact], sequences, batch_size: int) -> np.ndarray:
    models = [a.params for a in artifacts]
    return ensemble_predict(models, sequences, artifacts[0].config, batch_size)


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    experiments = cfg.str_list("eval.experiments")
    known = {"benchmark", "learning_curve", "tx_buckets", "loss_grid", "lr_grid"}
    unknown = [e for e in experiments if e not in known]
    if unknown:
        raise UsageError(f"unknown experiments {unknown}; valid: {sorted(known)}")
    clients, train, valid, _ = _load_split(cfg)
    valid_labels = np.array([c.label for c in valid])
    _echo_config(cfg, out)

    reports: list[EvaluationReport] = []
    need_artifacts = {"benchmark", "tx_buckets"} & set(experiments)
    artifacts = _load_artifacts(cfg, out) if need_artifacts else []
    if artifacts:
        schema = artifacts[0].schema
        valid_seqs = [derive_and_encode(c, schema) for c in valid]
        rnn_scores = _score_artifacts(artifacts, valid_seqs, cfg["train.batch_size_valid"])

    if "benchmark" in experiments:
        baseline = fit_aggregate_baseline(train)
        baseline_auc = roc_auc(baseline.score(valid), valid_labels)
        try:
            rnn_auc = roc_auc(rnn_scores, valid_labels)
        except SingleClassError:
            rnn_auc = None
        schema = artifacts[0].schema
        report = EvaluationReport("benchmark", [
            ReportRow("logistic_regression", baseline_auc,
                      metadata={"n_features": baseline.n_features}),
            ReportRow("gbm", None, metadata={"note": "not implemented"}),
            ReportRow("rnn_ensemble", rnn_auc,
                      metadata={"n_features": len(schema.fields) + len(schema.scalar_features),
                                "n_members": len(artifacts)}),
        ])
        reports.append(report)

    if "tx_buckets" in experiments:
        tx_counts = np.array([c.n_transactions for c in valid])
        report = auc_by_tx_count(rnn_scores, valid_labels, tx_counts,
                                 thresholds=cfg.int_list("eval.tx_thresholds"),
                                 bucket_edges=cfg.int_list("eval.tx_bucket_edges"))
        report.write_figure_data(out / "fig_tx_buckets.csv")
        reports.append(report)

    if "learning_curve" in experiments or "loss_grid" in experiments or "lr_grid" in experiments:
        schema = build_vocabularies(
            train,
            include_days_since_issue=cfg["data.include_days_since_issue"],
            max_sequence_length=cfg["data.max_sequence_length"],
        )
        model_cfg = _model_config(cfg, schema)
        train_cfg = _train_config(cfg)
        cache: dict = {}
        valid_seqs_local = [derive_and_encode(c, schema) for c in valid]
        if "learning_curve" in experiments:
            report = learning_curve(train, valid, schema, model_cfg, train_cfg,
                                    sizes=cfg.int_list("eval.curve_sizes"),
                                    repeats=cfg["eval.curve_repeats"],
                                    base_seed=cfg["seed"],
                                    negative_ratio=cfg["data.negative_ratio"],
                                    encode_cache=cache)
            report.write_figure_data(out / "fig_learning_curve.csv")
            reports.append(report)
        if "loss_grid" in experiments:
            reports.append(loss_grid(train, schema, valid_seqs_local, valid_labels,
                                     model_cfg, train_cfg, base_seed=cfg["seed"],
                                     negative_ratio=cfg["data.negative_ratio"],
                                     encode_cache=cache))
        if "lr_grid" in experiments:
            reports.append(lr_grid(train, schema, valid_seqs_local, valid_labels,
                                   model_cfg, train_cfg, base_seed=cfg["seed"],
                                   negative_ratio=cfg["data.negative_ratio"],
                                   encode_cache=cache))

    for report in reports:
        report.to_csv(out / f"report_{report.title}.csv")
        (out / f"report_{report.title}.txt").write_text(report.to_text() + "\n", encoding="utf-8")
        print(report.to_text())
        print()
    return 0


def cmd_score(cfg: RunConfig, out: Path, input_path: Path, timing_grid: bool) -> int:
    if not input_path.exists():
        raise DataError(f"input not found: {input_path}")
    artifacts = _load_artifacts(cfg, out)
    schema = artifacts[0].schema
    clients = ingest_csv(input_path, for_scoring=True)

    def score_batch(batch_clients):
        scoreable = [c for c in batch_clients if c.n_transactions > 0]
        seqs = [derive_and_encode(c, schema) for c in scoreable]
        scores = _score_artifacts(artifacts, seqs, cfg["train.batch_size_valid"])
        by_id = {c.client_id: s for c, s in zip(scoreable, scores)}
        return by_id

    t0 = time.perf_counter()
    by_id = score_batch(clients)
    elapsed = time.perf_counter() - t0
    out_path = out / "scores.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("client_id,score,status\r\n")
        for c in clients:
            if c.client_id in by_id:
                fh.write(f"{c.client_id},{by_id[c.client_id]!r},ok\r\n")
            else:
                fh.write(f"{c.client_id},,no_data\r\n")
    print(f"scored {len(clients)} clients in {elapsed:.2f}s -> {out_path}")

    if timing_grid:
        rows = []
        for target in (1000, 2000, 4000):
            reps = (target + len(clients) - 1) // len(clients)
            subset = (clients * reps)[:target]
            t0 = time.perf_counter()
            score_batch(subset)
            rows.append((target, time.perf_counter() - t0))
        with open(out / "timing_grid.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write("n_clients,seconds\r\n")
            for n, secs in rows:
                fh.write(f"{n},{secs!r}\r\n")
        for n, secs in rows:
            print(f"timing: {n} clients in {secs:.2f}s")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.set, args.seed)
        with _OutputDir(args.out) as out:
            if args.command == "generate":
                return cmd_generate(cfg, out)
            if args.command == "train":
                return cmd_train(cfg, out)
            if args.command == "evaluate":
                return cmd_evaluate(cfg, out)
            return cmd_score(cfg, out, args.input, args.timing_grid)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ArtifactError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
