"""Losses, learning-rate schedules, regularization variants, the training
loop, and ensembling strategies.

The ranking loss pairs every positive with every negative inside a batch and
averages the hinge over pairs; batches that lack one class are skipped and
counted. Training is single-threaded and bit-deterministic per seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    EncodedSequence,
    SamplingPool,
    SchemaSpec,
    build_negative_pool,
    epoch_sample,
    rng_from,
)
from .kernels import AdamState, adam_step
from .metrics import SingleClassError, roc_auc
from .model import ModelConfig, ModelParameters, backward, forward, init_parameters, score_sequences

LOSS_KINDS = ("bce", "margin_rank", "margin_rank_plus_bce")
REG_KINDS = ("none", "tx_dropout", "tx_shuffle", "embed_dropout")


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    loss_kind: str = "margin_rank"
    margin: float = 0.1
    bce_weight: float = 1.0
    base_lr: float = 0.01
    gamma: float = 0.5
    cycles: int = 1
    epochs: int = 8
    batch_size_train: int = 32
    batch_size_valid: int = 768
    reg: str = "none"
    reg_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.reg not in REG_KINDS:
            raise ValueError(f"reg must be one of {REG_KINDS}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.reg_p < 1.0:
            raise ValueError("reg_p must be in [0, 1)")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_auc: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    skipped_batches: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "valid_auc", "lr"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_loss), repr(e.valid_auc), repr(e.lr)])


@dataclass
class TrainResult:
    params: ModelParameters
    history: TrainHistory
    snapshots: list[ModelParameters] = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.history))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_loss(p: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy; also returns d(loss)/d(p)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("bce_loss: probabilities must lie strictly inside (0, 1)")
    n = p.size
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
    grads = (p - y) / (p * (1.0 - p)) / n
    return loss, grads


def margin_ranking_loss(p_pos: np.ndarray, p_neg: np.ndarray, margin: float):
    """Hinge on every positive x negative score pair, mean-reduced.

    Zero exactly when every positive outscores every negative by >= margin;
    subgradient zero at the hinge point.
    """
    p_pos = np.asarray(p_pos, dtype=np.float64)
    p_neg = np.asarray(p_neg, dtype=np.float64)
    if p_pos.size == 0 or p_neg.size == 0:
        raise SingleClassError("margin_ranking_loss needs both classes in the batch")
    diff = p_pos[:, None] - p_neg[None, :]
    slack = margin - diff
    active = slack > 0.0
    n_pairs = p_pos.size * p_neg.size
    loss = float(np.where(active, slack, 0.0).sum() / n_pairs)
    d_pos = -active.sum(axis=1).astype(np.float64) / n_pairs
    d_neg = active.sum(axis=0).astype(np.float64) / n_pairs
    return loss, d_pos, d_neg


def ranking_loss_on_batch(scores: np.ndarray, labels: np.ndarray, margin: float):
    """margin_ranking_loss mapped back to per-client score positions."""
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    loss, d_pos, d_neg = margin_ranking_loss(scores[pos], scores[neg], margin)
    grads = np.zeros_like(scores)
    grads[pos] = d_pos
    grads[neg] = d_neg
    return loss, grads


def combined_loss(scores: np.ndarray, labels: np.ndarray, margin: float, weight: float = 1.0):
    """Ranking loss plus weight * BCE on the same scores."""
    rank_loss, rank_grads = ranking_loss_on_batch(scores, labels, margin)
    if weight == 0.0:
        return rank_loss, rank_grads
    ce_loss, ce_grads = bce_loss(scores, labels)
    return rank_loss + weight * ce_loss, rank_grads + weight * ce_grads


def batch_loss(scores: np.ndarray, labels: np.ndarray, config: TrainConfig):
    if config.loss_kind == "bce":
        return bce_loss(scores, np.asarray(labels, dtype=np.float64))
    if config.loss_kind == "margin_rank":
        return ranking_loss_on_batch(scores, labels, config.margin)
    return combined_loss(scores, labels, config.margin, config.bce_weight)


# ---------------------------------------------------------------------------
# schedule and regularizers
# ---------------------------------------------------------------------------

def lr_schedule(epoch: int, base_lr: float, gamma: float, cycles: int = 1,
                total_epochs: int | None = None) -> float:
    """Geometric per-epoch decay, restarting at base_lr in each of `cycles`
    equal contiguous segments. cycles=1 gives monotone decay; gamma=1 constant."""
    if total_epochs is None:
        raise ValueError("lr_schedule needs total_epochs")
    if cycles > total_epochs:
        raise ValueError(f"cycles={cycles} exceeds total_epochs={total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    segment = math.ceil(total_epochs / cycles)
    return base_lr * gamma ** (epoch % segment)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_from(int(seed))


def transaction_dropout(seq: EncodedSequence, p: float, seed) -> EncodedSequence:
    """Drop each real transaction independently with probability p, keeping
    at least one; survivors re-pack as a suffix."""
    if not 0.0 <= p < 1.0:
        raise ValueError("transaction_dropout: p must be in [0, 1)")
    if p == 0.0 or seq.valid_length <= 1:
        return seq
    rng = _as_rng(seed)
    keep = rng.random(seq.valid_length) >= p
    if not keep.any():
        keep[rng.integers(0, seq.valid_length)] = True
    return seq.replaced(np.flatnonzero(keep))


def transaction_shuffle(seq: EncodedSequence, seed) -> EncodedSequence:
    """Uniformly permute the real positions; padding prefix untouched.

    Encoded rows move as-is (derived time features are not recomputed)."""
    if seq.valid_length <= 1:
        return seq
    rng = _as_rng(seed)
    return seq.replaced(rng.permutation(seq.valid_length))


def embedding_dropout(x: np.ndarray, p: float, seed) -> np.ndarray:
    """Inverted dropout on matrix entries: kept entries scale by 1/(1-p)."""
    if p >= 1.0 or p < 0.0:
        raise ValueError("embedding_dropout: p must be in [0, 1)")
    if p == 0.0:
        return x
    rng = _as_rng(seed)
    keep = 1.0 - p
    return x * ((rng.random(x.shape) < keep) / keep)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def train_model(
    pool: SamplingPool,
    schema: SchemaSpec,
    valid_seqs: list[EncodedSequence],
    valid_labels: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    snapshot_after: int | None = None,
    encode_cache: dict | None = None,
) -> TrainResult:
    """Balanced-epoch training with Adam and the configured loss/schedule.

    Per epoch: resample via epoch_sample, batch, apply the configured
    regularizer, forward/backward, Adam step at the scheduled rate, then score
    the validation set with regularization disabled. Deterministic per seed.
    """
    from .data import derive_and_encode  # local import keeps module load light

    if snapshot_after is not None and not 0 <= snapshot_after < max(train_config.epochs, 1):
        raise ValueError("snapshot_after must lie before the final epoch index")
    cache = encode_cache if encode_cache is not None else {}

    def encoded(client):
        seq = cache.get(client.client_id)
        if seq is None:
            seq = derive_and_encode(client, schema)
            cache[client.client_id] = seq
        return seq

    params = init_parameters(model_config)
    adam = AdamState(lr=train_config.base_lr)
    history = TrainHistory()
    snapshots: list[ModelParameters] = []
    valid_labels = np.asarray(valid_labels)

    for epoch in range(train_config.epochs):
        lr = lr_schedule(epoch, train_config.base_lr, train_config.gamma,
                         train_config.cycles, train_config.epochs)
        adam.lr = lr
        sample = epoch_sample(pool, epoch, train_config.seed)
        losses = []
        for batch_no, batch_clients in enumerate(_chunks(sample, train_config.batch_size_train)):
            seqs = [encoded(c) for c in batch_clients]
            labels = np.array([c.label for c in batch_clients])
            reg_rng = rng_from(train_config.seed, 0x4E6, epoch, batch_no)
            forward_kwargs = {}
            if train_config.reg == "tx_dropout":
                seqs = [transaction_dropout(s, train_config.reg_p, reg_rng) for s in seqs]
            elif train_config.reg == "tx_shuffle":
                seqs = [transaction_shuffle(s, reg_rng) for s in seqs]
            elif train_config.reg == "embed_dropout":
                forward_kwargs = {"embed_dropout_p": train_config.reg_p, "rng": reg_rng}

            scores, fwd_cache = forward(seqs, params, model_config, want_cache=True,
                                        **forward_kwargs)
            try:
                loss, grads = batch_loss(scores, labels, train_config)
            except SingleClassError:
                history.skipped_batches += 1
                continue
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            backward(fwd_cache, params, grads)
            adam_step(params.all_parameters(), adam)
            losses.append(loss)

        if len(valid_seqs) and np.unique(valid_labels).size > 1:
            valid_scores = score_sequences(params, valid_seqs, model_config,
                                           train_config.batch_size_valid)
            valid_auc = roc_auc(valid_scores, valid_labels)
        else:
            valid_auc = float("nan")
        history.epochs.append(EpochStats(epoch, float(np.mean(losses)) if losses else float("nan"),
                                         valid_auc, lr))
        if snapshot_after is not None and epoch >= snapshot_after:
            snapshots.append(params.copy())

    return TrainResult(params, history, snapshots)


def member_seeds(base_seed: int, member: int) -> tuple[int, int, int]:
    """Independent (pool, model, train) seeds for one ensemble member."""
    state = np.random.SeedSequence([base_seed & 0xFFFFFFFFFFFFFFFF, member]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def train_ensemble(
    train_clients,
    schema: SchemaSpec,
    valid_seqs,
    valid_labels,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n: int = 6,
    base_seed: int = 0,
    negative_ratio: int = 10,
    encode_cache: dict | None = None,
) -> list[TrainResult]:
    """Train n members, each on an independently sampled negative pool."""
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    cache = encode_cache if encode_cache is not None else {}
    results = []
    for member in range(n):
        pool_seed, model_seed, train_seed = member_seeds(base_seed, member)
        pool = build_negative_pool(train_clients, ratio=negative_ratio, seed=pool_seed)
        m_cfg = replace(model_config, seed=model_seed)
        t_cfg = replace(train_config, seed=train_seed)
        results.append(train_model(pool, schema, valid_seqs, valid_labels, m_cfg, t_cfg,
                                   encode_cache=cache))
    return results


def ensemble_predict(models: list[ModelParameters], sequences, config: ModelConfig,
                     batch_size: int = 768) -> np.ndarray:
    """Arithmetic mean of member scores.

    Member scores are sorted before summation so the result is bit-identical
    under any permutation of the model list."""
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    member_scores = np.stack([
        score_sequences(params, sequences, config, batch_size) for params in models
    ])
    member_scores.sort(axis=0)
    return member_scores.sum(axis=0) / len(models)


def average_weights(models: list[ModelParameters]) -> ModelParameters:
    """Parameter-wise arithmetic mean of identically shaped models."""
    if not models:
        raise ValueError("average_weights needs at least one model")
    out = models[0].copy()
    targets = out.all_parameters()
    for m in models[1:]:
        sources = m.all_parameters()
        if len(sources) != len(targets):
            raise ValueError("average_weights: parameter sets differ")
        for t, s in zip(targets, sources):
            if t.value.shape != s.value.shape:
                raise ValueError(
                    f"average_weights: shape mismatch on {t.name}: "
                    f"{t.value.shape} vs {s.value.shape}"
                )
            t.value += s.value
    for t in targets:
        t.value /= len(models)
    return out
