"""Sequence scorer: per-field embeddings -> recurrent encoder -> linear
classifier, trained end to end.

Batches are padded on the prefix side; the recurrence is masked so padding
positions leave the hidden state untouched. That makes scores bit-identical
under any padding prefix length and any batch composition, for arbitrary
parameter values, and lets batches be trimmed to their longest real sequence.

Gate weights are stored packed (one matrix per input, gates side by side in
columns); per-gate views are exposed for the step-by-step cell kernels so the
batched scan and the single-step oracle share storage.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import EncodedSequence, SchemaSpec
from .kernels import (
    GruCellParams,
    LstmCellParams,
    Parameter,
    ShapeError,
    sigmoid,
)

ENCODER_KINDS = ("gru", "lstm")


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose per-row results do not depend on the row count.

    BLAS routes single-row products through a GEMV kernel whose reduction
    order differs from the GEMM kernels used for taller operands; padding to
    two rows keeps every batch size on the same path, which the bit-exact
    batching invariance relies on."""
    if a.shape[0] == 1:
        return (np.concatenate([a, a], axis=0) @ b)[:1]
    return a @ b


@dataclass
class ModelConfig:
    schema: SchemaSpec
    encoder_kind: str = "gru"
    bidirectional: bool = False
    hidden_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")

    def to_json(self) -> str:
        return json.dumps(
            {
                "encoder_kind": self.encoder_kind,
                "bidirectional": self.bidirectional,
                "hidden_size": self.hidden_size,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str, schema: SchemaSpec) -> "ModelConfig":
        doc = json.loads(text)
        return cls(schema=schema, encoder_kind=doc["encoder_kind"],
                   bidirectional=bool(doc["bidirectional"]),
                   hidden_size=int(doc["hidden_size"]), seed=int(doc["seed"]))


class CellPack:
    """Packed recurrent-cell weights for one direction."""

    def __init__(self, kind: str, w_x: Parameter, u_rec: Parameter, b: Parameter,
                 u_h: Parameter | None = None):
        self.kind = kind
        self.w_x = w_x      # gru: [I x 3H] (z|r|h); lstm: [I x 4H] (i|f|g|o)
        self.u_rec = u_rec  # gru: [H x 2H] (z|r);  lstm: [H x 4H]
        self.u_h = u_h      # gru only: [H x H] candidate recurrence
        self.b = b          # [1 x 3H] or [1 x 4H]

    def all(self) -> list[Parameter]:
        out = [self.w_x, self.u_rec, self.b]
        if self.u_h is not None:
            out.insert(2, self.u_h)
        return out

    def as_gru_cell_params(self) -> GruCellParams:
        h = self.u_h.value.shape[0]

        def view(p, c0, c1, tag):
            return Parameter.from_views(p.value[:, c0:c1], p.grad[:, c0:c1], f"{p.name}.{tag}")

        return GruCellParams(
            w_z=view(self.w_x, 0, h, "z"), u_z=view(self.u_rec, 0, h, "z"), b_z=view(self.b, 0, h, "z"),
            w_r=view(self.w_x, h, 2 * h, "r"), u_r=view(self.u_rec, h, 2 * h, "r"), b_r=view(self.b, h, 2 * h, "r"),
            w_h=view(self.w_x, 2 * h, 3 * h, "h"),
            u_h=Parameter.from_views(self.u_h.value, self.u_h.grad, f"{self.u_h.name}.h"),
            b_h=view(self.b, 2 * h, 3 * h, "h"),
        )

    def as_lstm_cell_params(self) -> LstmCellParams:
        h = self.u_rec.value.shape[0]

        def view(p, gate, tag):
            c0, c1 = gate * h, (gate + 1) * h
            return Parameter.from_views(p.value[:, c0:c1], p.grad[:, c0:c1], f"{p.name}.{tag}")

        names = ("i", "f", "g", "o")
        kw = {}
        for gate, tag in enumerate(names):
            kw[f"w_{tag}"] = view(self.w_x, gate, tag)
            kw[f"u_{tag}"] = view(self.u_rec, gate, tag)
            kw[f"b_{tag}"] = view(self.b, gate, tag)
        return LstmCellParams(**kw)


class ModelParameters:
    """Embedding tables, recurrent cells (per direction) and the classifier."""

    def __init__(self, embeddings: dict[str, Parameter], cells: list[CellPack],
                 clf_w: Parameter, clf_b: Parameter):
        self.embeddings = embeddings
        self.cells = cells
        self.clf_w = clf_w
        self.clf_b = clf_b

    def all_parameters(self) -> list[Parameter]:
        out = list(self.embeddings.values())
        for cell in self.cells:
            out.extend(cell.all())
        out.extend([self.clf_w, self.clf_b])
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.all_parameters())

    def zero_grads(self) -> None:
        for p in self.all_parameters():
            p.zero_grad()

    def copy(self) -> "ModelParameters":
        emb = {k: Parameter(p.value.copy(), p.name) for k, p in self.embeddings.items()}
        cells = []
        for c in self.cells:
            cells.append(CellPack(
                c.kind,
                Parameter(c.w_x.value.copy(), c.w_x.name),
                Parameter(c.u_rec.value.copy(), c.u_rec.name),
                Parameter(c.b.value.copy(), c.b.name),
                Parameter(c.u_h.value.copy(), c.u_h.name) if c.u_h is not None else None,
            ))
        return ModelParameters(emb, cells, Parameter(self.clf_w.value.copy(), self.clf_w.name),
                               Parameter(self.clf_b.value.copy(), self.clf_b.name))


def _glorot(rng: np.random.Generator, rows: int, cols: int, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(rows, cols))


def init_parameters(config: ModelConfig) -> ModelParameters:
    """Glorot-uniform weights, zero biases, zeroed padding rows; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed & 0xFFFFFFFFFFFFFFFF))
    schema = config.schema
    h = config.hidden_size
    width = schema.input_width

    embeddings = {}
    for f in schema.fields:
        table = _glorot(rng, f.cardinality, f.dim, f.cardinality, f.dim)
        table[0, :] = 0.0  # padding/unknown row stays a true zero vector
        embeddings[f.name] = Parameter(table, f"emb_{f.name}")

    n_gates = 3 if config.encoder_kind == "gru" else 4
    n_dirs = 2 if config.bidirectional else 1
    cells = []
    for d in range(n_dirs):
        tag = "fwd" if d == 0 else "bwd"
        w_x = np.concatenate(
            [_glorot(rng, width, h, width, h) for _ in range(n_gates)], axis=1)
        if config.encoder_kind == "gru":
            u_rec = np.concatenate([_glorot(rng, h, h, h, h) for _ in range(2)], axis=1)
            u_h = _glorot(rng, h, h, h, h)
            cells.append(CellPack(
                "gru",
                Parameter(w_x, f"{tag}.w_x"),
                Parameter(u_rec, f"{tag}.u_zr"),
                Parameter(np.zeros((1, 3 * h)), f"{tag}.b"),
                Parameter(u_h, f"{tag}.u_h"),
            ))
        else:
            u_rec = np.concatenate([_glorot(rng, h, h, h, h) for _ in range(4)], axis=1)
            cells.append(CellPack(
                "lstm",
                Parameter(w_x, f"{tag}.w_x"),
                Parameter(u_rec, f"{tag}.u"),
                Parameter(np.zeros((1, 4 * h)), f"{tag}.b"),
            ))

    clf_in = h * n_dirs
    clf_w = Parameter(_glorot(rng, clf_in, 1, clf_in, 1), "clf.w")
    clf_b = Parameter(np.zeros((1, 1)), "clf.b")
    return ModelParameters(embeddings, cells, clf_w, clf_b)


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------

def _assemble_batch(batch: list[EncodedSequence], schema: SchemaSpec):
    if not batch:
        raise ShapeError("forward: empty batch")
    max_len = batch[0].max_length
    for s in batch:
        if s.max_length != max_len:
            raise ShapeError("forward: batch sequences do not share max_length")
    n = len(batch)
    trimmed = max((s.valid_length for s in batch), default=0)
    idx = {f.name: np.zeros((n, trimmed), dtype=np.int64) for f in schema.fields}
    scal = np.zeros((n, trimmed, len(schema.scalar_features)), dtype=np.float64)
    mask = np.zeros((n, trimmed), dtype=np.float64)
    for i, s in enumerate(batch):
        vl = s.valid_length
        if vl == 0:
            continue
        start = trimmed - vl
        for name in idx:
            idx[name][i, start:] = s.cat[name]
        for j, name in enumerate(schema.scalar_features):
            scal[i, start:, j] = s.scal[name]
        mask[i, start:] = 1.0
    return idx, scal, mask


def _scan_gru(xw: np.ndarray, mask: np.ndarray, cell: CellPack):
    n, length, _ = xw.shape
    hsz = cell.u_h.value.shape[0]
    u_zr = cell.u_rec.value
    u_h = cell.u_h.value
    h = np.zeros((n, hsz))
    steps = []
    for t in range(length):
        pre = xw[:, t, :2 * hsz] + _matmul(h, u_zr)
        z = sigmoid(pre[:, :hsz])
        r = sigmoid(pre[:, hsz:])
        htil = np.tanh(xw[:, t, 2 * hsz:] + _matmul(r * h, u_h))
        h_new = (1.0 - z) * h + z * htil
        m = mask[:, t:t + 1]
        steps.append((z, r, htil, h))
        h = m * h_new + (1.0 - m) * h
    return h, steps


def _scan_gru_backward(dh: np.ndarray, steps, mask: np.ndarray, cell: CellPack,
                       dxw: np.ndarray) -> None:
    hsz = cell.u_h.value.shape[0]
    u_zr = cell.u_rec.value
    u_h = cell.u_h.value
    du_zr = np.zeros_like(u_zr)
    du_h = np.zeros_like(u_h)
    for t in range(len(steps) - 1, -1, -1):
        z, r, htil, h_prev = steps[t]
        m = mask[:, t:t + 1]
        dh_new = dh * m
        dh_prev = dh * (1.0 - m)
        dz = dh_new * (htil - h_prev)
        dhtil = dh_new * z
        dh_prev = dh_prev + dh_new * (1.0 - z)
        da_c = dhtil * (1.0 - htil * htil)
        dxw[:, t, 2 * hsz:] = da_c
        du_h += (r * h_prev).T @ da_c
        drh = da_c @ u_h.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        dxw[:, t, :hsz] = da_z
        dxw[:, t, hsz:2 * hsz] = da_r
        da_zr = np.concatenate([da_z, da_r], axis=1)
        du_zr += h_prev.T @ da_zr
        dh = dh_prev + da_zr @ u_zr.T
    cell.u_rec.grad += du_zr
    cell.u_h.grad += du_h


def _scan_lstm(xw: np.ndarray, mask: np.ndarray, cell: CellPack):
    n, length, _ = xw.shape
    hsz = cell.u_rec.value.shape[0]
    u = cell.u_rec.value
    h = np.zeros((n, hsz))
    c = np.zeros((n, hsz))
    steps = []
    for t in range(length):
        pre = xw[:, t, :] + _matmul(h, u)
        i = sigmoid(pre[:, :hsz])
        f = sigmoid(pre[:, hsz:2 * hsz])
        g = np.tanh(pre[:, 2 * hsz:3 * hsz])
        o = sigmoid(pre[:, 3 * hsz:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        m = mask[:, t:t + 1]
        steps.append((i, f, g, o, h, c, tc))
        h = m * (o * tc) + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
    return h, steps


def _scan_lstm_backward(dh: np.ndarray, steps, mask: np.ndarray, cell: CellPack,
                        dxw: np.ndarray) -> None:
    hsz = cell.u_rec.value.shape[0]
    u = cell.u_rec.value
    du = np.zeros_like(u)
    dc = np.zeros_like(dh)
    for t in range(len(steps) - 1, -1, -1):
        i, f, g, o, h_prev, c_prev, tc = steps[t]
        m = mask[:, t:t + 1]
        dh_new = dh * m
        dh_prev = dh * (1.0 - m)
        dc_new = dc * m
        dc_prev = dc * (1.0 - m)
        do = dh_new * tc
        dc_t = dh_new * o * (1.0 - tc * tc) + dc_new
        di = dc_t * g
        dg = dc_t * i
        df = dc_t * c_prev
        dc = dc_prev + dc_t * f
        da = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        dxw[:, t, :] = da
        du += h_prev.T @ da
        dh = dh_prev + da @ u.T
    cell.u_rec.grad += du


def forward(batch: list[EncodedSequence], params: ModelParameters, config: ModelConfig,
            *, embed_dropout_p: float = 0.0, rng: np.random.Generator | None = None,
            want_cache: bool = False):
    """Score a batch of encoded sequences; returns probabilities in (0, 1).

    With want_cache=True also returns the activation cache that backward()
    consumes. embed_dropout_p applies inverted dropout to the embedding block
    of the cell input (training only).
    """
    schema = config.schema
    for f in schema.fields:
        if f.name not in params.embeddings:
            raise ShapeError(f"forward: parameters lack embedding table for field {f.name}")
        if params.embeddings[f.name].value.shape != (f.cardinality, f.dim):
            raise ShapeError(
                f"forward: embedding {f.name} has shape {params.embeddings[f.name].value.shape}, "
                f"schema expects {(f.cardinality, f.dim)}"
            )
    idx, scal, mask = _assemble_batch(batch, schema)
    n, length = mask.shape
    embed_width = sum(f.dim for f in schema.fields)

    x = np.empty((n, length, schema.input_width))
    col = 0
    for f in schema.fields:
        x[:, :, col:col + f.dim] = params.embeddings[f.name].value[idx[f.name]]
        col += f.dim
    x[:, :, col:] = scal

    drop_mask = None
    if embed_dropout_p > 0.0:
        if embed_dropout_p >= 1.0:
            raise ValueError("embed_dropout_p must be < 1")
        if rng is None:
            raise ValueError("embed dropout needs an rng")
        keep = 1.0 - embed_dropout_p
        drop_mask = (rng.random((n, length, embed_width)) < keep) / keep
        x[:, :, :embed_width] *= drop_mask

    x_flat = x.reshape(n * length, schema.input_width)
    h_parts = []
    scans = []
    for d, cell in enumerate(params.cells):
        xw = (_matmul(x_flat, cell.w_x.value) + cell.b.value).reshape(n, length, cell.w_x.value.shape[1])
        m = mask if d == 0 else mask[:, ::-1]
        if d == 1:
            xw = xw[:, ::-1, :]
        if cell.kind == "gru":
            h_last, steps = _scan_gru(xw, m, cell)
        else:
            h_last, steps = _scan_lstm(xw, m, cell)
        h_parts.append(h_last)
        scans.append((steps, m))
    h_cat = np.concatenate(h_parts, axis=1) if len(h_parts) > 1 else h_parts[0]
    # broadcast-sum instead of a matvec: the BLAS N=1 kernel rounds
    # differently per row count, which would break batching invariance
    logits = (h_cat * params.clf_w.value[:, 0]).sum(axis=1, keepdims=True) \
        + params.clf_b.value
    scores = sigmoid(logits[:, 0])

    if not want_cache:
        return scores
    cache = {
        "idx": idx, "x": x, "mask": mask, "scans": scans, "h_cat": h_cat,
        "scores": scores, "drop_mask": drop_mask, "n": n, "length": length,
        "embed_width": embed_width, "config": config,
    }
    return scores, cache


def backward(cache, params: ModelParameters, loss_grads: np.ndarray) -> None:
    """Backpropagate d(loss)/d(score) through time into all parameters.

    Gradients accumulate; the padding row of every embedding table is zeroed
    after accumulation so it stays a true padding vector.
    """
    if cache is None:
        raise ValueError("backward called without a cached forward pass")
    config: ModelConfig = cache["config"]
    schema = config.schema
    n, length = cache["n"], cache["length"]
    hsz = config.hidden_size
    scores = cache["scores"]

    dlogit = (np.asarray(loss_grads, dtype=np.float64) * scores * (1.0 - scores))[:, None]
    h_cat = cache["h_cat"]
    params.clf_w.grad += h_cat.T @ dlogit
    params.clf_b.grad += dlogit.sum(axis=0, keepdims=True)
    dh_cat = dlogit @ params.clf_w.value.T

    x = cache["x"]
    width = schema.input_width
    x_flat = x.reshape(n * length, width)
    dx = np.zeros_like(x)
    for d, cell in enumerate(params.cells):
        steps, m = cache["scans"][d]
        dh = dh_cat[:, d * hsz:(d + 1) * hsz]
        n_gate_cols = cell.w_x.value.shape[1]
        dxw = np.zeros((n, length, n_gate_cols))
        if cell.kind == "gru":
            _scan_gru_backward(dh.copy(), steps, m, cell, dxw)
        else:
            _scan_lstm_backward(dh.copy(), steps, m, cell, dxw)
        if d == 1:
            dxw = dxw[:, ::-1, :]
        dxw_flat = dxw.reshape(n * length, n_gate_cols)
        cell.w_x.grad += x_flat.T @ dxw_flat
        cell.b.grad += dxw_flat.sum(axis=0, keepdims=True)
        dx += (dxw_flat @ cell.w_x.value.T).reshape(n, length, width)

    if cache["drop_mask"] is not None:
        dx[:, :, :cache["embed_width"]] *= cache["drop_mask"]

    col = 0
    for f in schema.fields:
        table = params.embeddings[f.name]
        grads = dx[:, :, col:col + f.dim].reshape(n * length, f.dim)
        np.add.at(table.grad, cache["idx"][f.name].reshape(-1), grads)
        table.grad[0, :] = 0.0
        col += f.dim


def score_sequences(params: ModelParameters, sequences: list[EncodedSequence],
                    config: ModelConfig, batch_size: int = 768) -> np.ndarray:
    """Score many sequences; batches are grouped by length for speed.

    Grouping cannot change results: scores are batch-composition invariant.
    """
    if not sequences:
        return np.zeros(0)
    order = np.argsort([s.valid_length for s in sequences], kind="stable")
    out = np.zeros(len(sequences))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        out[chunk] = forward([sequences[i] for i in chunk], params, config)
    return out
