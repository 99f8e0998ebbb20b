"""Differentiable numeric kernels: forward maps paired with exact backward maps.

Matrices are 2-D float64 numpy arrays (row-major). Each kernel returns its
output together with a backward closure; the model composes closures in
reverse order, so no tape or graph engine is needed. Gradients accumulate
additively into Parameter.grad until explicitly zeroed.

Set SEQSCORE_DEBUG_FINITE=1 (or flip DEBUG_CHECK_FINITE) to assert that every
kernel output is finite.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

DEBUG_CHECK_FINITE = os.environ.get("SEQSCORE_DEBUG_FINITE", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes do not agree."""


def as_matrix(x, name: str = "x") -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return x


class Parameter:
    """A named matrix with a paired, additively accumulated gradient."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        self.value = as_matrix(value, name)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @classmethod
    def from_views(cls, value: np.ndarray, grad: np.ndarray, name: str) -> "Parameter":
        # Shares storage with the caller's arrays (used for packed-weight slices).
        p = cls.__new__(cls)
        p.value = value
        p.grad = grad
        p.name = name
        return p

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def sigmoid(x):
    """Numerically safe logistic function; saturates without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return _check_finite(0.5 * (1.0 + np.tanh(0.5 * x)), "sigmoid")


def sigmoid_op(x):
    y = sigmoid(x)

    def backward(dy):
        return dy * y * (1.0 - y)

    return y, backward


def tanh_op(x):
    y = np.tanh(np.asarray(x, dtype=np.float64))
    _check_finite(y, "tanh")

    def backward(dy):
        return dy * (1.0 - y * y)

    return y, backward


def add_op(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    y = a + b

    def backward(dy):
        return dy, dy

    return y, backward


def multiply_op(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} differ")
    y = a * b

    def backward(dy):
        return dy * b, dy * a

    return y, backward


def concat_columns(blocks: list[np.ndarray]):
    """Column-wise concatenation; backward splits grads by column ranges."""
    rows = blocks[0].shape[0]
    for i, blk in enumerate(blocks):
        if blk.ndim != 2 or blk.shape[0] != rows:
            raise ShapeError(f"concat_columns: block {i} has shape {blk.shape}, expected {rows} rows")
    y = np.concatenate(blocks, axis=1)
    widths = [blk.shape[1] for blk in blocks]

    def backward(dy):
        out, col = [], 0
        for w in widths:
            out.append(dy[:, col:col + w])
            col += w
        return out

    return y, backward


def affine(x: np.ndarray, weight: Parameter, bias: Parameter):
    """y = x @ W + b for x[BxI], W[IxO], b[1xO]."""
    x = as_matrix(x, "x")
    if x.shape[1] != weight.value.shape[0]:
        raise ShapeError(
            f"affine: x has {x.shape[1]} columns but {weight.name} has "
            f"{weight.value.shape[0]} rows"
        )
    if bias.value.shape != (1, weight.value.shape[1]):
        raise ShapeError(
            f"affine: {bias.name} has shape {bias.value.shape}, expected (1, {weight.value.shape[1]})"
        )
    y = x @ weight.value + bias.value
    _check_finite(y, "affine")

    def backward(dy):
        weight.grad += x.T @ dy
        bias.grad += dy.sum(axis=0, keepdims=True)
        return dy @ weight.value.T

    return y, backward


def embedding_lookup(table: Parameter, indices):
    """Row gather out of an embedding table; backward scatter-adds into rows.

    Repeated indices accumulate gradients additively.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: indices must be 1-D, got shape {idx.shape}")
    k = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        bad = idx[(idx < 0) | (idx >= k)][0]
        raise IndexError(f"embedding_lookup: index {bad} out of range [0, {k}) for {table.name}")
    y = table.value[idx]

    def backward(dy):
        np.add.at(table.grad, idx, dy)
        return None

    return y, backward


@dataclass
class GruCellParams:
    """Update (z), reset (r) and candidate (h) gate weights for one GRU cell."""

    w_z: Parameter
    u_z: Parameter
    b_z: Parameter
    w_r: Parameter
    u_r: Parameter
    b_r: Parameter
    w_h: Parameter
    u_h: Parameter
    b_h: Parameter

    def all(self) -> list[Parameter]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray, params: GruCellParams):
    """One GRU step.

    z = sig(x W_z + h U_z + b_z); r = sig(x W_r + h U_r + b_r)
    htil = tanh(x W_h + (r*h) U_h + b_h); h_t = (1-z)*h + z*htil
    """
    x_t = as_matrix(x_t, "x_t")
    h_prev = as_matrix(h_prev, "h_prev")
    if x_t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"gru_cell: batch {x_t.shape[0]} vs {h_prev.shape[0]}")
    if x_t.shape[1] != params.w_z.value.shape[0] or h_prev.shape[1] != params.u_z.value.shape[0]:
        raise ShapeError(
            f"gru_cell: inputs ({x_t.shape}, {h_prev.shape}) do not match "
            f"W_z {params.w_z.value.shape} / U_z {params.u_z.value.shape}"
        )
    z = sigmoid(x_t @ params.w_z.value + h_prev @ params.u_z.value + params.b_z.value)
    r = sigmoid(x_t @ params.w_r.value + h_prev @ params.u_r.value + params.b_r.value)
    rh = r * h_prev
    htil = np.tanh(x_t @ params.w_h.value + rh @ params.u_h.value + params.b_h.value)
    h_t = (1.0 - z) * h_prev + z * htil
    _check_finite(h_t, "gru_cell")

    def backward(dh):
        dz = dh * (htil - h_prev)
        dhtil = dh * z
        dh_prev = dh * (1.0 - z)

        da_h = dhtil * (1.0 - htil * htil)
        params.w_h.grad += x_t.T @ da_h
        params.u_h.grad += rh.T @ da_h
        params.b_h.grad += da_h.sum(axis=0, keepdims=True)
        drh = da_h @ params.u_h.value.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        dx = da_h @ params.w_h.value.T

        da_z = dz * z * (1.0 - z)
        params.w_z.grad += x_t.T @ da_z
        params.u_z.grad += h_prev.T @ da_z
        params.b_z.grad += da_z.sum(axis=0, keepdims=True)
        dh_prev = dh_prev + da_z @ params.u_z.value.T
        dx = dx + da_z @ params.w_z.value.T

        da_r = dr * r * (1.0 - r)
        params.w_r.grad += x_t.T @ da_r
        params.u_r.grad += h_prev.T @ da_r
        params.b_r.grad += da_r.sum(axis=0, keepdims=True)
        dh_prev = dh_prev + da_r @ params.u_r.value.T
        dx = dx + da_r @ params.w_r.value.T
        return dx, dh_prev

    return h_t, backward


@dataclass
class LstmCellParams:
    """Input/forget/candidate/output gate weights for one LSTM cell."""

    w_i: Parameter
    u_i: Parameter
    b_i: Parameter
    w_f: Parameter
    u_f: Parameter
    b_f: Parameter
    w_g: Parameter
    u_g: Parameter
    b_g: Parameter
    w_o: Parameter
    u_o: Parameter
    b_o: Parameter

    def all(self) -> list[Parameter]:
        return [self.w_i, self.u_i, self.b_i, self.w_f, self.u_f, self.b_f,
                self.w_g, self.u_g, self.b_g, self.w_o, self.u_o, self.b_o]


def lstm_cell(x_t: np.ndarray, state_prev: tuple[np.ndarray, np.ndarray], params: LstmCellParams):
    """One LSTM step over state (h, c) with forget/input/output gates."""
    h_prev, c_prev = state_prev
    x_t = as_matrix(x_t, "x_t")
    h_prev = as_matrix(h_prev, "h_prev")
    c_prev = as_matrix(c_prev, "c_prev")
    if x_t.shape[1] != params.w_i.value.shape[0] or h_prev.shape[1] != params.u_i.value.shape[0]:
        raise ShapeError(
            f"lstm_cell: inputs ({x_t.shape}, {h_prev.shape}) do not match "
            f"W_i {params.w_i.value.shape} / U_i {params.u_i.value.shape}"
        )
    i = sigmoid(x_t @ params.w_i.value + h_prev @ params.u_i.value + params.b_i.value)
    f = sigmoid(x_t @ params.w_f.value + h_prev @ params.u_f.value + params.b_f.value)
    g = np.tanh(x_t @ params.w_g.value + h_prev @ params.u_g.value + params.b_g.value)
    o = sigmoid(x_t @ params.w_o.value + h_prev @ params.u_o.value + params.b_o.value)
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    h_t = o * tc
    _check_finite(h_t, "lstm_cell")

    def backward(dh, dc=None):
        dc_t = dh * o * (1.0 - tc * tc)
        if dc is not None:
            dc_t = dc_t + dc
        do = dh * tc
        di = dc_t * g
        dg = dc_t * i
        df = dc_t * c_prev
        dc_prev = dc_t * f

        dx = np.zeros_like(x_t)
        dh_prev = np.zeros_like(h_prev)
        for gate_grad, act, (w, u, b) in (
            (di, i, (params.w_i, params.u_i, params.b_i)),
            (df, f, (params.w_f, params.u_f, params.b_f)),
            (do, o, (params.w_o, params.u_o, params.b_o)),
        ):
            da = gate_grad * act * (1.0 - act)
            w.grad += x_t.T @ da
            u.grad += h_prev.T @ da
            b.grad += da.sum(axis=0, keepdims=True)
            dx += da @ w.value.T
            dh_prev += da @ u.value.T
        da_g = dg * (1.0 - g * g)
        params.w_g.grad += x_t.T @ da_g
        params.u_g.grad += h_prev.T @ da_g
        params.b_g.grad += da_g.sum(axis=0, keepdims=True)
        dx += da_g @ params.w_g.value.T
        dh_prev += da_g @ params.u_g.value.T
        return dx, dh_prev, dc_prev

    return (h_t, c_t), backward


@dataclass
class AdamState:
    """Per-parameter first/second moments plus shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def moment_for(self, param: Parameter) -> tuple[np.ndarray, np.ndarray]:
        key = id(param)
        if key not in self.moments:
            self.moments[key] = (np.zeros_like(param.value), np.zeros_like(param.value))
        return self.moments[key]


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """Standard Adam update with bias correction; zeroes grads afterwards."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in params:
        m, v = state.moment_for(p)
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.zero_grad()


@dataclass
class CoordinateFailure:
    param: str
    index: tuple[int, int]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FiniteDifferenceReport:
    max_rel_err: float
    n_checked: int
    passed: bool
    worst: CoordinateFailure | None
    failures: list[CoordinateFailure]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        w = ""
        if self.worst is not None:
            w = (f" worst={self.worst.param}{self.worst.index} "
                 f"analytic={self.worst.analytic:.3e} numeric={self.worst.numeric:.3e}")
        return f"[{status}] max_rel_err={self.max_rel_err:.3e} over {self.n_checked} coords{w}"


def finite_difference_check(
    f,
    params: list[Parameter],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords_per_param: int = 20,
    rng: np.random.Generator | None = None,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of the scalar function f against central differences.

    f() must run forward + backward and return the scalar loss; it reads the
    current Parameter values and accumulates into .grad. Coordinates are
    sampled per parameter. Relative error uses max(|analytic|, |numeric|) as
    the scale, falling back to absolute error below 1e-8.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    base = float(f())
    if not math.isfinite(base):
        raise FloatingPointError("finite_difference_check: f() is not finite at the base point")
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    worst: CoordinateFailure | None = None
    failures: list[CoordinateFailure] = []
    max_rel = 0.0
    n_checked = 0
    for p in params:
        size = p.value.size
        n = min(max_coords_per_param, size)
        flat_idx = rng.choice(size, size=n, replace=False) if n < size else np.arange(size)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), p.value.shape)
            orig = p.value[idx]
            p.value[idx] = orig + h
            f_plus = float(f())
            p.value[idx] = orig - h
            f_minus = float(f())
            p.value[idx] = orig
            for q in params:
                q.zero_grad()
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[p.name][idx])
            if not (math.isfinite(numeric) and math.isfinite(a)):
                fail = CoordinateFailure(p.name, idx, a, numeric, math.inf)
                return FiniteDifferenceReport(math.inf, n_checked + 1, False, fail, [fail])
            scale = max(abs(a), abs(numeric))
            rel = abs(a - numeric) / scale if scale > 1e-8 else abs(a - numeric)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = CoordinateFailure(p.name, idx, a, numeric, rel)
            if rel > tolerance:
                failures.append(CoordinateFailure(p.name, idx, a, numeric, rel))
    return FiniteDifferenceReport(max_rel, n_checked, not failures, worst, failures)
