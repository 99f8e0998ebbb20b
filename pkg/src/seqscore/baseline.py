"""Classical scorecard baseline: hand-crafted aggregate features per client,
weight-of-evidence coding with quantile binning, and an L2-regularized
logistic regression trained by full-batch gradient descent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClientHistory, SECONDS_PER_DAY, _date_to_epoch


@dataclass
class FeatureRegistry:
    """Fixed-order aggregate feature definitions.

    Window counts are measured backward from the application date (falling
    back to the day after the last transaction when no application date is
    known, as in scoring mode).
    """

    merchant_types: list[str]
    currencies: list[str]
    windows: tuple[int, ...] = (30, 90, 365)
    include_merchant_shares: bool = True

    @classmethod
    def from_dataset(cls, clients: list[ClientHistory], **kw) -> "FeatureRegistry":
        merchants: set[str] = set()
        currencies: set[str] = set()
        for c in clients:
            merchants.update(c.columns.merchant_type)
            currencies.update(c.columns.currency)
        return cls(sorted(merchants), sorted(currencies), **kw)

    def names(self) -> list[str]:
        out = []
        for m in self.merchant_types:
            out += [f"mt_{m}_count", f"mt_{m}_amount_sum", f"mt_{m}_amount_mean"]
            if self.include_merchant_shares:
                out.append(f"mt_{m}_share")
        out += [f"cur_{c}_count" for c in self.currencies]
        out += ["total_count", "amount_total", "amount_mean", "amount_max",
                "days_since_prev_mean", "days_since_prev_std"]
        out += [f"count_last_{w}d" for w in self.windows]
        out += ["n_cards", "top_merchant_share"]
        return out

    def compute(self, client: ClientHistory) -> np.ndarray:
        cols = client.columns
        n = len(cols)
        if n == 0:
            raise ValueError(f"client {client.client_id}: aggregate features need >= 1 transaction")
        amounts = cols.amount
        merchants = cols.merchant_type
        feats: list[float] = []
        for m in self.merchant_types:
            mask = merchants == m
            cnt = int(np.count_nonzero(mask))
            total = float(amounts[mask].sum()) if cnt else 0.0
            feats += [float(cnt), total, total / cnt if cnt else 0.0]
            if self.include_merchant_shares:
                feats.append(cnt / n)
        for c in self.currencies:
            feats.append(float(np.count_nonzero(cols.currency == c)))
        feats += [float(n), float(amounts.sum()), float(amounts.mean()), float(amounts.max())]
        if n > 1:
            gaps = np.diff(cols.timestamp) / SECONDS_PER_DAY
            feats += [float(gaps.mean()), float(gaps.std())]
        else:
            feats += [0.0, 0.0]
        if client.application_date is not None:
            anchor = _date_to_epoch(client.application_date)
        else:
            anchor = int(cols.timestamp[-1]) + SECONDS_PER_DAY
        for w in self.windows:
            feats.append(float(np.count_nonzero(cols.timestamp >= anchor - w * SECONDS_PER_DAY)))
        feats.append(float(len(set(cols.card_id))))
        _, counts = np.unique(merchants, return_counts=True)
        feats.append(float(counts.max()) / n)
        return np.array(feats, dtype=np.float64)


def aggregate_features(client: ClientHistory, registry: FeatureRegistry) -> np.ndarray:
    return registry.compute(client)


def feature_matrix(clients: list[ClientHistory], registry: FeatureRegistry) -> np.ndarray:
    return np.stack([registry.compute(c) for c in clients])


# ---------------------------------------------------------------------------
# Weight of evidence
# ---------------------------------------------------------------------------

@dataclass
class WoeBinning:
    """Quantile bin edges plus per-bin weight-of-evidence values.

    edges are the internal cut points (strictly increasing); values fall into
    len(edges)+1 bins via right-open search. unknown_value covers NaN input.
    """

    edges: np.ndarray
    woe: np.ndarray
    unknown_value: float = 0.0


def fit_woe(values, labels, n_bins: int = 10) -> WoeBinning:
    """Quantile bins; WoE_b = ln((goods_b/goods_tot)/(bads_b/bads_tot)).

    goods are label 0, bads label 1. Bins with a zero cell get 0.5 added to
    both cells. A constant feature yields a single bin with WoE 0.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    goods_total = int(np.count_nonzero(labels == 0))
    bads_total = int(np.count_nonzero(labels == 1))
    if goods_total == 0 or bads_total == 0:
        raise ValueError("fit_woe needs both classes")
    qs = np.quantile(values, np.arange(1, n_bins) / n_bins)
    edges = np.unique(qs)
    # bins are (edge_{b-1}, edge_b]; an edge at the max would leave an empty
    # trailing bin, while an edge at the min still separates a point mass there
    edges = edges[edges < values.max()]
    bins = np.searchsorted(edges, values, side="left")
    n_total_bins = len(edges) + 1
    woe = np.zeros(n_total_bins)
    for b in range(n_total_bins):
        mask = bins == b
        goods = float(np.count_nonzero(labels[mask] == 0))
        bads = float(np.count_nonzero(labels[mask] == 1))
        if goods == 0.0 or bads == 0.0:
            goods += 0.5
            bads += 0.5
        woe[b] = math.log((goods / goods_total) / (bads / bads_total))
    return WoeBinning(edges, woe)


def apply_woe(binning: WoeBinning, values) -> np.ndarray:
    """Map every real value to its bin's WoE; NaN goes to the unknown value."""
    values = np.asarray(values, dtype=np.float64)
    out = np.full(values.shape, binning.unknown_value)
    ok = np.isfinite(values)
    out[ok] = binning.woe[np.searchsorted(binning.edges, values[ok], side="left")]
    return out


def fit_woe_matrix(x: np.ndarray, labels, n_bins: int = 10) -> list[WoeBinning]:
    return [fit_woe(x[:, j], labels, n_bins) for j in range(x.shape[1])]


def apply_woe_matrix(binnings: list[WoeBinning], x: np.ndarray) -> np.ndarray:
    return np.stack([apply_woe(b, x[:, j]) for j, b in enumerate(binnings)], axis=1)


# ---------------------------------------------------------------------------
# Logistic regression (full-batch gradient descent)
# ---------------------------------------------------------------------------

class DivergenceError(RuntimeError):
    pass


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.feature_mean) / self.feature_std
        return xs @ self.weights + self.intercept

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.decision(x)))


def train_logistic(x: np.ndarray, y, l2_lambda: float = 1e-3, epochs: int = 400,
                   lr: float = 0.5) -> LogisticModel:
    """Deterministic full-batch gradient descent on L2-regularized BCE.

    Features are standardized internally; the intercept is unregularized.
    Raises DivergenceError after 10 consecutive loss increases.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("train_logistic: non-finite feature matrix")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    xs = (x - mean) / std
    n, k = xs.shape
    w = np.zeros(k)
    b = 0.0
    prev_loss = math.inf
    rising = 0
    for _ in range(epochs):
        z = xs @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        eps = 1e-12
        loss = float(-(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)).mean()
                     + 0.5 * l2_lambda * (w @ w))
        if loss > prev_loss:
            rising += 1
            if rising >= 10:
                raise DivergenceError(
                    "train_logistic diverged (10 consecutive loss increases); lower lr"
                )
        else:
            rising = 0
        prev_loss = loss
        err = p - y
        w -= lr * (xs.T @ err / n + l2_lambda * w)
        b -= lr * float(err.mean())
    return LogisticModel(w, b, mean, std)


# ---------------------------------------------------------------------------
# End-to-end aggregate baseline
# ---------------------------------------------------------------------------

@dataclass
class BaselineModel:
    registry: FeatureRegistry
    binnings: list[WoeBinning]
    logistic: LogisticModel
    n_features: int = field(init=False)

    def __post_init__(self):
        self.n_features = len(self.registry.names())

    def score(self, clients: list[ClientHistory]) -> np.ndarray:
        x = feature_matrix(clients, self.registry)
        return self.logistic.predict_proba(apply_woe_matrix(self.binnings, x))


def fit_aggregate_baseline(train: list[ClientHistory], registry: FeatureRegistry | None = None,
                           n_bins: int = 10, l2_lambda: float = 1e-3, epochs: int = 400,
                           lr: float = 0.5) -> BaselineModel:
    registry = registry or FeatureRegistry.from_dataset(train)
    labels = np.array([c.label for c in train])
    x = feature_matrix(train, registry)
    binnings = fit_woe_matrix(x, labels, n_bins)
    encoded = apply_woe_matrix(binnings, x)
    logistic = train_logistic(encoded, labels, l2_lambda=l2_lambda, epochs=epochs, lr=lr)
    return BaselineModel(registry, binnings, logistic)
