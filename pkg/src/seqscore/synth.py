"""Synthetic labeled transaction datasets with a plantable default signal.

The generator replaces proprietary data with streams whose risk signal is
controllable in two orthogonal ways:

* aggregate mode: a client's risk follows the standardized share of their
  transactions at a designated "risky" merchant subset. Any aggregate model
  can read it.
* sequential mode: a per-client standardized intensity s drives only the
  ORDER of events inside the final window before the application date: the
  window's risky-merchant events form a contiguous burst whose position
  shifts toward the application date as s grows (rising risky frequency near
  the application), and the window's inter-arrival gaps are reordered toward
  a shrinking trend. Event timestamps keep their multiset and (for merchant
  placement) stay fixed, so counts, sums, shares and gap statistics carry
  (near) zero information; only order does.
* mixed mode: the average of both standardized components.

latent_risk = logit(base_default_rate) + signal_strength * s, with labels
drawn Bernoulli(sigmoid(latent_risk)). Everything is deterministic per seed;
per-client substreams are independent of generation order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from datetime import date, datetime, timedelta, timezone

import numpy as np

from .baseline import FeatureRegistry, fit_aggregate_baseline
from .data import ClientHistory, SECONDS_PER_DAY, TxColumns, out_of_time_split, rng_from
from .metrics import roc_auc

SIGNAL_MODES = ("sequential", "aggregate", "mixed")


@dataclass
class GenConfig:
    n_clients: int = 20_000
    months_span: int = 20
    base_default_rate: float = 0.05
    signal_mode: str = "sequential"
    signal_strength: float = 2.0
    tx_count_min: int = 20
    tx_count_max: int = 600
    tx_count_shape: float = 1.25  # >1 skews the log-uniform draw toward small counts
    vocab_sizes: dict[str, int] = dc_field(default_factory=lambda: {
        "currency": 4, "country": 6, "merchant_type": 12,
        "card_type": 4, "issuing_branch": 8,
    })
    seed: int = 7
    start_date: date = date(2017, 1, 1)
    window_days: int = 60
    risky_merchant_count: int = 3
    risky_rate: float = 0.4
    placement_sharpness: float = 1.2  # scales s inside the burst-position CDF
    trend_sharpness: float = 1.2
    history_days_min: int = 90
    history_days_max: int = 400

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0.0 < self.base_default_rate < 1.0:
            raise ValueError("base_default_rate must lie in (0, 1)")
        if self.signal_mode not in SIGNAL_MODES:
            raise ValueError(f"signal_mode must be one of {SIGNAL_MODES}")
        if self.tx_count_min < 1 or self.tx_count_max < self.tx_count_min:
            raise ValueError("tx count range infeasible (need 1 <= min <= max)")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")

    @property
    def risky_merchants(self) -> list[str]:
        return [f"mt_{i:02d}" for i in range(self.risky_merchant_count)]

    @property
    def span_days(self) -> int:
        return self.months_span * 30

    def boundary_for(self, train_months: int = 16) -> date:
        return self.start_date + timedelta(days=train_months * 30)


@dataclass
class GroundTruth:
    client_ids: list[str]
    latent_risk: np.ndarray
    labels: np.ndarray

    def ceiling_auc(self, mask=None) -> float:
        """AUC of scoring clients by latent risk directly."""
        if mask is None:
            return roc_auc(self.latent_risk, self.labels)
        return roc_auc(self.latent_risk[mask], self.labels[mask])


@dataclass
class _ClientDraft:
    client_id: str
    application_date: date
    columns: TxColumns
    issue_dates: dict[str, date]
    seq_component: float
    risky_share: float


def _draw_tx_count(rng, config: GenConfig) -> int:
    u = rng.random() ** config.tx_count_shape
    ratio = config.tx_count_max / config.tx_count_min
    return int(round(config.tx_count_min * ratio ** u))


def _generate_client(index: int, config: GenConfig) -> _ClientDraft:
    rng = rng_from(config.seed, 0xC11E27, index)
    cid = f"c{index:06d}"
    vs = config.vocab_sizes

    app_date = config.start_date + timedelta(days=int(rng.integers(0, config.span_days)))
    app_epoch = int(np.datetime64(app_date.isoformat(), "s").astype(int))

    n = _draw_tx_count(rng, config)
    span = rng.uniform(config.history_days_min, config.history_days_max)
    gaps = rng.gamma(1.5, span / (max(n, 2) * 1.5), size=max(n - 1, 0))
    end_offset = rng.uniform(0.05, 2.0)
    t_last = app_epoch - int(end_offset * SECONDS_PER_DAY)
    ts = np.empty(n, dtype=np.int64)
    ts[-1] = t_last
    if n > 1:
        back = np.cumsum(gaps[::-1]) * SECONDS_PER_DAY
        ts[:-1] = t_last - back[::-1].astype(np.int64)

    s_raw = float(rng.standard_normal())

    # per-client merchant preferences; aggregate/mixed modes tilt the risky mass
    n_merchants = vs["merchant_type"]
    pref = rng.dirichlet(np.full(n_merchants, 1.2))
    if config.signal_mode in ("aggregate", "mixed"):
        tilt = float(rng.normal(0.0, 0.8))
        pref = pref.copy()
        pref[:config.risky_merchant_count] *= math.exp(tilt)
        pref /= pref.sum()

    merchant_idx = rng.choice(n_merchants, size=n, p=pref)

    window_start = app_epoch - config.window_days * SECONDS_PER_DAY
    in_window = np.flatnonzero(ts >= window_start)

    if config.signal_mode in ("sequential", "mixed") and in_window.size:
        n_w = in_window.size
        if config.signal_mode == "sequential":
            p_risky = config.risky_rate
        else:
            p_risky = float(np.clip(pref[:config.risky_merchant_count].sum(), 0.05, 0.9))
        k = int(rng.binomial(n_w, p_risky))
        # risky events form a contiguous burst; its position encodes s
        # (late burst = rising risky frequency near the application date).
        # The count k is s-free, so the window multiset carries no signal.
        if k == 0 or k >= n_w:
            risky_slots = np.arange(k)
        else:
            centre = 0.5 * (1.0 + math.erf(config.placement_sharpness * s_raw / math.sqrt(2.0)))
            start = int(round(centre * (n_w - k)))
            risky_slots = np.arange(start, start + k)
        u = (np.arange(n_w) + 0.5) / n_w
        non_risky_pref = pref.copy()
        non_risky_pref[:config.risky_merchant_count] = 0.0
        if non_risky_pref.sum() <= 0:
            non_risky_pref = np.full(n_merchants, 1.0)
            non_risky_pref[:config.risky_merchant_count] = 0.0
        non_risky_pref /= non_risky_pref.sum()
        window_merchants = rng.choice(n_merchants, size=n_w, p=non_risky_pref)
        if risky_slots.size:
            window_merchants[risky_slots] = rng.choice(config.risky_merchant_count,
                                                       size=risky_slots.size)
        merchant_idx[in_window] = window_merchants

        # reorder in-window gaps toward a shrinking trend for high s
        if n_w > 2 and config.trend_sharpness > 0:
            first = in_window[0]
            w_ts = ts[in_window]
            w_gaps = np.diff(w_ts)
            slot_pref = config.trend_sharpness * s_raw * (1.0 - u[1:]) + rng.standard_normal(n_w - 1)
            order = np.argsort(-slot_pref, kind="stable")
            reordered = np.empty_like(w_gaps)
            reordered[order] = np.sort(w_gaps)[::-1]  # largest gaps at preferred slots
            ts[in_window[1:]] = ts[first] + np.cumsum(reordered)

    share = float(np.count_nonzero(merchant_idx < config.risky_merchant_count)) / n
    merchants = np.array([f"mt_{m:02d}" for m in merchant_idx], dtype=object)

    home_cur = int(rng.integers(vs["currency"]))
    home_co = int(rng.integers(vs["country"]))
    cur_idx = np.where(rng.random(n) < 0.85, home_cur, rng.integers(0, vs["currency"], n))
    co_idx = np.where(rng.random(n) < 0.9, home_co, rng.integers(0, vs["country"], n))

    n_cards = 2 if rng.random() < 0.2 and n >= 4 else 1
    card_ids = np.empty(n, dtype=object)
    card_types = np.empty(n, dtype=object)
    branches = np.empty(n, dtype=object)
    issue_dates: dict[str, date] = {}
    switch = int(rng.integers(1, n)) if n_cards == 2 else n
    first_date = datetime.fromtimestamp(int(ts[0]), tz=timezone.utc).date() if n else app_date
    for j in range(n_cards):
        card = f"{cid}_k{j}"
        ct = f"ct_{int(rng.integers(vs['card_type']))}"
        br = f"br_{int(rng.integers(vs['issuing_branch']))}"
        lo, hi = (0, switch) if j == 0 else (switch, n)
        card_ids[lo:hi] = card
        card_types[lo:hi] = ct
        branches[lo:hi] = br
        issue_dates[card] = first_date - timedelta(days=int(rng.integers(30, 600)))
    n_debit = np.ones(n, dtype=np.int64)
    if n_cards == 2:
        n_debit[switch:] = 2
    n_credit = np.full(n, int(rng.random() < 0.3), dtype=np.int64)

    scale = 8.0 + 6.0 * merchant_idx
    amounts = np.round(rng.lognormal(np.log(scale), 0.8), 2)

    cols = TxColumns(
        amounts, ts,
        np.array([f"cur_{i}" for i in cur_idx], dtype=object),
        np.array([f"co_{i}" for i in co_idx], dtype=object),
        merchants, card_types, branches, card_ids, n_debit, n_credit,
    )
    return _ClientDraft(cid, app_date, cols, issue_dates, s_raw, share)


def _standardize(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std == 0.0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def generate_dataset(config: GenConfig) -> tuple[list[ClientHistory], GroundTruth]:
    """Deterministic per seed; clients carry labels drawn from the planted
    latent risk."""
    drafts = [_generate_client(i, config) for i in range(config.n_clients)]

    seq = _standardize(np.array([d.seq_component for d in drafts]))
    agg = _standardize(np.array([d.risky_share for d in drafts]))
    if config.signal_mode == "sequential":
        s = seq
    elif config.signal_mode == "aggregate":
        s = agg
    else:
        s = (seq + agg) / 2.0
    base_logit = math.log(config.base_default_rate / (1.0 - config.base_default_rate))
    latent = base_logit + config.signal_strength * s
    label_rng = rng_from(config.seed, 0x1AB371)
    labels = (label_rng.random(config.n_clients) < 1.0 / (1.0 + np.exp(-latent))).astype(np.int64)

    clients = [
        ClientHistory(d.client_id, d.columns, d.application_date, int(labels[i]), d.issue_dates)
        for i, d in enumerate(drafts)
    ]
    truth = GroundTruth([d.client_id for d in drafts], latent, labels)
    return clients, truth


def write_ground_truth_csv(truth: GroundTruth, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "latent_risk", "label"])
        for cid, risk, label in zip(truth.client_ids, truth.latent_risk, truth.labels):
            writer.writerow([cid, repr(float(risk)), int(label)])


@dataclass
class LeakAuditReport:
    ceiling_auc: float
    baseline_auc: float
    margin: float
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] baseline_auc={self.baseline_auc:.4f} "
                f"ceiling_auc={self.ceiling_auc:.4f} required_margin={self.margin:.3f}")


def signal_leak_audit(clients: list[ClientHistory], truth: GroundTruth,
                      boundary: date, margin: float = 0.05,
                      registry: FeatureRegistry | None = None) -> LeakAuditReport:
    """Certify how much of the planted signal the aggregate baseline can read.

    Trains the WoE-logistic baseline out of time and compares its validation
    AUC against the latent-risk ceiling; passes when the baseline stays at
    least `margin` below the ceiling.
    """
    train, valid = out_of_time_split(clients, boundary)
    baseline = fit_aggregate_baseline(train, registry)
    valid_labels = np.array([c.label for c in valid])
    baseline_auc = roc_auc(baseline.score(valid), valid_labels)
    id_to_pos = {cid: i for i, cid in enumerate(truth.client_ids)}
    valid_mask = np.zeros(len(truth.client_ids), dtype=bool)
    for c in valid:
        valid_mask[id_to_pos[c.client_id]] = True
    ceiling = truth.ceiling_auc(valid_mask)
    return LeakAuditReport(ceiling, baseline_auc, margin, baseline_auc <= ceiling - margin)
