from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from seqscore.data import ClientHistory, TxColumns, build_vocabularies

MERCHANTS = ["grocery", "restaurant", "transport", "hotel", "electronics"]
CURRENCIES = ["EUR", "USD", "GBP"]
COUNTRIES = ["FR", "US", "DE"]
CARD_TYPES = ["classic", "gold"]
BRANCHES = ["b01", "b02", "b03"]


def make_history(client_id="c0", n_tx=5, label=0, app_date=date(2018, 6, 1),
                 seed=0, first_ts=None, gap_seconds=86400, amounts=None):
    """Small deterministic client for unit tests."""
    rng = np.random.default_rng(seed)
    app_epoch = int(np.datetime64(app_date.isoformat()).astype("datetime64[s]").astype(int))
    if first_ts is None:
        first_ts = app_epoch - gap_seconds * (n_tx + 1)
    ts = first_ts + gap_seconds * np.arange(n_tx)
    cols = TxColumns(
        amount=amounts if amounts is not None else rng.uniform(1, 200, n_tx),
        timestamp=ts,
        currency=[CURRENCIES[i % len(CURRENCIES)] for i in rng.integers(0, 3, n_tx)],
        country=[COUNTRIES[i % len(COUNTRIES)] for i in rng.integers(0, 3, n_tx)],
        merchant_type=[MERCHANTS[i] for i in rng.integers(0, len(MERCHANTS), n_tx)],
        card_type=[CARD_TYPES[i] for i in rng.integers(0, 2, n_tx)],
        issuing_branch=[BRANCHES[i] for i in rng.integers(0, 3, n_tx)],
        card_id=["card_a"] * n_tx,
        n_opened_debit_cards=np.ones(n_tx, dtype=int),
        n_opened_credit_cards=np.zeros(n_tx, dtype=int),
    )
    issue = {"card_a": app_date - timedelta(days=400)}
    return ClientHistory(client_id, cols, app_date, label, issue)


@pytest.fixture
def small_dataset():
    return [make_history(f"c{i}", n_tx=4 + i % 7, label=i % 2, seed=i,
                         app_date=date(2018, 1, 1) + timedelta(days=13 * i))
            for i in range(30)]


@pytest.fixture
def small_schema(small_dataset):
    return build_vocabularies(small_dataset, max_sequence_length=16)
