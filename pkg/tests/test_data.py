"""Data model, ingestion, encoding, splitting and sampling contracts."""
from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from seqscore.data import (
    ClientHistory,
    DataError,
    SchemaSpec,
    build_negative_pool,
    build_vocabularies,
    default_embedding_dim,
    derive_and_encode,
    epoch_sample,
    ingest_csv,
    out_of_time_split,
    write_dataset_csv,
)

from conftest import make_history

HEADER = ("client_id,label,application_date,card_id,timestamp,amount,currency,"
          "country,merchant_type,card_type,issuing_branch,"
          "n_opened_debit_cards,n_opened_credit_cards")


def write_csv(tmp_path, rows, header=HEADER, name="data.csv"):
    path = tmp_path / name
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return path


def row(cid="c1", label="0", app="2018-06-01", ts="2018-01-05T10:00:00", amount="25.0",
        currency="EUR", country="FR", merchant="grocery", card="visa", branch="b1",
        card_id="k1"):
    return f"{cid},{label},{app},{card_id},{ts},{amount},{currency},{country},{merchant},{card},{branch},1,0"


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def test_ingest_sorts_out_of_order_rows(tmp_path):
    path = write_csv(tmp_path, [
        row(ts="2018-01-03T12:00:00"),
        row(ts="2018-01-01T12:00:00"),
        row(ts="2018-01-02T12:00:00"),
    ])
    clients = ingest_csv(path)
    assert len(clients) == 1
    ts = clients[0].columns.timestamp
    assert list(ts) == sorted(ts)
    assert clients[0].n_transactions == 3


def test_ingest_empty_file_with_header(tmp_path):
    path = write_csv(tmp_path, [])
    assert ingest_csv(path) == []


def test_ingest_rejects_transaction_on_application_date(tmp_path):
    path = write_csv(tmp_path, [row(ts="2018-06-01T00:30:00", app="2018-06-01")])
    with pytest.raises(DataError, match="c1"):
        ingest_csv(path)


def test_ingest_malformed_row_reports_line_number(tmp_path):
    path = write_csv(tmp_path, [row(), row(amount="not-a-number")])
    with pytest.raises(DataError, match="row 3"):
        ingest_csv(path)


def test_ingest_inconsistent_label_rejected(tmp_path):
    path = write_csv(tmp_path, [row(label="0"), row(label="1", ts="2018-01-06T10:00:00")])
    with pytest.raises(DataError, match="inconsistent label"):
        ingest_csv(path)


def test_ingest_missing_column_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("client_id,label\n", encoding="utf-8")
    with pytest.raises(DataError, match="missing required columns"):
        ingest_csv(path)


def test_ingest_epoch_second_timestamps(tmp_path):
    path = write_csv(tmp_path, [row(ts="1515150000")])
    clients = ingest_csv(path)
    assert int(clients[0].columns.timestamp[0]) == 1515150000


def test_csv_round_trip(tmp_path):
    clients = [make_history(f"c{i}", n_tx=3 + i, label=i % 2, seed=i) for i in range(4)]
    path = tmp_path / "out.csv"
    n = write_dataset_csv(clients, path)
    assert n == sum(c.n_transactions for c in clients)
    loaded = ingest_csv(path)
    assert [c.client_id for c in loaded] == [c.client_id for c in clients]
    for a, b in zip(loaded, clients):
        assert a.label == b.label
        assert a.application_date == b.application_date
        np.testing.assert_array_equal(a.columns.timestamp, b.columns.timestamp)
        np.testing.assert_allclose(a.columns.amount, b.columns.amount)
        assert list(a.columns.merchant_type) == list(b.columns.merchant_type)
        assert a.card_issue_dates == b.card_issue_dates


def test_history_rejects_unsorted_and_post_application_transactions():
    good = make_history(n_tx=3)
    cols = good.columns
    shuffled = cols.timestamp.copy()
    shuffled[0], shuffled[-1] = shuffled[-1], shuffled[0]
    from seqscore.data import TxColumns
    bad = TxColumns(cols.amount, shuffled, cols.currency, cols.country, cols.merchant_type,
                    cols.card_type, cols.issuing_branch, cols.card_id,
                    cols.n_opened_debit_cards, cols.n_opened_credit_cards)
    with pytest.raises(DataError, match="not sorted"):
        ClientHistory("x", bad, good.application_date, 0)
    with pytest.raises(DataError, match="application date"):
        ClientHistory("x", cols, date(2000, 1, 1), 0)


def test_transactions_view_materializes_records():
    client = make_history(n_tx=3)
    records = client.transactions
    assert len(records) == 3
    assert records[0].timestamp == int(client.columns.timestamp[0])
    assert records[2].merchant_type == client.columns.merchant_type[2]


# ---------------------------------------------------------------------------
# vocabularies and embedding dims
# ---------------------------------------------------------------------------

def test_vocabulary_cardinality_includes_reserved_zero(small_dataset):
    schema = build_vocabularies(small_dataset)
    f = schema.field("currency")
    assert sorted(f.vocabulary.values()) == list(range(1, len(f.vocabulary) + 1))
    assert f.cardinality == len(f.vocabulary) + 1
    assert 0 not in f.vocabulary.values()


def test_two_value_field_cardinality_three():
    clients = [make_history(n_tx=6, seed=3)]
    cols = clients[0].columns
    cols.currency[:] = np.array(["EUR", "USD", "EUR", "USD", "EUR", "USD"], dtype=object)
    schema = build_vocabularies(clients)
    assert schema.field("currency").cardinality == 3


def test_default_embedding_rule_hand_cases():
    # dim = min(16, ceil(cardinality / 2))
    assert default_embedding_dim(2) == 1
    assert default_embedding_dim(3) == 2
    assert default_embedding_dim(1000) == 16


def test_vocabularies_first_seen_order_and_determinism(small_dataset):
    a = build_vocabularies(small_dataset)
    b = build_vocabularies(small_dataset)
    assert a.to_json() == b.to_json()
    first_merchant = small_dataset[0].columns.merchant_type[0]
    assert a.field("merchant_type").vocabulary[first_merchant] == 1


def test_dim_override_and_rule(small_dataset):
    schema = build_vocabularies(small_dataset, dim_overrides={"currency": 7})
    assert schema.field("currency").dim == 7
    wk = schema.field("weekday")
    assert wk.dim == default_embedding_dim(wk.cardinality)


def test_schema_json_round_trip(small_schema):
    text = small_schema.to_json()
    again = SchemaSpec.from_json(text)
    assert again.to_json() == text
    assert again.field_names == small_schema.field_names
    assert again.scalar_features == small_schema.scalar_features


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_truncation_keeps_last_800():
    client = make_history(n_tx=900, gap_seconds=3600)
    schema = build_vocabularies([client])
    enc = derive_and_encode(client, schema)
    assert enc.valid_length == 800
    # retained suffix: the most recent 800 timestamps
    kept_first_ts = int(client.columns.timestamp[100])
    hours = enc.cat_track("hour")
    expected_first_hour = (kept_first_ts // 3600) % 24
    mapped = schema.field("hour").index_of(str(expected_first_hour))
    assert hours[0] == mapped


def test_truncation_retains_exactly_the_latest_suffix():
    client = make_history(n_tx=40, gap_seconds=7200)
    schema = build_vocabularies([client], max_sequence_length=12)
    enc = derive_and_encode(client, schema)
    assert enc.valid_length == 12
    # gaps of the retained part match the source gaps for the last 12 events
    src_gaps = np.diff(client.columns.timestamp)[-11:] / 86400.0
    np.testing.assert_allclose(enc.scal["days_since_prev"][1:], src_gaps)
    assert enc.scal["days_since_prev"][0] == 0.0


def test_single_transaction_padding_and_days_since_prev():
    client = make_history(n_tx=1)
    schema = build_vocabularies([make_history(n_tx=5)], max_sequence_length=800)
    enc = derive_and_encode(client, schema)
    assert enc.valid_length == 1
    dsp = enc.scalar_track("days_since_prev")
    assert dsp[-1] == 0.0
    assert np.all(dsp[:799] == 0.0)
    for name in schema.field_names:
        assert np.all(enc.cat_track(name)[:799] == 0)


def test_days_since_prev_36_hours_is_one_and_a_half():
    client = make_history(n_tx=2, gap_seconds=36 * 3600)
    schema = build_vocabularies([client], max_sequence_length=8)
    enc = derive_and_encode(client, schema)
    dsp = enc.scalar_track("days_since_prev")
    assert dsp[-1] == 1.5
    assert dsp[-2] == 0.0  # first retained transaction


def test_unknown_categorical_maps_to_zero(small_dataset, small_schema):
    client = make_history("new", n_tx=3, seed=99)
    client.columns.merchant_type[:] = np.array(["never-seen"] * 3, dtype=object)
    enc = derive_and_encode(client, small_schema)
    track = enc.cat_track("merchant_type")
    assert np.all(track[-3:] == 0)


def test_amount_enters_as_signed_log(small_schema):
    client = make_history(n_tx=2, amounts=np.array([np.e - 1, -(np.e - 1)]))
    enc = derive_and_encode(client, small_schema)
    track = enc.scalar_track("amount_log")
    assert abs(track[-2] - 1.0) < 1e-12
    assert abs(track[-1] + 1.0) < 1e-12


def test_days_since_issue_optional_track(small_dataset):
    schema = build_vocabularies(small_dataset, include_days_since_issue=True,
                                max_sequence_length=16)
    assert "days_since_issue" in schema.scalar_features
    client = small_dataset[0]
    enc = derive_and_encode(client, schema)
    dsi = enc.scalar_track("days_since_issue")
    issue = client.card_issue_dates["card_a"]
    first_ts = int(client.columns.timestamp[0])
    expect = (first_ts - int(np.datetime64(issue.isoformat(), "s").astype(int))) // 86400
    assert dsi[16 - client.n_transactions] == float(expect)

    # missing issue date falls back to zero
    client2 = make_history("noissue", n_tx=2)
    client2.card_issue_dates.clear()
    enc2 = derive_and_encode(client2, schema)
    assert np.all(enc2.scalar_track("days_since_issue") == 0.0)


def test_encoding_is_deterministic(small_dataset, small_schema):
    a = derive_and_encode(small_dataset[3], small_schema)
    b = derive_and_encode(small_dataset[3], small_schema)
    for name in small_schema.field_names:
        np.testing.assert_array_equal(a.cat_track(name), b.cat_track(name))
    for name in small_schema.scalar_features:
        np.testing.assert_array_equal(a.scalar_track(name), b.scalar_track(name))


def test_days_since_prev_nonnegative_everywhere(small_dataset, small_schema):
    for client in small_dataset:
        enc = derive_and_encode(client, small_schema)
        assert np.all(enc.scalar_track("days_since_prev") >= 0.0)


def test_encode_empty_client_errors(small_schema):
    client = make_history(n_tx=1)
    empty = ClientHistory("e", client.columns.tail(0), client.application_date, 0)
    with pytest.raises(DataError, match="empty"):
        derive_and_encode(empty, small_schema)


def test_index_ranges_within_cardinality(small_dataset, small_schema):
    for client in small_dataset[:5]:
        enc = derive_and_encode(client, small_schema)
        for f in small_schema.fields:
            track = enc.cat_track(f.name)
            assert track.min() >= 0 and track.max() < f.cardinality


# ---------------------------------------------------------------------------
# out-of-time split
# ---------------------------------------------------------------------------

def test_split_boundary_after_everything(small_dataset):
    with pytest.warns(UserWarning):
        train, valid = out_of_time_split(small_dataset, date(2030, 1, 1))
    assert len(train) == len(small_dataset) and valid == []


def test_split_boundary_before_everything(small_dataset):
    with pytest.warns(UserWarning):
        train, valid = out_of_time_split(small_dataset, date(2000, 1, 1))
    assert train == [] and len(valid) == len(small_dataset)


def test_split_is_exact_partition(small_dataset):
    boundary = date(2018, 6, 1)
    train, valid = out_of_time_split(small_dataset, boundary)
    assert len(train) + len(valid) == len(small_dataset)
    assert {c.client_id for c in train}.isdisjoint({c.client_id for c in valid})
    assert all(c.application_date < boundary for c in train)
    assert all(c.application_date >= boundary for c in valid)


def test_sixteen_four_month_style_partition():
    start = date(2017, 1, 1)
    clients = [make_history(f"m{i}", n_tx=2, label=i % 2,
                            app_date=start + timedelta(days=i * 30))
               for i in range(20)]
    boundary = start + timedelta(days=16 * 30)
    train, valid = out_of_time_split(clients, boundary)
    assert len(train) == 16 and len(valid) == 4


def test_split_requires_known_labels(small_dataset):
    unk = make_history("u", n_tx=2, label=None)
    with pytest.raises(DataError, match="known label"):
        out_of_time_split(small_dataset + [unk], date(2018, 6, 1))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def tiny_clients(n_pos, n_neg):
    out = []
    for i in range(n_pos):
        out.append(make_history(f"p{i}", n_tx=1, label=1, seed=1))
    for i in range(n_neg):
        out.append(make_history(f"n{i}", n_tx=1, label=0, seed=2))
    return out


def test_pool_ten_to_one():
    train = tiny_clients(50, 5000)
    pool = build_negative_pool(train, ratio=10, seed=7)
    assert len(pool.positives) == 50
    assert len(pool.negatives) == 500
    assert len({c.client_id for c in pool.negatives}) == 500


def test_pool_clamps_to_available_negatives():
    train = tiny_clients(100, 300)
    pool = build_negative_pool(train, ratio=10, seed=7)
    assert len(pool.negatives) == 300


def test_pool_deterministic_per_seed():
    train = tiny_clients(20, 400)
    a = build_negative_pool(train, ratio=10, seed=3)
    b = build_negative_pool(train, ratio=10, seed=3)
    c = build_negative_pool(train, ratio=10, seed=4)
    assert [x.client_id for x in a.negatives] == [x.client_id for x in b.negatives]
    assert [x.client_id for x in a.negatives] != [x.client_id for x in c.negatives]


def test_pool_requires_positives():
    with pytest.raises(DataError, match="no positive"):
        build_negative_pool(tiny_clients(0, 10))


def test_epoch_sample_balance_and_shuffle():
    pool = build_negative_pool(tiny_clients(40, 900), ratio=10, seed=1)
    sample = epoch_sample(pool, epoch=0, seed=5)
    labels = [c.label for c in sample]
    assert len(sample) == 80
    assert labels.count(1) == 40 and labels.count(0) == 40
    # shuffled: positives are not all at the front
    assert labels[:40].count(1) != 40


def test_epoch_sample_positive_set_fixed_negatives_vary():
    pool = build_negative_pool(tiny_clients(30, 600), ratio=10, seed=1)
    s0 = epoch_sample(pool, epoch=0, seed=5)
    s1 = epoch_sample(pool, epoch=1, seed=5)
    pos0 = sorted(c.client_id for c in s0 if c.label == 1)
    pos1 = sorted(c.client_id for c in s1 if c.label == 1)
    assert pos0 == pos1
    neg0 = sorted(c.client_id for c in s0 if c.label == 0)
    neg1 = sorted(c.client_id for c in s1 if c.label == 0)
    assert neg0 != neg1


def test_epoch_sample_uses_all_negatives_when_pool_exactly_balanced():
    pool = build_negative_pool(tiny_clients(25, 25), ratio=10, seed=1)
    for epoch in range(3):
        sample = epoch_sample(pool, epoch=epoch, seed=9)
        negs = sorted(c.client_id for c in sample if c.label == 0)
        assert negs == sorted(f"n{i}" for i in range(25))


def test_epoch_sample_deterministic():
    pool = build_negative_pool(tiny_clients(15, 200), ratio=10, seed=2)
    a = [c.client_id for c in epoch_sample(pool, epoch=3, seed=11)]
    b = [c.client_id for c in epoch_sample(pool, epoch=3, seed=11)]
    assert a == b


def test_class_balance_every_epoch():
    pool = build_negative_pool(tiny_clients(17, 333), ratio=10, seed=0)
    for epoch in range(5):
        sample = epoch_sample(pool, epoch=epoch, seed=1)
        labels = [c.label for c in sample]
        assert labels.count(1) == labels.count(0) == 17
