"""Transaction/client data model, CSV ingestion, feature derivation, sequence
encoding, and the out-of-time split / undersampling protocols.

Client histories are stored column-wise (numpy arrays per attribute) so that
encoding and aggregate-feature computation stay vectorized; the record view
is materialized on demand.
"""
from __future__ import annotations

import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, timezone

import numpy as np

SECONDS_PER_DAY = 86400

RAW_CATEGORICAL_FIELDS = ("currency", "country", "merchant_type", "card_type", "issuing_branch")
TIME_CATEGORICAL_FIELDS = ("hour", "weekday", "month")
CATEGORICAL_FIELDS = RAW_CATEGORICAL_FIELDS + TIME_CATEGORICAL_FIELDS
BASE_SCALAR_FEATURES = ("amount_log", "n_opened_debit_cards", "n_opened_credit_cards", "days_since_prev")
OPTIONAL_SCALAR_FEATURES = ("days_since_issue",)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


def rng_from(*keys: int) -> np.random.Generator:
    """Deterministic generator derived from an ordered key tuple."""
    return np.random.default_rng(np.random.SeedSequence([k & 0xFFFFFFFFFFFFFFFF for k in keys]))


@dataclass(frozen=True, slots=True)
class TransactionRecord:
    """One card event; categorical attributes are opaque string codes."""

    amount: float
    currency: str
    country: str
    timestamp: int
    merchant_type: str
    card_type: str
    issuing_branch: str
    n_opened_debit_cards: int
    n_opened_credit_cards: int
    card_id: str


class TxColumns:
    """Column store for one client's transactions, sorted by timestamp."""

    __slots__ = ("amount", "timestamp", "currency", "country", "merchant_type",
                 "card_type", "issuing_branch", "card_id",
                 "n_opened_debit_cards", "n_opened_credit_cards")

    def __init__(self, amount, timestamp, currency, country, merchant_type,
                 card_type, issuing_branch, card_id,
                 n_opened_debit_cards, n_opened_credit_cards):
        self.amount = np.asarray(amount, dtype=np.float64)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.currency = np.asarray(currency, dtype=object)
        self.country = np.asarray(country, dtype=object)
        self.merchant_type = np.asarray(merchant_type, dtype=object)
        self.card_type = np.asarray(card_type, dtype=object)
        self.issuing_branch = np.asarray(issuing_branch, dtype=object)
        self.card_id = np.asarray(card_id, dtype=object)
        self.n_opened_debit_cards = np.asarray(n_opened_debit_cards, dtype=np.int64)
        self.n_opened_credit_cards = np.asarray(n_opened_credit_cards, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.timestamp.size)

    def sorted_by_time(self) -> "TxColumns":
        order = np.argsort(self.timestamp, kind="stable")
        if np.array_equal(order, np.arange(len(self))):
            return self
        return TxColumns(*(getattr(self, name)[order] for name in self.__slots__))

    def tail(self, n: int) -> "TxColumns":
        if len(self) <= n:
            return self
        start = len(self) - n
        return TxColumns(*(getattr(self, name)[start:] for name in self.__slots__))

    @classmethod
    def from_records(cls, records) -> "TxColumns":
        return cls(
            [r.amount for r in records], [r.timestamp for r in records],
            [r.currency for r in records], [r.country for r in records],
            [r.merchant_type for r in records], [r.card_type for r in records],
            [r.issuing_branch for r in records], [r.card_id for r in records],
            [r.n_opened_debit_cards for r in records],
            [r.n_opened_credit_cards for r in records],
        )


class ClientHistory:
    """A labeled, time-ordered transaction sequence of one loan applicant.

    label is 1 (default), 0 (non-default) or None (unknown). All transactions
    must precede the application date when one is known.
    """

    __slots__ = ("client_id", "columns", "application_date", "label", "card_issue_dates")

    def __init__(self, client_id: str, columns: TxColumns,
                 application_date: date | None, label: int | None,
                 card_issue_dates: dict[str, date] | None = None,
                 validate: bool = True):
        self.client_id = client_id
        self.columns = columns
        self.application_date = application_date
        self.label = label
        self.card_issue_dates = card_issue_dates or {}
        if validate:
            self._validate()

    def _validate(self) -> None:
        ts = self.columns.timestamp
        if ts.size and np.any(np.diff(ts) < 0):
            raise DataError(f"client {self.client_id}: transactions not sorted by timestamp")
        if not np.all(np.isfinite(self.columns.amount)):
            raise DataError(f"client {self.client_id}: non-finite transaction amount")
        if self.label not in (0, 1, None):
            raise DataError(f"client {self.client_id}: label must be 0, 1 or unknown")
        if self.application_date is not None and ts.size:
            cutoff = _date_to_epoch(self.application_date)
            if int(ts.max()) >= cutoff:
                raise DataError(
                    f"client {self.client_id}: transaction on/after application date "
                    f"{self.application_date.isoformat()}"
                )

    @property
    def transactions(self) -> tuple[TransactionRecord, ...]:
        c = self.columns
        return tuple(
            TransactionRecord(
                float(c.amount[i]), c.currency[i], c.country[i], int(c.timestamp[i]),
                c.merchant_type[i], c.card_type[i], c.issuing_branch[i],
                int(c.n_opened_debit_cards[i]), int(c.n_opened_credit_cards[i]),
                c.card_id[i],
            )
            for i in range(len(c))
        )

    @property
    def n_transactions(self) -> int:
        return len(self.columns)

    @classmethod
    def from_records(cls, client_id, records, application_date, label,
                     card_issue_dates=None) -> "ClientHistory":
        cols = TxColumns.from_records(records).sorted_by_time()
        return cls(client_id, cols, application_date, label, card_issue_dates)


def _date_to_epoch(d: date) -> int:
    return int(datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp())


# ---------------------------------------------------------------------------
# Schema: per-field vocabularies and embedding dimensions
# ---------------------------------------------------------------------------

def default_embedding_dim(cardinality: int) -> int:
    return min(16, math.ceil(cardinality / 2))


@dataclass
class CategoricalField:
    name: str
    vocabulary: dict[str, int]  # value -> index in 1..K; 0 reserved for padding/unknown
    dim: int

    @property
    def cardinality(self) -> int:
        return len(self.vocabulary) + 1

    def index_of(self, value) -> int:
        return self.vocabulary.get(value, 0)


@dataclass
class SchemaSpec:
    """Per-field vocabularies, embedding dims, scalar list and max length."""

    fields: list[CategoricalField]
    scalar_features: list[str]
    max_sequence_length: int = 800

    def field(self, name: str) -> CategoricalField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def input_width(self) -> int:
        return sum(f.dim for f in self.fields) + len(self.scalar_features)

    def to_json(self) -> str:
        doc = {
            "max_sequence_length": self.max_sequence_length,
            "scalar_features": list(self.scalar_features),
            "fields": [
                {
                    "name": f.name,
                    "dim": f.dim,
                    # index order, so vocabularies reload byte-stably
                    "values": [v for v, _ in sorted(f.vocabulary.items(), key=lambda kv: kv[1])],
                }
                for f in self.fields
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SchemaSpec":
        doc = json.loads(text)
        fields = [
            CategoricalField(f["name"], {v: i + 1 for i, v in enumerate(f["values"])}, f["dim"])
            for f in doc["fields"]
        ]
        return cls(fields, list(doc["scalar_features"]), int(doc["max_sequence_length"]))


def _time_parts(ts: np.ndarray) -> dict[str, np.ndarray]:
    """hour / weekday / month extracted in UTC from epoch seconds."""
    days = ts // SECONDS_PER_DAY
    hour = (ts // 3600) % 24
    weekday = (days + 3) % 7  # epoch day 0 was a Thursday; Monday = 0
    month = ts.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12 + 1
    return {"hour": hour, "weekday": weekday, "month": month}


def _first_seen_unique(col: np.ndarray) -> list:
    _, first_idx = np.unique(col, return_index=True)
    return list(col[np.sort(first_idx)])


def build_vocabularies(
    dataset: list[ClientHistory],
    embed_rule=None,
    dim_overrides: dict[str, int] | None = None,
    include_days_since_issue: bool = False,
    max_sequence_length: int = 800,
) -> SchemaSpec:
    """Assign indices 1..K to each field's distinct values in first-seen order.

    embed_rule maps cardinality (|vocabulary| + 1, the reserved index counts)
    to the embedding dimension; default min(16, ceil(K/2)). dim_overrides wins
    per field.
    """
    if not dataset:
        raise DataError("build_vocabularies: empty dataset")
    rule = embed_rule or default_embedding_dim
    overrides = dim_overrides or {}
    vocabs: dict[str, dict[str, int]] = {name: {} for name in CATEGORICAL_FIELDS}
    for client in dataset:
        cols = client.columns
        if len(cols) == 0:
            continue
        for name in RAW_CATEGORICAL_FIELDS:
            vocab = vocabs[name]
            for value in _first_seen_unique(getattr(cols, name)):
                if value not in vocab:
                    vocab[value] = len(vocab) + 1
        for name, values in _time_parts(cols.timestamp).items():
            vocab = vocabs[name]
            for value in _first_seen_unique(values):
                key = str(int(value))
                if key not in vocab:
                    vocab[key] = len(vocab) + 1
    fields = []
    for name in CATEGORICAL_FIELDS:
        vocab = vocabs[name]
        cardinality = len(vocab) + 1
        dim = overrides.get(name, rule(cardinality))
        if dim < 1:
            raise DataError(f"embedding dim for field {name} must be >= 1")
        fields.append(CategoricalField(name, vocab, dim))
    scalars = list(BASE_SCALAR_FEATURES)
    if include_days_since_issue:
        scalars.append("days_since_issue")
    return SchemaSpec(fields, scalars, max_sequence_length)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

class EncodedSequence:
    """Fixed-length index/scalar tracks with a prefix-padding convention.

    Tracks are stored compactly (real positions only); full-length views
    materialize the padding prefix (index 0 / scalar 0.0) on demand so the
    last position always holds the most recent transaction.
    """

    __slots__ = ("cat", "scal", "valid_length", "max_length")

    def __init__(self, cat: dict[str, np.ndarray], scal: dict[str, np.ndarray],
                 valid_length: int, max_length: int):
        self.cat = cat
        self.scal = scal
        self.valid_length = valid_length
        self.max_length = max_length

    def cat_track(self, name: str) -> np.ndarray:
        out = np.zeros(self.max_length, dtype=np.int64)
        if self.valid_length:
            out[self.max_length - self.valid_length:] = self.cat[name]
        return out

    def scalar_track(self, name: str) -> np.ndarray:
        out = np.zeros(self.max_length, dtype=np.float64)
        if self.valid_length:
            out[self.max_length - self.valid_length:] = self.scal[name]
        return out

    def replaced(self, keep: np.ndarray) -> "EncodedSequence":
        """New sequence keeping the selected (ordered) real positions."""
        return EncodedSequence(
            {k: v[keep] for k, v in self.cat.items()},
            {k: v[keep] for k, v in self.scal.items()},
            int(np.count_nonzero(keep)) if keep.dtype == bool else len(keep),
            self.max_length,
        )


def derive_and_encode(client: ClientHistory, schema: SchemaSpec) -> EncodedSequence:
    """Truncate to the last max_sequence_length transactions, derive features,
    and map categorical values through the schema vocabularies.

    days_since_prev is 0 for the first retained transaction; unknown
    categorical values map to the reserved index 0.
    """
    if client.n_transactions == 0:
        raise DataError(f"client {client.client_id}: cannot encode an empty transaction list")
    cols = client.columns.tail(schema.max_sequence_length)
    n = len(cols)
    ts = cols.timestamp

    cat: dict[str, np.ndarray] = {}
    time_values = _time_parts(ts)
    for f in schema.fields:
        if f.name in RAW_CATEGORICAL_FIELDS:
            raw = getattr(cols, f.name)
            uniq, inverse = np.unique(raw, return_inverse=True)
            mapped = np.array([f.index_of(v) for v in uniq], dtype=np.int32)
            cat[f.name] = mapped[inverse]
        else:
            values = time_values[f.name]
            table = np.zeros(int(values.max()) + 1 if n else 1, dtype=np.int32)
            for v in np.unique(values):
                table[int(v)] = f.index_of(str(int(v)))
            cat[f.name] = table[values]

    scal: dict[str, np.ndarray] = {}
    amount = cols.amount
    scal["amount_log"] = np.sign(amount) * np.log1p(np.abs(amount))
    gaps = np.zeros(n, dtype=np.float64)
    if n > 1:
        gaps[1:] = np.diff(ts) / SECONDS_PER_DAY
    scal["days_since_prev"] = gaps
    scal["n_opened_debit_cards"] = cols.n_opened_debit_cards.astype(np.float64)
    scal["n_opened_credit_cards"] = cols.n_opened_credit_cards.astype(np.float64)
    if "days_since_issue" in schema.scalar_features:
        issue_epoch = {cid: _date_to_epoch(d) for cid, d in client.card_issue_dates.items()}
        dsi = np.zeros(n, dtype=np.float64)
        for i, cid in enumerate(cols.card_id):
            if cid in issue_epoch:
                dsi[i] = float((int(ts[i]) - issue_epoch[cid]) // SECONDS_PER_DAY)
        scal["days_since_issue"] = dsi
    scal = {name: scal[name] for name in schema.scalar_features}

    for name, track in scal.items():
        if not np.all(np.isfinite(track)):
            raise DataError(f"client {client.client_id}: non-finite values in scalar track {name}")
    return EncodedSequence(cat, scal, n, schema.max_sequence_length)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

REQUIRED_COLUMNS = (
    "client_id", "label", "application_date", "card_id", "timestamp", "amount",
    "currency", "country", "merchant_type", "card_type", "issuing_branch",
    "n_opened_debit_cards", "n_opened_credit_cards",
)
OPTIONAL_COLUMNS = ("card_issue_date",)


@dataclass
class CsvColumns:
    """Maps the canonical column names onto the file's header names."""

    mapping: dict[str, str] = field(default_factory=dict)

    def source(self, canonical: str) -> str:
        return self.mapping.get(canonical, canonical)


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(f"bad timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_date(text: str) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError as exc:
        raise ValueError(f"bad date {text!r}") from exc


def ingest_csv(path, columns: CsvColumns | None = None, *, for_scoring: bool = False) -> list[ClientHistory]:
    """Read the transaction CSV into per-client, time-sorted histories.

    In scoring mode labels and application dates become optional and a row
    with empty timestamp+amount registers a client with zero transactions.
    """
    columns = columns or CsvColumns()
    required = list(REQUIRED_COLUMNS)
    if for_scoring:
        required = [c for c in required if c not in ("label", "application_date")]
    groups: dict[str, dict] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (no header)") from None
        pos = {name: i for i, name in enumerate(header)}
        missing = [c for c in required if columns.source(c) not in pos]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        col = {c: pos[columns.source(c)] for c in required}
        for c in OPTIONAL_COLUMNS + ("label", "application_date"):
            if c not in col and columns.source(c) in pos:
                col[c] = pos[columns.source(c)]

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                cid = row[col["client_id"]]
                g = groups.get(cid)
                if g is None:
                    g = {name: [] for name in ("amount", "timestamp", "currency", "country",
                                               "merchant_type", "card_type", "issuing_branch",
                                               "card_id", "n_debit", "n_credit")}
                    g["label"] = None
                    g["app_date"] = None
                    g["issue_dates"] = {}
                    groups[cid] = g
                    order.append(cid)

                if "label" in col:
                    raw_label = row[col["label"]].strip()
                    label = None if raw_label in ("", "unknown") else int(raw_label)
                    if label not in (0, 1, None):
                        raise ValueError(f"bad label {raw_label!r}")
                    if g["label"] is None:
                        g["label"] = label
                    elif label is not None and label != g["label"]:
                        raise DataError(f"row {line_no}: inconsistent label for client {cid}")
                if "application_date" in col and row[col["application_date"]].strip():
                    app = _parse_date(row[col["application_date"]])
                    if g["app_date"] is None:
                        g["app_date"] = app
                    elif app != g["app_date"]:
                        raise DataError(f"row {line_no}: inconsistent application_date for client {cid}")

                ts_text = row[col["timestamp"]].strip()
                amount_text = row[col["amount"]].strip()
                if not ts_text and not amount_text:
                    if for_scoring:
                        continue  # zero-transaction marker row
                    raise ValueError("empty timestamp and amount")
                amount = float(amount_text)
                if not math.isfinite(amount):
                    raise ValueError(f"non-finite amount {amount_text!r}")
                card_id = sys.intern(row[col["card_id"]])
                if "card_issue_date" in col and row[col["card_issue_date"]].strip():
                    issue = _parse_date(row[col["card_issue_date"]])
                    known = g["issue_dates"].get(card_id)
                    if known is not None and known != issue:
                        raise DataError(f"row {line_no}: conflicting issue date for card {card_id}")
                    g["issue_dates"][card_id] = issue
                g["amount"].append(amount)
                g["timestamp"].append(_parse_timestamp(ts_text))
                g["currency"].append(sys.intern(row[col["currency"]]))
                g["country"].append(sys.intern(row[col["country"]]))
                g["merchant_type"].append(sys.intern(row[col["merchant_type"]]))
                g["card_type"].append(sys.intern(row[col["card_type"]]))
                g["issuing_branch"].append(sys.intern(row[col["issuing_branch"]]))
                g["card_id"].append(card_id)
                g["n_debit"].append(int(row[col["n_opened_debit_cards"]]))
                g["n_credit"].append(int(row[col["n_opened_credit_cards"]]))
            except DataError:
                raise
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: malformed row {line_no}: {exc}") from None

    clients = []
    for cid in order:
        g = groups[cid]
        cols = TxColumns(g["amount"], g["timestamp"], g["currency"], g["country"],
                         g["merchant_type"], g["card_type"], g["issuing_branch"],
                         g["card_id"], g["n_debit"], g["n_credit"]).sorted_by_time()
        clients.append(ClientHistory(cid, cols, g["app_date"], g["label"], g["issue_dates"]))
    return clients


def write_dataset_csv(clients: list[ClientHistory], path) -> int:
    """Emit the ingestion CSV format (RFC 4180, UTF-8). Returns rows written."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + ["card_issue_date"])
        for client in clients:
            c = client.columns
            label = "" if client.label is None else str(client.label)
            app = "" if client.application_date is None else client.application_date.isoformat()
            for i in range(len(c)):
                card = c.card_id[i]
                issue = client.card_issue_dates.get(card)
                writer.writerow([
                    client.client_id, label, app, card, int(c.timestamp[i]),
                    repr(float(c.amount[i])), c.currency[i], c.country[i],
                    c.merchant_type[i], c.card_type[i], c.issuing_branch[i],
                    int(c.n_opened_debit_cards[i]), int(c.n_opened_credit_cards[i]),
                    issue.isoformat() if issue is not None else "",
                ])
                n += 1
    return n


# ---------------------------------------------------------------------------
# Out-of-time split and imbalance sampling
# ---------------------------------------------------------------------------

def out_of_time_split(dataset: list[ClientHistory], boundary: date):
    """Partition by application date: train strictly before the boundary."""
    for client in dataset:
        if client.application_date is None or client.label is None:
            raise DataError(f"client {client.client_id}: split needs application_date and a known label")
    train = [c for c in dataset if c.application_date < boundary]
    valid = [c for c in dataset if c.application_date >= boundary]
    if dataset and (not train or not valid):
        warnings.warn(
            f"out_of_time_split: boundary {boundary.isoformat()} leaves an empty side "
            f"(train={len(train)}, valid={len(valid)})",
            stacklevel=2,
        )
    return train, valid


@dataclass(frozen=True)
class SamplingPool:
    """All positives plus an undersampled negative pool."""

    positives: tuple
    negatives: tuple


def build_negative_pool(train: list[ClientHistory], ratio: int = 10, seed: int = 0) -> SamplingPool:
    """Keep every positive and ratio * P negatives sampled without replacement."""
    positives = [c for c in train if c.label == 1]
    negatives = [c for c in train if c.label == 0]
    if not positives:
        raise DataError("build_negative_pool: no positive cases in the training set")
    n_keep = min(ratio * len(positives), len(negatives))
    rng = rng_from(seed, 0x9E00)
    chosen = rng.choice(len(negatives), size=n_keep, replace=False)
    return SamplingPool(tuple(positives), tuple(negatives[i] for i in chosen))


def epoch_sample(pool: SamplingPool, epoch: int, seed: int) -> list:
    """Every positive once plus an equal number of pool negatives, shuffled."""
    p = len(pool.positives)
    if len(pool.negatives) < p:
        raise DataError(
            f"epoch_sample: pool has {len(pool.negatives)} negatives for {p} positives"
        )
    rng = rng_from(seed, 0xE90C, epoch)
    chosen = rng.choice(len(pool.negatives), size=p, replace=False)
    batch = list(pool.positives) + [pool.negatives[i] for i in chosen]
    rng.shuffle(batch)
    return batch
