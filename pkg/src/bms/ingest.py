"""CSV ingestion, field transforms and synthetic dataset generators.

A :class:`DatasetSchema` lists the raw CSV columns of a dataset and the derived
attribute fields, each produced by one :class:`FieldTransform`. Records keep
their raw column values; :meth:`DatasetSchema.tokens` turns a record into
attribute tokens.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .core import AttributeSpace, BehaviorRecord, normalize_token
from .errors import DataError, InvalidAmount, InvalidTime, NoLabels, SchemaMismatch

log = logging.getLogger(__name__)

TRANSFORM_KINDS = (
    "identity",
    "date-split",
    "hour-minute",
    "date-difference",
    "hour-bin",
    "month-bin",
    "decimal-bucket",
    "count-class",
    "decade",
    "prefix",
)

DATE_FORMATS = ("%m/%d/%Y %I:%M:%S %p", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y")

# Date Difference tokens: upper bound (inclusive, days) -> token
DATE_DIFF_BINS = ((0, "0"), (1, "1"), (7, "2-7"), (30, "8-30"))


def _blank(raw: Any) -> bool:
    return raw is None or (isinstance(raw, str) and not raw.strip())


def parse_date(raw: str) -> datetime:
    text = str(raw).strip()
    for fmt in DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise DataError(f"unparsable date {raw!r}")


def split_datetime(raw: str) -> dict[str, int]:
    d = parse_date(raw)
    return {"year": d.year, "month": d.month, "day": d.day}


def date_difference(date_rptd: str, date_occ: str) -> int:
    """Whole days from occurrence to report. Negative values are logged, not rejected."""
    days = (parse_date(date_rptd).date() - parse_date(date_occ).date()).days
    if days < 0:
        log.warning("negative date difference %d (%s before %s)", days, date_rptd, date_occ)
    return days


def date_difference_token(days: int) -> str:
    if days < 0:
        return "neg"
    for upper, token in DATE_DIFF_BINS:
        if days <= upper:
            return token
    return "31+"


def extract_hm(time_occ: Any) -> dict[str, int]:
    """Military time ("2230", "145", "0") to hour and minute."""
    text = str(time_occ).strip()
    if not text.isdigit() or len(text) > 4:
        raise InvalidTime(f"not a 1-4 digit military time: {time_occ!r}")
    text = text.zfill(4)
    hour, minute = int(text[:2]), int(text[2:])
    if hour > 23 or minute > 59:
        raise InvalidTime(f"time out of range: {time_occ!r}")
    return {"hour": hour, "minute": minute}


def decimal_bucket(amount: float) -> str:
    amount = float(amount)
    if math.isnan(amount) or amount < 0:
        raise InvalidAmount(f"amount must be a non-negative number, got {amount!r}")
    if amount == 0:
        return "zero"
    if amount < 1:
        return "sub1"
    if math.isinf(amount):
        raise InvalidAmount("infinite amount")
    # digit count of the integer part avoids log10 rounding at exact powers of ten
    return f"e{len(str(int(amount))) - 1}"


def count_class(clicks: int) -> int:
    clicks = int(clicks)
    if clicks < 0:
        raise DataError("click count must be non-negative")
    if clicks < 20:
        return 0
    if clicks < 50:
        return 1
    if clicks < 100:
        return 2
    return 3


def _utc(ts: Any) -> datetime | None:
    value = float(ts)
    if value <= 0:
        return None
    return datetime.fromtimestamp(value, tz=timezone.utc)


@dataclass(frozen=True)
class FieldTransform:
    kind: str
    sources: tuple[str, ...]
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise SchemaMismatch(f"unknown transform kind {self.kind!r}")
        want = 2 if self.kind == "date-difference" else 1
        if len(self.sources) != want:
            raise SchemaMismatch(f"{self.kind} takes {want} source column(s), got {list(self.sources)}")

    def apply(self, values: Mapping[str, Any]) -> str | None:
        """Token for this field, ``None`` when a source value is missing."""
        raws = [values.get(s) for s in self.sources]
        if any(_blank(r) for r in raws):
            return None
        raw = raws[0]
        kind = self.kind
        if kind == "identity":
            return normalize_token(raw) or None
        if kind == "date-split":
            part = self.params.get("part", "month")
            parts = split_datetime(raw)
            if part == "month-day":
                return f"{parts['month']:02d}-{parts['day']:02d}"
            return str(parts[part])
        if kind == "hour-minute":
            return str(extract_hm(raw)[self.params.get("part", "hour")])
        if kind == "date-difference":
            return date_difference_token(date_difference(raws[0], raws[1]))
        if kind == "hour-bin":
            moment = _utc(raw)
            return None if moment is None else str(moment.hour)
        if kind == "month-bin":
            moment = _utc(raw)
            return None if moment is None else f"{moment.year:04d}-{moment.month:02d}"
        if kind == "decimal-bucket":
            try:
                return decimal_bucket(float(raw))
            except ValueError as exc:
                raise InvalidAmount(str(exc)) from None
        if kind == "count-class":
            return str(count_class(int(float(raw))))
        if kind == "decade":
            age = int(float(raw))
            return None if age <= 0 else f"{(age // 10) * 10}s"
        if kind == "prefix":
            return normalize_token(str(raw).strip()[: int(self.params.get("length", 1))]) or None
        raise AssertionError(kind)


@dataclass
class DatasetSchema:
    name: str
    columns: list[str]
    fields: list[tuple[str, FieldTransform]]
    id_field: str | None = None
    label_field: str | None = None
    optional: frozenset[str] = frozenset()
    version: int = 1

    def __post_init__(self):
        cols = set(self.columns)
        for fname, tf in self.fields:
            missing = [s for s in tf.sources if s not in cols]
            if missing:
                raise SchemaMismatch(f"field {fname!r} reads unknown columns {missing}")
            if self.label_field is not None and self.label_field in tf.sources:
                raise SchemaMismatch(f"field {fname!r} reads the label column")
        names = [f for f, _ in self.fields]
        if len(set(names)) != len(names):
            raise SchemaMismatch("duplicate attribute field names")

    @property
    def field_names(self) -> list[str]:
        return [f for f, _ in self.fields]

    @property
    def required_columns(self) -> list[str]:
        return [c for c in self.columns if c not in self.optional]

    def tokens(self, record: BehaviorRecord) -> dict[str, str | None]:
        return {name: tf.apply(record.values) for name, tf in self.fields}

    def make_record(self, record_id: str, values: Mapping[str, Any], label: str | None = None) -> BehaviorRecord:
        unknown = [k for k in values if k not in self.columns]
        if unknown:
            raise SchemaMismatch(f"columns not in schema {self.name!r}: {unknown}")
        return BehaviorRecord(str(record_id), dict(values), label)

    @classmethod
    def from_dict(cls, data: Mapping) -> "DatasetSchema":
        fields = []
        for spec in data["fields"]:
            src = spec["source"]
            sources = tuple(src) if isinstance(src, (list, tuple)) else (src,)
            params = {k: v for k, v in spec.items() if k not in ("name", "kind", "source")}
            fields.append((spec["name"], FieldTransform(spec["kind"], sources, params)))
        return cls(
            name=data["name"],
            columns=list(data["columns"]),
            fields=fields,
            id_field=data.get("id"),
            label_field=data.get("label"),
            optional=frozenset(data.get("optional", ())),
            version=int(data.get("version", 1)),
        )


def load_schema(name_or_path: str | Path) -> DatasetSchema:
    """Load a shipped schema by name (``crime``, ``fraud``, ...) or a YAML path."""
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        try:
            text = (resources.files("bms") / "configs" / "schemas" / f"{name_or_path}.yaml").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise SchemaMismatch(f"no shipped schema named {name_or_path!r}") from None
    return DatasetSchema.from_dict(yaml.safe_load(text))


@dataclass
class Diagnostic:
    row: int
    message: str


def read_csv(path: str | Path, schema: DatasetSchema, diagnostics: list | None = None) -> list[BehaviorRecord]:
    """Read one record per data row, in file order.

    Rows whose values fail a transform, or that repeat a record id, are dropped
    and reported in ``diagnostics`` (1-based data row numbers).
    """
    diagnostics = diagnostics if diagnostics is not None else []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    records: list[BehaviorRecord] = []
    seen: set[str] = set()
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.required_columns if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: header lacks columns {missing}")
        keep = [c for c in schema.columns if c in header]
        for rowno, row in enumerate(reader, start=1):
            values = {c: (None if _blank(row.get(c)) else row[c]) for c in keep}
            rid = values.get(schema.id_field) if schema.id_field else None
            rid = str(rid) if rid is not None else f"row{rowno}"
            label = None
            if schema.label_field and schema.label_field in values:
                label = values[schema.label_field]
                label = None if label is None else str(label).strip()
            record = BehaviorRecord(rid, values, label)
            try:
                schema.tokens(record)
            except DataError as exc:
                diagnostics.append(Diagnostic(rowno, str(exc)))
                log.warning("%s row %d dropped: %s", path, rowno, exc)
                continue
            if rid in seen:
                diagnostics.append(Diagnostic(rowno, f"duplicate record id {rid}"))
                continue
            seen.add(rid)
            records.append(record)
    return records


def write_csv(records: Sequence[BehaviorRecord], schema: DatasetSchema, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.columns)
        for r in records:
            row = []
            for c in schema.columns:
                v = r.values.get(c)
                if c == schema.label_field and r.label is not None:
                    v = r.label
                row.append("" if v is None else v)
            writer.writerow(row)


def build_space(records: Iterable[BehaviorRecord], schema: DatasetSchema) -> AttributeSpace:
    """Attribute space over all records, ids sorted by (field, token)."""
    return AttributeSpace.from_token_rows(schema.field_names, (schema.tokens(r) for r in records))


def top_k_labels(records: Sequence[BehaviorRecord], k: int) -> list[BehaviorRecord]:
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = [r.label for r in records if r.label is not None]
    if not labels:
        raise NoLabels("dataset has no labels")
    counts = Counter(labels)
    keep = {lab for lab, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]}
    return [r for r in records if r.label in keep]


# ---------------------------------------------------------------------------
# synthetic generators

CRIME_CODES = ("510", "624", "330", "740", "310", "440", "354", "230", "420", "626")
WEAPONS = ("400", "500", "102", "200", "306")
PREMISES = ("101", "501")


def _crime_dates(rng: np.random.Generator) -> tuple[str, str, str]:
    base = datetime(2020, 1, 1)
    occ = base + timedelta(days=int(rng.integers(0, 3 * 365)))
    delay = int(min(rng.geometric(0.35) - 1, 90))
    rptd = occ + timedelta(days=delay)
    fmt = "%m/%d/%Y %I:%M:%S %p"
    hour = int(rng.integers(0, 24))
    minute = int(rng.choice([0, 0, 0, 15, 30, 45, int(rng.integers(0, 60))]))
    return rptd.strftime(fmt), occ.strftime(fmt), f"{hour}{minute:02d}" if hour else str(minute)


def synth_crime(n: int, seed: int, planted_rule: str = "weapon-premis") -> list[BehaviorRecord]:
    """Crime-like records whose label is a known function of two attributes.

    ``weapon-premis``: the (Weapon Used Cd, Premis Cd) pair picks one of ten
    crime codes. ``month-area-parity``: label is the parity of month + area.
    All other fields, victim demographics included, are drawn independently.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    streets = [f"{s} ST" for s in ("MAIN", "BROADWAY", "FIGUEROA", "SPRING", "OLIVE", "HILL", "GRAND", "HOPE")]
    records = []
    for i in range(n):
        rptd, occ, time_occ = _crime_dates(rng)
        area = int(rng.integers(1, 22))
        weapon = WEAPONS[int(rng.integers(len(WEAPONS)))]
        premis = PREMISES[int(rng.integers(len(PREMISES)))]
        if planted_rule == "weapon-premis":
            label = CRIME_CODES[WEAPONS.index(weapon) * len(PREMISES) + PREMISES.index(premis)]
        elif planted_rule == "month-area-parity":
            label = str((parse_date(occ).month + area) % 2)
        else:
            raise ValueError(f"unknown planted rule {planted_rule!r}")
        values = {
            "DR_NO": f"{200100000 + i}",
            "Date Rptd": rptd,
            "DATE OCC": occ,
            "TIME OCC": time_occ,
            "AREA": str(area),
            "Rpt Dist No": f"{area * 100 + int(rng.integers(0, 5)):04d}",
            "Part 1-2": str(int(rng.integers(1, 3))),
            "Crm Cd": label,
            "Vict Age": str(int(rng.integers(0, 90))),
            "Vict Sex": str(rng.choice(["M", "F", "X"], p=[0.48, 0.48, 0.04])),
            "Vict Descent": str(rng.choice(["H", "W", "B", "A", "O", "X"])),
            "Premis Cd": premis,
            "Weapon Used Cd": weapon,
            "Status": str(rng.choice(["IC", "AO", "AA", "JA"], p=[0.7, 0.2, 0.08, 0.02])),
            "Cross Street": streets[int(rng.integers(len(streets)))] if rng.random() < 0.3 else None,
        }
        records.append(BehaviorRecord(values["DR_NO"], values, label))
    return records


FRAUD_TYPES = ("PAYMENT", "CASH_IN", "DEBIT", "TRANSFER", "CASH_OUT")


def synth_fraud(n: int, seed: int, fraud_ratio: float = 1 / 11) -> list[BehaviorRecord]:
    """Transactions where fraud drains the origin account to a mule.

    Planted rule: frauds are TRANSFER/CASH_OUT of the full origin balance
    (new origin balance 0) into one of a few mule accounts, mostly above 1e5.
    Normal TRANSFER/CASH_OUT leave a remaining balance.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    customers = [f"C{1000000 + 37 * i}" for i in range(120)]
    merchants = [f"M{2000000 + 53 * i}" for i in range(40)]
    mules = [f"C{9000000 + 11 * i}" for i in range(8)]
    n_fraud = max(1, int(round(n * fraud_ratio))) if n > 1 else 0
    is_fraud = np.zeros(n, dtype=bool)
    is_fraud[rng.choice(n, size=n_fraud, replace=False)] = True
    records = []
    for i in range(n):
        step = int(rng.integers(1, 31))
        orig = customers[int(rng.integers(len(customers)))]
        if is_fraud[i]:
            kind = FRAUD_TYPES[3 + int(rng.integers(2))]
            amount = round(float(10 ** rng.uniform(4.7, 6.5)), 2)
            old_org, new_org = amount, 0.0
            dest = mules[int(rng.integers(len(mules)))]
            old_dest = 0.0 if rng.random() < 0.7 else round(float(10 ** rng.uniform(2, 4)), 2)
            new_dest = old_dest if rng.random() < 0.6 else round(old_dest + amount, 2)
        else:
            kind = FRAUD_TYPES[int(rng.choice(5, p=[0.35, 0.2, 0.05, 0.15, 0.25]))]
            amount = round(float(10 ** rng.uniform(1, 5.2)), 2)
            old_org = round(amount + float(10 ** rng.uniform(1, 5.5)), 2) if kind != "CASH_IN" else round(float(10 ** rng.uniform(0, 5)), 2)
            new_org = round(old_org - amount, 2) if kind != "CASH_IN" else round(old_org + amount, 2)
            if kind == "PAYMENT":
                dest = merchants[int(rng.integers(len(merchants)))]
                old_dest = new_dest = 0.0
            else:
                dest = customers[int(rng.integers(len(customers)))]
                old_dest = round(float(10 ** rng.uniform(2, 6)), 2)
                new_dest = round(old_dest + amount, 2)
        values = {
            "step": str(step),
            "type": kind,
            "amount": f"{amount:.2f}",
            "nameOrig": orig,
            "oldbalanceOrg": f"{old_org:.2f}",
            "newbalanceOrig": f"{new_org:.2f}",
            "nameDest": dest,
            "oldbalanceDest": f"{old_dest:.2f}",
            "newbalanceDest": f"{new_dest:.2f}",
            "isFraud": "1" if is_fraud[i] else "0",
        }
        records.append(BehaviorRecord(f"row{i + 1}", values, values["isFraud"]))
    return records


def synth_zhihu(n_users: int, seed: int, n_items: int = 300, n_topics: int = 20,
                events_per_user: int = 30) -> list[BehaviorRecord]:
    """Impression log joined with user and answer side information.

    Each user favours two topics; clicked answers are drawn from them with a
    popularity skew. Roughly half the impressions are not clicked
    (click timestamp 0).
    """
    if n_users < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    item_topic = rng.integers(0, n_topics, size=n_items)
    popularity = rng.zipf(1.6, size=n_items).astype(float)
    item_likes = rng.integers(0, 5000, size=n_items) * (popularity > 2)
    by_topic = {t: np.flatnonzero(item_topic == t) for t in range(n_topics)}
    t0 = 1_546_300_800  # 2019-01-01 UTC
    records = []
    row = 0
    for u in range(n_users):
        favs = rng.choice(n_topics, size=2, replace=False)
        register = t0 - int(rng.integers(0, 3 * 365 * 86400))
        gender = str(rng.choice(["male", "female", "unknown"]))
        followers = int(rng.zipf(1.8)) - 1
        ts = t0 + int(rng.integers(0, 30 * 86400))
        for _ in range(events_per_user):
            ts += int(rng.integers(60, 6 * 3600))
            if rng.random() < 0.8:
                pool = np.concatenate([by_topic[int(t)] for t in favs]) if any(len(by_topic[int(t)]) for t in favs) else np.arange(n_items)
            else:
                pool = np.arange(n_items)
            w = popularity[pool] / popularity[pool].sum()
            item = int(rng.choice(pool, p=w))
            clicked = rng.random() < 0.55
            click_ts = ts + int(rng.integers(1, 600)) if clicked else 0
            row += 1
            values = {
                "user_id": f"u{u}",
                "answer_id": f"a{item}",
                "impression_timestamp": str(ts),
                "click_timestamp": str(click_ts),
                "register_timestamp": str(register),
                "gender": gender,
                "followers": str(followers),
                "topic_id": f"t{int(item_topic[item])}",
                "answer_likes": str(int(item_likes[item])),
            }
            records.append(BehaviorRecord(f"row{row}", values, None))
    return records


def synth_dataset(schema: DatasetSchema | str, seed: int, n: int, planted_rule: str | None = None) -> list[BehaviorRecord]:
    name = schema if isinstance(schema, str) else schema.name
    if name == "crime":
        return synth_crime(n, seed, planted_rule or "weapon-premis")
    if name == "fraud":
        return synth_fraud(n, seed)
    if name == "zhihu":
        return synth_zhihu(n, seed)
    raise ValueError(f"no synthetic generator for schema {name!r}")
