"""
Tweet record parsing, device classification and corpus filtering.

Records arrive as newline-delimited JSON or CSV with the field names of the
processed collection response (``status_id``, ``retweet_count``, ...).
Parsing is lenient at the row level: malformed rows are collected as
:class:`RowError` and skipped, the rest of the stream is still read.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("status_id", "created_at", "retweet_count")

COUNT_FIELDS = (
    "display_text_width",
    "favorite_count",
    "retweet_count",
    "followers_count",
    "friends_count",
    "listed_count",
    "statuses_count",
    "favourites_count",
)

URL_PATTERN = re.compile(r"https?\S*", re.IGNORECASE)

MOBILE_KEYWORDS = ("iphone", "ios", "blackberry", "tablets", "android", "phone", "ipad", "mobile")
DESKTOP_KEYWORDS = ("windows", "mac", "web client")


class DeviceClass(str, enum.Enum):
    MOBILE = "Mobile"
    DESKTOP = "Desktop"
    OTHER = "Other"


class IngestError(Exception):
    """Raised when an input stream cannot be read at all."""


def parse_timestamp(value) -> datetime:
    """Parse an ISO-8601 timestamp into an aware UTC datetime (second resolution)."""
    if isinstance(value, datetime):
        ts = value
    else:
        text = str(value).strip()
        if not text:
            raise ValueError("empty timestamp")
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class TweetRecord:
    """One processed tweet with its user-level attributes."""

    user_id: str
    status_id: str
    created_at: datetime
    text: str
    source: str
    display_text_width: int
    favorite_count: int
    retweet_count: int
    hashtags: tuple[str, ...]
    media_type: str | None
    lang: str
    location: str | None
    followers_count: int
    friends_count: int
    listed_count: int
    statuses_count: int
    favourites_count: int
    account_created_at: datetime
    verified: bool
    account_lang: str

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, datetime):
                value = format_timestamp(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


@dataclass
class ParseResult:
    records: list[TweetRecord]
    errors: list[RowError] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.errors)


@dataclass(frozen=True)
class FilterConfig:
    language: str = "en"
    retweet_percentile_keep: float = 0.75
    require_nonzero_engagement: bool = True
    require_text: bool = True

    def __post_init__(self):
        if not (0.0 < self.retweet_percentile_keep <= 1.0):
            raise ValueError(
                f"retweet_percentile_keep must lie in (0, 1], got {self.retweet_percentile_keep}"
            )


@dataclass
class FilterResult:
    records: list[TweetRecord]
    report: list[dict]
    threshold: int | None = None


def _as_count(raw, name: str) -> int:
    if raw is None or raw == "":
        return 0
    if isinstance(raw, bool):
        raise ValueError(f"{name}: boolean is not a count")
    value = float(raw)
    if not math.isfinite(value) or value != int(value):
        raise ValueError(f"{name}: not an integer: {raw!r}")
    value = int(value)
    if value < 0:
        raise ValueError(f"{name}: negative count {value}")
    return value


def _as_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    if raw is None or raw == "":
        return False
    text = str(raw).strip().lower()
    if text in ("true", "t", "1", "yes"):
        return True
    if text in ("false", "f", "0", "no"):
        return False
    raise ValueError(f"verified: not a boolean: {raw!r}")


def _as_hashtags(raw) -> tuple[str, ...]:
    if raw is None or raw == "":
        return ()
    if isinstance(raw, str):
        text = raw.strip()
        if text.startswith("["):
            raw = json.loads(text)
        else:
            raw = re.split(r"[\s,;|]+", text)
    return tuple(str(h).lstrip("#") for h in raw if h is not None and str(h).lstrip("#"))


def _as_optional(raw) -> str | None:
    if raw is None:
        return None
    text = str(raw)
    return text if text.strip() else None


def _as_media_type(raw) -> str | None:
    if raw is None:
        return None
    if isinstance(raw, (list, tuple)):
        raw = raw[0] if raw else None
        if raw is None:
            return None
    text = str(raw).strip().lower()
    if text in ("", "none", "na", "nan", "null"):
        return None
    if text != "photo":
        raise ValueError(f"media_type: unsupported value {raw!r}")
    return "photo"


def record_from_mapping(row: dict) -> TweetRecord:
    """Build a record from a decoded row; raises ValueError/KeyError on bad rows."""
    for name in REQUIRED_FIELDS:
        if row.get(name) in (None, ""):
            raise KeyError(f"missing required field {name!r}")
    created_at = parse_timestamp(row["created_at"])
    account_raw = row.get("account_created_at")
    account_created_at = parse_timestamp(account_raw) if account_raw not in (None, "") else created_at
    counts = {name: _as_count(row.get(name), name) for name in COUNT_FIELDS}
    return TweetRecord(
        user_id=str(row.get("user_id") or ""),
        status_id=str(row["status_id"]),
        created_at=created_at,
        text=str(row.get("text") or ""),
        source=str(row.get("source") or ""),
        hashtags=_as_hashtags(row.get("hashtags")),
        media_type=_as_media_type(row.get("media_type")),
        lang=str(row.get("lang") or ""),
        location=_as_optional(row.get("location")),
        account_created_at=account_created_at,
        verified=_as_bool(row.get("verified")),
        account_lang=str(row.get("account_lang") or ""),
        **counts,
    )


def _iter_jsonl(stream: IO[str]):
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            yield lineno, None, f"invalid JSON: {exc.msg}"
            continue
        if not isinstance(obj, dict):
            yield lineno, None, "line is not a JSON object"
            continue
        yield lineno, obj, None


def _iter_csv(stream: IO[str]):
    reader = csv.DictReader(stream)
    if not reader.fieldnames:
        raise IngestError("csv input has no header row")
    for row in reader:
        # header occupies line 1
        lineno = reader.line_num
        if None in row:
            yield lineno, None, "row has more cells than the header"
            continue
        yield lineno, row, None


def parse_records(source: bytes | str | IO, format: str = "jsonl") -> ParseResult:
    """
    Parse tweet records from a byte stream, text stream, or raw bytes.

    Parameters
    ----------
    source : bytes, str or file-like
        Raw content. ``str`` is taken as already-decoded content.
    format : {'jsonl', 'csv'}

    Returns
    -------
    ParseResult
        Records in input order plus the row-level errors that caused skips.
        Duplicate ``status_id`` values are skipped as row errors.
    """
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown format {format!r}")
    try:
        if isinstance(source, bytes):
            text = source.decode("utf-8")
        elif isinstance(source, str):
            text = source
        else:
            data = source.read()
            text = data.decode("utf-8") if isinstance(data, bytes) else data
    except (UnicodeDecodeError, OSError) as exc:
        raise IngestError(f"unreadable input stream: {exc}") from exc

    stream = io.StringIO(text, newline="")
    rows = _iter_jsonl(stream) if format == "jsonl" else _iter_csv(stream)

    result = ParseResult(records=[])
    seen: set[str] = set()
    try:
        for lineno, row, problem in rows:
            if problem is not None:
                result.errors.append(RowError(lineno, problem))
                continue
            try:
                record = record_from_mapping(row)
            except (KeyError, ValueError, TypeError) as exc:
                message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
                result.errors.append(RowError(lineno, str(message)))
                continue
            if record.status_id in seen:
                result.errors.append(RowError(lineno, f"duplicate status_id {record.status_id!r}"))
                continue
            seen.add(record.status_id)
            result.records.append(record)
    except csv.Error as exc:
        raise IngestError(f"unreadable csv input: {exc}") from exc

    for err in result.errors:
        logger.warning("row %d skipped: %s", err.line, err.message)
    return result


def serialize_records(records: Iterable[TweetRecord], with_device_class: bool = False) -> str:
    """Render records as jsonl; optionally append the ``device_class`` field."""
    lines = []
    for record in records:
        obj = record.to_dict()
        if with_device_class:
            obj["device_class"] = classify_source(record.source).value
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def classify_source(source: str) -> DeviceClass:
    """Map a free-text source string to Mobile/Desktop/Other by keyword."""
    lowered = (source or "").lower()
    if any(k in lowered for k in MOBILE_KEYWORDS):
        return DeviceClass.MOBILE
    if any(k in lowered for k in DESKTOP_KEYWORDS):
        return DeviceClass.DESKTOP
    return DeviceClass.OTHER


def strip_urls(text: str) -> str:
    return URL_PATTERN.sub(" ", text)


def has_text(text: str) -> bool:
    return bool(strip_urls(text).strip())


def retweet_threshold(counts: list[int], keep: float) -> int | None:
    """
    Smallest retweet count kept by the top-``keep`` cut.

    The kept block is the top ``ceil(keep * n)`` order statistics; ties with
    the threshold value are kept as well.
    """
    if not counts:
        return None
    ordered = sorted(counts)
    n = len(ordered)
    n_keep = min(n, max(1, math.ceil(round(keep * n, 9))))
    return ordered[n - n_keep]


def filter_corpus(records: list[TweetRecord], config: FilterConfig | None = None) -> FilterResult:
    """
    Apply the cleaning rules in order: date sanity, language, engagement,
    text presence, then the retweet percentile cut.

    Order is preserved. ``report`` lists ``{"stage", "dropped"}`` per stage.
    """
    config = config or FilterConfig()
    report = []

    def stage(name, keep_if, rows):
        kept = [r for r in rows if keep_if(r)]
        report.append({"stage": name, "dropped": len(rows) - len(kept)})
        return kept

    def dates_ok(r):
        if r.account_created_at > r.created_at:
            logger.warning("status %s dropped: account created after tweet", r.status_id)
            return False
        return True

    rows = stage("account_dates", dates_ok, list(records))
    rows = stage(
        "language", lambda r: r.lang == config.language and r.account_lang == config.language, rows
    )
    if config.require_nonzero_engagement:
        rows = stage("engagement", lambda r: r.retweet_count > 0 and r.favorite_count > 0, rows)
    if config.require_text:
        rows = stage("text", lambda r: has_text(r.text), rows)

    threshold = retweet_threshold([r.retweet_count for r in rows], config.retweet_percentile_keep)
    if threshold is not None:
        rows = stage("retweet_percentile", lambda r: r.retweet_count >= threshold, rows)
    else:
        report.append({"stage": "retweet_percentile", "dropped": 0})
    return FilterResult(records=rows, report=report, threshold=threshold)
