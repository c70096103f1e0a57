"""
Feature engineering: turn cleaned tweet records into a rectangular ModelFrame.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .ingest import TweetRecord, classify_source
from .lexicon import Lexicon, score_hashtags, score_text

logger = logging.getLogger(__name__)

WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
MONTH_LEVELS = tuple(str(m) for m in range(1, 13))
HOUR_LEVELS = tuple(str(h) for h in range(24))

# first level of each tuple is the reference level in regressions
CATEGORICAL_LEVELS = {
    "verified": ("false", "true"),
    "source": ("Desktop", "Mobile", "Other"),
    "media_type": ("none", "photo"),
    "created_month": MONTH_LEVELS,
    "created_day_of_week": WEEKDAYS,
    "created_hour": HOUR_LEVELS,
}

COPIED_COUNTS = (
    "display_text_width",
    "favorite_count",
    "retweet_count",
    "followers_count",
    "friends_count",
    "listed_count",
    "statuses_count",
    "favourites_count",
)


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class TimestampParts:
    year: int
    month: int
    day_of_month: int
    day_of_week: str
    hour: int


def decompose_timestamp(ts: datetime) -> TimestampParts:
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc)
    return TimestampParts(ts.year, ts.month, ts.day, WEEKDAYS[ts.weekday()], ts.hour)


def account_age(created_at: datetime, account_created_at: datetime) -> int:
    """Whole days between the account's creation date and the tweet's date (UTC calendar)."""
    tweet_day = created_at.astimezone(timezone.utc).date()
    account_day = account_created_at.astimezone(timezone.utc).date()
    if account_created_at > created_at:
        raise FrameError("account created after the tweet")
    return (tweet_day - account_day).days


@dataclass(frozen=True)
class Categorical:
    levels: tuple[str, ...]
    codes: np.ndarray

    def labels(self) -> list[str]:
        return [self.levels[c] for c in self.codes]

    @classmethod
    def from_labels(cls, labels, levels) -> "Categorical":
        index = {lvl: i for i, lvl in enumerate(levels)}
        try:
            codes = np.array([index[str(v)] for v in labels], dtype=np.int64)
        except KeyError as exc:
            raise FrameError(f"label {exc.args[0]!r} not among levels {list(levels)}") from None
        return cls(tuple(levels), codes)


@dataclass
class ModelFrame:
    """
    Row-aligned analysis table.

    ``numeric`` maps column names to float vectors, ``categorical`` maps names
    to :class:`Categorical`; ``row_ids`` carries the originating status ids.
    ``transforms`` records (mean, sd) for standardized columns.
    """

    numeric: dict[str, np.ndarray]
    categorical: dict[str, Categorical] = field(default_factory=dict)
    row_ids: list[str] | None = None
    transforms: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.numeric = {k: np.asarray(v, dtype=float) for k, v in self.numeric.items()}
        lengths = {len(v) for v in self.numeric.values()} | {len(c.codes) for c in self.categorical.values()}
        if len(lengths) > 1:
            raise FrameError(f"columns have unequal lengths {sorted(lengths)}")
        n = lengths.pop() if lengths else 0
        if self.row_ids is None:
            self.row_ids = [str(i) for i in range(n)]
        if len(self.row_ids) != n:
            raise FrameError("row_ids length does not match columns")
        overlap = set(self.numeric) & set(self.categorical)
        if overlap:
            raise FrameError(f"column names used twice: {sorted(overlap)}")
        for name, col in self.numeric.items():
            if not np.all(np.isfinite(col)):
                raise FrameError(f"column {name!r} contains NaN or infinite values")
        for name, cat in self.categorical.items():
            if len(cat.codes) and (cat.codes.min() < 0 or cat.codes.max() >= len(cat.levels)):
                raise FrameError(f"categorical {name!r} has codes outside its levels")

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def columns(self) -> list[str]:
        return list(self.numeric) + list(self.categorical)

    def __contains__(self, name):
        return name in self.numeric or name in self.categorical

    def column(self, name: str) -> np.ndarray:
        try:
            return self.numeric[name]
        except KeyError:
            raise FrameError(f"unknown numeric column {name!r}") from None

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.column(n) for n in names]) if names else np.empty((self.n_rows, 0))

    def with_numeric(self, **columns) -> "ModelFrame":
        numeric = dict(self.numeric)
        for name, values in columns.items():
            if name in self.categorical:
                raise FrameError(f"{name!r} is categorical")
            numeric[name] = np.asarray(values, dtype=float)
        return ModelFrame(numeric, dict(self.categorical), list(self.row_ids), dict(self.transforms))

    def take(self, rows) -> "ModelFrame":
        rows = np.asarray(rows)
        return ModelFrame(
            {k: v[rows] for k, v in self.numeric.items()},
            {k: Categorical(c.levels, c.codes[rows]) for k, c in self.categorical.items()},
            [self.row_ids[i] for i in np.arange(self.n_rows)[rows]],
            dict(self.transforms),
        )

    def schema(self) -> dict:
        cols = [{"name": n, "kind": "numeric"} for n in self.numeric]
        cols += [{"name": n, "kind": "categorical", "levels": list(c.levels)} for n, c in self.categorical.items()]
        return {"n_rows": self.n_rows, "columns": cols, "transforms": {k: list(v) for k, v in self.transforms.items()}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["row_id", *self.numeric, *self.categorical])
        labels = [c.labels() for c in self.categorical.values()]
        for i, row_id in enumerate(self.row_ids):
            writer.writerow(
                [row_id, *(repr(float(v[i])) for v in self.numeric.values()), *(lab[i] for lab in labels)]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, schema: dict | None = None) -> "ModelFrame":
        """
        Read a frame written by :meth:`to_csv`.

        Without a schema, columns whose values all parse as floats are numeric
        and the rest are categorical with levels in sorted order.
        """
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        rows = list(reader)
        if not rows:
            raise FrameError("frame CSV has no rows")
        has_ids = header[0] == "row_id"
        body = [r[1:] for r in rows] if has_ids else rows
        names = header[1:] if has_ids else header
        row_ids = [r[0] for r in rows] if has_ids else None
        kinds = {c["name"]: c for c in (schema or {}).get("columns", [])}
        numeric, categorical = {}, {}
        for j, name in enumerate(names):
            values = [r[j] for r in body]
            info = kinds.get(name)
            if info is not None:
                if info["kind"] == "numeric":
                    numeric[name] = np.array([float(v) for v in values])
                else:
                    categorical[name] = Categorical.from_labels(values, info["levels"])
                continue
            try:
                numeric[name] = np.array([float(v) for v in values])
            except ValueError:
                levels = CATEGORICAL_LEVELS.get(name) or tuple(sorted(set(values)))
                categorical[name] = Categorical.from_labels(values, levels)
        transforms = {k: tuple(v) for k, v in (schema or {}).get("transforms", {}).items()}
        return cls(numeric, categorical, row_ids, transforms)


@dataclass(frozen=True)
class FeatureSpec:
    """
    What build_model_frame emits beyond the fixed columns.

    ``squared`` names the sentiment columns that get a ``<name>_sq`` companion;
    ``None`` means every lexicon column. ``hashtag_lexicon`` picks the lexicon
    for hashtag sentiment (default: the first lexicon).
    """

    squared: tuple[str, ...] | None = None
    hashtag_lexicon: str | None = None


def build_model_frame(records: list[TweetRecord], lexicons: list[Lexicon], spec: FeatureSpec | None = None) -> ModelFrame:
    spec = spec or FeatureSpec()
    if not lexicons:
        raise FrameError("at least one lexicon is required")
    names = [lex.name for lex in lexicons]
    if len(set(names)) != len(names):
        raise FrameError(f"duplicate lexicon names in {names}")
    squared = names if spec.squared is None else list(spec.squared)
    unknown = [s for s in squared if s not in names]
    if unknown:
        raise FrameError(f"squared terms requested for unknown sentiment columns {unknown}")
    by_name = {lex.name: lex for lex in lexicons}
    if spec.hashtag_lexicon and spec.hashtag_lexicon not in by_name:
        raise FrameError(f"unknown hashtag lexicon {spec.hashtag_lexicon!r}")
    hashtag_lex = by_name[spec.hashtag_lexicon] if spec.hashtag_lexicon else lexicons[0]

    kept, ages = [], []
    for rec in records:
        try:
            ages.append(account_age(rec.created_at, rec.account_created_at))
        except FrameError:
            logger.warning("status %s dropped: account created after the tweet", rec.status_id)
            continue
        kept.append(rec)
    if not kept:
        raise FrameError("no usable records")

    numeric: dict[str, list] = {}
    for lex in lexicons:
        numeric[lex.name] = [score_text(r.text, lex).value for r in kept]
    for name in squared:
        numeric[f"{name}_sq"] = [v * v for v in numeric[name]]
    hs = [score_hashtags(r.hashtags, hashtag_lex).value for r in kept]
    numeric["hashtag_count"] = [len(r.hashtags) for r in kept]
    numeric["hashtag_sentiment"] = hs
    numeric["hashtag_sentiment_sq"] = [v * v for v in hs]
    numeric["account_age"] = ages
    for name in COPIED_COUNTS:
        numeric[name] = [getattr(r, name) for r in kept]
    parts = [decompose_timestamp(r.created_at) for r in kept]
    numeric["created_year"] = [p.year for p in parts]
    numeric["created_day_of_month"] = [p.day_of_month for p in parts]

    labels = {
        "verified": ["true" if r.verified else "false" for r in kept],
        "source": [classify_source(r.source).value for r in kept],
        "media_type": [r.media_type or "none" for r in kept],
        "created_month": [str(p.month) for p in parts],
        "created_day_of_week": [p.day_of_week for p in parts],
        "created_hour": [str(p.hour) for p in parts],
    }
    categorical = {k: Categorical.from_labels(v, CATEGORICAL_LEVELS[k]) for k, v in labels.items()}
    return ModelFrame(
        {k: np.array(v, dtype=float) for k, v in numeric.items()},
        categorical,
        [r.status_id for r in kept],
    )


def standardize(frame: ModelFrame, columns) -> ModelFrame:
    """Z-score the named columns (sample sd); parameters kept in ``frame.transforms``."""
    out = {}
    transforms = dict(frame.transforms)
    for name in columns:
        x = frame.column(name)
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        if not sd > 0:
            raise FrameError(f"column {name!r} has zero variance")
        mean = float(np.mean(x))
        out[name] = (x - mean) / sd
        transforms[name] = (mean, sd)
    result = frame.with_numeric(**out)
    result.transforms = transforms
    return result


def unstandardize(frame: ModelFrame, columns=None) -> ModelFrame:
    columns = list(frame.transforms) if columns is None else list(columns)
    out = {}
    transforms = dict(frame.transforms)
    for name in columns:
        mean, sd = transforms.pop(name)
        out[name] = frame.column(name) * sd + mean
    result = frame.with_numeric(**out)
    result.transforms = transforms
    return result


def frame_schema_json(frame: ModelFrame) -> str:
    return json.dumps(frame.schema(), indent=2)
