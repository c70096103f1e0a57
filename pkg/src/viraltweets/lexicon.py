"""Polarity lexicons and additive sentiment scoring."""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

logger = logging.getLogger(__name__)

LEXICON_DIR_ENV = "VIRALTWEETS_LEXICONS"

_URL = re.compile(r"https?\S*", re.IGNORECASE)
_MENTION = re.compile(r"@\w+")
# anything other than letters, digits and apostrophes separates tokens
_SPLIT = re.compile(r"[^\w']|_")


class LexiconError(Exception):
    pass


@dataclass(frozen=True)
class Lexicon:
    name: str
    entries: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for token, polarity in self.entries.items():
            if not token or token != token.lower():
                raise LexiconError(f"lexicon {self.name!r}: token {token!r} must be non-empty lower case")
            polarity = float(polarity)
            if not math.isfinite(polarity):
                raise LexiconError(f"lexicon {self.name!r}: polarity for {token!r} is not finite")
            clean[token] = polarity
        object.__setattr__(self, "entries", MappingProxyType(clean))

    def __len__(self):
        return len(self.entries)

    def polarity(self, token: str) -> float:
        return self.entries.get(token, 0.0)


@dataclass(frozen=True)
class SentimentScore:
    lexicon_name: str
    value: float


def load_lexicon(path: str | os.PathLike, name: str | None = None) -> Lexicon:
    """
    Read a ``token<TAB>polarity`` file. Lines starting with '#' are comments.

    Duplicate tokens (after lower-casing) keep the last value and log a warning.
    """
    path = Path(path)
    name = name or path.stem
    entries: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2 or not parts[0].strip():
                raise LexiconError(f"{path}:{lineno}: expected 'token<TAB>polarity'")
            token = parts[0].strip().lower()
            try:
                polarity = float(parts[1])
            except ValueError:
                raise LexiconError(f"{path}:{lineno}: unparsable polarity {parts[1]!r}") from None
            if not math.isfinite(polarity):
                raise LexiconError(f"{path}:{lineno}: polarity must be finite")
            if token in entries:
                logger.warning("%s:%d: duplicate token %r, last entry wins", path, lineno, token)
            entries[token] = polarity
    if not entries:
        raise LexiconError(f"{path}: lexicon file has no entries")
    return Lexicon(name=name, entries=entries)


def load_lexicon_dir(directory: str | os.PathLike) -> list[Lexicon]:
    """Load every ``*.tsv`` file in a directory, sorted by name; stem is the lexicon name."""
    directory = Path(directory)
    files = sorted(directory.glob("*.tsv"))
    if not files:
        raise LexiconError(f"no *.tsv lexicons in {directory}")
    return [load_lexicon(f, f.stem) for f in files]


def default_lexicon_dir() -> Path:
    env = os.environ.get(LEXICON_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).parent / "data" / "lexicons"


def tokenize(text: str) -> list[str]:
    """
    Lower-cased word tokens with URLs and @-mentions removed.

    Hashtag words are kept (the '#' is a separator), apostrophes stay inside tokens.
    """
    text = _MENTION.sub(" ", _URL.sub(" ", text or ""))
    return [t for t in _SPLIT.split(text.lower()) if t]


def score_tokens(tokens, lexicon: Lexicon) -> float:
    entries = lexicon.entries
    return float(sum(entries.get(t, 0.0) for t in tokens))


def score_text(text: str, lexicon: Lexicon) -> SentimentScore:
    return SentimentScore(lexicon.name, score_tokens(tokenize(text), lexicon))


def score_hashtags(hashtags, lexicon: Lexicon) -> SentimentScore:
    # camel-case hashtags are looked up whole, never split
    return SentimentScore(lexicon.name, score_tokens((h.lstrip("#").lower() for h in hashtags), lexicon))
