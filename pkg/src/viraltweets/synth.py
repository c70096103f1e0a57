"""
Seeded synthetic data with known parameters.

All generators draw from ``numpy.random.Generator(Philox(seed))`` (a
counter-based bit generator); normals use numpy's ziggurat sampler. Given
the same numpy release, a seed reproduces a frame bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from .features import Categorical, ModelFrame
from .ingest import TweetRecord

RNG_NAME = f"numpy.random.Philox (numpy {np.__version__}), ziggurat normals"


class SimulationError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class ColumnGen:
    """One generated regressor: ``kind`` in normal/uniform/bernoulli/categorical."""

    name: str
    kind: str = "normal"
    params: tuple = (0.0, 1.0)
    levels: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return len(self.levels) - 1 if self.kind == "categorical" else 1

    def validate(self):
        if self.kind == "normal":
            if len(self.params) != 2 or self.params[1] < 0:
                raise SimulationError(f"{self.name}: normal needs (mean, sd >= 0)")
        elif self.kind == "uniform":
            if len(self.params) != 2 or self.params[0] > self.params[1]:
                raise SimulationError(f"{self.name}: uniform needs (a <= b)")
        elif self.kind == "bernoulli":
            if len(self.params) != 1 or not 0 <= self.params[0] <= 1:
                raise SimulationError(f"{self.name}: bernoulli needs p in [0, 1]")
        elif self.kind == "categorical":
            probs = np.asarray(self.params, dtype=float)
            if len(self.levels) < 2 or len(probs) != len(self.levels):
                raise SimulationError(f"{self.name}: categorical needs one probability per level")
            if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
                raise SimulationError(f"{self.name}: probabilities must be nonnegative and sum to 1")
        else:
            raise SimulationError(f"{self.name}: unknown generator kind {self.kind!r}")

    def draw(self, rng, n):
        if self.kind == "normal":
            return rng.normal(self.params[0], self.params[1], n)
        if self.kind == "uniform":
            return rng.uniform(self.params[0], self.params[1], n)
        if self.kind == "bernoulli":
            return (rng.random(n) < self.params[0]).astype(float)
        return rng.choice(len(self.levels), size=n, p=np.asarray(self.params, dtype=float))


@dataclass(frozen=True)
class Endogeneity:
    """
    ``error_corr`` is corr(w, u) for the endogenous regressor w and the
    structural error u; ``instrument_strength`` is the coefficient on z in w.
    ``error_scale`` multiplies u inside the outcome's linear predictor.
    """

    error_corr: float = 0.5
    instrument_strength: float = 1.0
    error_scale: float = 0.5


@dataclass(frozen=True)
class SimConfig:
    n: int
    beta: tuple[float, ...]
    alpha: float = 0.0
    design: tuple[ColumnGen, ...] = ()
    endogeneity: Endogeneity | None = None
    seed: int = 0
    response: str = "y"

    def validate(self, endogenous: bool = False):
        if self.n < 1:
            raise SimulationError("n must be positive")
        if self.alpha < 0:
            raise SimulationError("alpha must be >= 0")
        for col in self.design:
            col.validate()
        expected = 1 + sum(c.width for c in self.design) + (1 if endogenous else 0)
        if len(self.beta) != expected:
            raise SimulationError(f"beta has {len(self.beta)} entries, design needs {expected}")
        if endogenous:
            e = self.endogeneity
            if e is None:
                raise SimulationError("endogeneity settings are required")
            if not -1 < e.error_corr < 1:
                raise SimulationError("error_corr must lie strictly inside (-1, 1)")
            if e.instrument_strength == 0:
                raise SimulationError("instrument_strength must be nonzero")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rng"] = RNG_NAME
        return d


def default_design(k: int = 2) -> tuple[ColumnGen, ...]:
    return tuple(ColumnGen(f"x{j + 1}") for j in range(k))


def _design_columns(config: SimConfig, rng):
    numeric, categorical, dummies = {}, {}, []
    for col in config.design:
        values = col.draw(rng, config.n)
        if col.kind == "categorical":
            codes = values.astype(np.int64)
            categorical[col.name] = Categorical(tuple(col.levels), codes)
            for code in range(1, len(col.levels)):
                dummies.append((codes == code).astype(float))
        else:
            numeric[col.name] = values
            dummies.append(values)
    X = np.column_stack([np.ones(config.n), *dummies])
    return numeric, categorical, X


def _draw_counts(rng, mu, alpha):
    if alpha == 0:
        return rng.poisson(mu).astype(float)
    # gamma-Poisson mixture: E[g] = 1, Var[g] = alpha, so Var[y] = mu + alpha mu^2
    g = rng.gamma(1.0 / alpha, alpha, size=len(mu))
    return rng.poisson(mu * g).astype(float)


def _check_eta(eta):
    if np.max(eta) > 700:
        raise SimulationError("linear predictor exceeds 700; use smaller coefficients")


def gen_count_data(config: SimConfig) -> ModelFrame:
    """Poisson (alpha = 0) or NB2 counts from a log-linear mean."""
    config.validate()
    rng = make_rng(config.seed)
    numeric, categorical, X = _design_columns(config, rng)
    eta = X @ np.asarray(config.beta, dtype=float)
    _check_eta(eta)
    numeric[config.response] = _draw_counts(rng, np.exp(eta), config.alpha)
    return ModelFrame(numeric, categorical)


def endogenous_loading(error_corr: float, instrument_strength: float) -> float:
    """Weight on u in w = g z + d u + e giving corr(w, u) = error_corr (z, u, e standard normal)."""
    r = error_corr
    return r * math.sqrt((instrument_strength**2 + 1.0) / (1.0 - r * r))


def gen_endogenous_data(config: SimConfig, endogenous: str = "w", instrument: str = "z") -> ModelFrame:
    """
    Counts with one endogenous regressor.

    ``w = g z + d u + e`` and ``log mu = beta' [1, x, w] + error_scale * u``;
    the last entry of ``beta`` is the coefficient on w. The frame carries the
    exogenous columns, ``w``, ``z``, the response and the structural error
    ``u`` (column ``latent_error``) for checking.
    """
    config.validate(endogenous=True)
    e = config.endogeneity
    rng = make_rng(config.seed)
    numeric, categorical, X = _design_columns(config, rng)
    n = config.n
    z = rng.standard_normal(n)
    u = rng.standard_normal(n)
    noise = rng.standard_normal(n)
    d = endogenous_loading(e.error_corr, e.instrument_strength)
    w = e.instrument_strength * z + d * u + noise
    beta = np.asarray(config.beta, dtype=float)
    eta = X @ beta[:-1] + beta[-1] * w + e.error_scale * u
    _check_eta(eta)
    numeric[endogenous] = w
    numeric[instrument] = z
    numeric[config.response] = _draw_counts(rng, np.exp(eta), config.alpha)
    numeric["latent_error"] = u
    return ModelFrame(numeric, categorical)


def gen_factor_data(n: int, loadings, seed: int, prefix: str = "v") -> ModelFrame:
    """``x = L f + sqrt(1 - h2) e`` with standard normal factors and errors, columns standardized."""
    loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
    h2 = np.sum(loadings**2, axis=1)
    if np.any(h2 > 1 + 1e-12):
        raise SimulationError("a row of the loading matrix has communality > 1")
    rng = make_rng(seed)
    p, k = loadings.shape
    f = rng.standard_normal((n, k))
    eps = rng.standard_normal((n, p))
    x = f @ loadings.T + eps * np.sqrt(np.clip(1.0 - h2, 0.0, None))
    x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    return ModelFrame({f"{prefix}{i + 1}": x[:, i] for i in range(p)})


def sidecar_json(config, kind: str, **extra) -> str:
    payload = {"kind": kind, "rng": RNG_NAME}
    payload.update(config.to_dict() if hasattr(config, "to_dict") else config)
    payload.update(extra)
    return json.dumps(payload, indent=2, default=list)


# ----------------------------------------------------------------------------
# tweet-like corpus for end-to-end runs

SOURCES = (
    ("Twitter for iPhone", 0.40),
    ("Twitter for Android", 0.22),
    ("Twitter Web Client", 0.12),
    ("Twitter for iPad", 0.05),
    ("TweetDeck", 0.08),
    ("Twitter for Mac", 0.03),
    ("Hootsuite Inc.", 0.06),
    ("IFTTT", 0.04),
)

NEUTRAL_WORDS = (
    "the a to of and in on for with at this that from today tomorrow news update people time "
    "game team city vote season week music video watch read story thread live new right now "
    "after before still just more about our your their big small first last"
).split()


def gen_tweet_corpus(n: int = 1000, seed: int = 2018, sentiment_words=()) -> list[TweetRecord]:
    """
    Tweet-like records for November 2018 with plausible engagement structure.

    ``sentiment_words`` (e.g. the union of the bundled lexicons) are mixed
    into the texts so that lexicon scores vary. Retweets follow an NB2 model
    driven by followers, favorites, media and device, so the regression
    pipeline has signal to find.
    """
    rng = make_rng(seed)
    sentiment_words = sorted(set(sentiment_words))
    start = datetime(2018, 11, 1, tzinfo=timezone.utc)
    src_names = [s for s, _ in SOURCES]
    src_probs = np.array([p for _, p in SOURCES])
    src_probs = src_probs / src_probs.sum()
    records = []
    for i in range(n):
        n_users_words = int(rng.integers(4, 18))
        words = []
        for _ in range(n_users_words):
            if sentiment_words and rng.random() < 0.35:
                words.append(sentiment_words[int(rng.integers(len(sentiment_words)))])
            else:
                words.append(NEUTRAL_WORDS[int(rng.integers(len(NEUTRAL_WORDS)))])
        n_tags = int(rng.choice([0, 0, 1, 1, 2, 3, 4]))
        pool = sentiment_words or NEUTRAL_WORDS
        hashtags = [pool[int(rng.integers(len(pool)))] for _ in range(n_tags)]
        text = " ".join(words)
        if rng.random() < 0.1:
            text = "@friend" + str(int(rng.integers(100))) + " " + text
        if hashtags:
            text += " " + " ".join("#" + h for h in hashtags)
        if rng.random() < 0.3:
            text += f" https://t.co/x{int(rng.integers(10**6))}"
        if rng.random() < 0.02:
            text = f"https://t.co/only{i}"
        if text:
            text = text[0].upper() + text[1:]

        created = start + timedelta(seconds=int(rng.integers(0, 30 * 86400)))
        age_days = int(rng.integers(0, 3500))
        account_created = created - timedelta(days=age_days, seconds=int(rng.integers(0, 86400)))
        log_followers = rng.normal(7.0, 2.0)
        followers = int(np.exp(np.clip(log_followers, 0, 16)))
        listed = int(np.exp(np.clip(log_followers - 4.0 + rng.normal(0, 0.5), 0, 13)))
        friends = int(np.exp(np.clip(rng.normal(6.0, 1.2), 0, 12)))
        statuses = int(np.exp(np.clip(rng.normal(9.0, 1.5), 0, 14)))
        favourites = int(np.exp(np.clip(rng.normal(8.0, 1.8), 0, 14)))
        verified = bool(rng.random() < 0.08 + 0.3 * (log_followers > 11))
        photo = rng.random() < 0.3
        source = src_names[int(rng.choice(len(src_names), p=src_probs))]
        mobile = any(k in source.lower() for k in ("iphone", "android", "ipad"))
        eta = 0.5 + 0.3 * (log_followers - 7.0) + 0.35 * photo + 0.2 * mobile - 0.0001 * age_days + 0.02 * n_tags
        mu = math.exp(min(eta, 12.0))
        retweets = int(rng.poisson(mu * rng.gamma(2.0, 0.5)))
        favorites = int(rng.poisson(2.0 * retweets + 0.5 * mu + 0.5))
        lang = "en" if rng.random() < 0.95 else "es"
        account_lang = lang if rng.random() < 0.97 else "fr"
        records.append(
            TweetRecord(
                user_id=f"u{int(rng.integers(10**9)):09d}",
                status_id=f"{1058000000000000000 + i}",
                created_at=created,
                text=text,
                source=source,
                display_text_width=len(text),
                favorite_count=favorites,
                retweet_count=retweets,
                hashtags=tuple(hashtags),
                media_type="photo" if photo else None,
                lang=lang,
                location=None if rng.random() < 0.4 else "USA",
                followers_count=followers,
                friends_count=friends,
                listed_count=listed,
                statuses_count=statuses,
                favourites_count=favourites,
                account_created_at=account_created,
                verified=verified,
                account_lang=account_lang,
            )
        )
    return records
