"""The end-to-end preset: clean, score, summarize, factor the sentiments, fit the two-stage model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .efa import FactorSolution, factor_scores, fit_frame_efa
from .features import FeatureSpec, ModelFrame, build_model_frame, standardize
from .formula import parse_formula
from .ingest import FilterConfig, filter_corpus, parse_records
from .lexicon import Lexicon
from .regress import TwoStageFit, control_function_fit
from .stats import correlations, describe

logger = logging.getLogger(__name__)

DEFAULT_FORMULA = (
    "retweet_count ~ Jockers + Jockers^2 + Sentiword + Sentiword^2 + account_age + display_text_width"
    " + verified + source + media_type + favorite_count + created_month + created_hour + friends_count"
    " + favourites_count + statuses_count + hashtag_count + hashtag_sentiment + hashtag_sentiment^2"
)
SENTIMENT_FACTOR_NAMES = ("Jockers", "McDonald", "Sentiword", "Senticnet")
CORR_COLUMNS = (
    "retweet_count",
    "favorite_count",
    "followers_count",
    "friends_count",
    "listed_count",
    "statuses_count",
    "favourites_count",
    "account_age",
    "display_text_width",
    "hashtag_count",
)


def log_stage(stage: str, rows_in: int, rows_out: int, started: float):
    logger.info("stage=%s rows_in=%d rows_out=%d wall=%.3fs", stage, rows_in, rows_out, time.perf_counter() - started)


@dataclass
class PresetConfig:
    formula: str = DEFAULT_FORMULA
    family: str = "negbin"
    endogenous: str = "followers_count"
    instrument: str = "listed_count"
    mode: str = "as-written"
    residual: str = "response"
    n_factors: int = 4
    rotation: str = "varimax"
    factor_names: tuple[str, ...] = SENTIMENT_FACTOR_NAMES
    filter: FilterConfig = field(default_factory=FilterConfig)


@dataclass
class PresetResult:
    frame: ModelFrame
    filter_report: list[dict]
    n_parsed: int
    n_skipped: int
    efa: FactorSolution
    two_stage: TwoStageFit
    summary: str
    corr: str

    def report_text(self) -> str:
        parts = [
            "== Ingest",
            f"parsed {self.n_parsed} records, skipped {self.n_skipped} malformed rows",
            *(f"  {r['stage']}: dropped {r['dropped']}" for r in self.filter_report),
            f"analysis rows: {self.frame.n_rows}",
            "",
            "== Summary statistics",
            self.summary,
            "== Correlations (* p <= 0.05)",
            self.corr,
            "== Sentiment factor analysis",
            self.efa.render(factor_names=SENTIMENT_FACTOR_NAMES[: self.efa.n_factors]),
            "== Control-function regression",
            self.two_stage.render(),
        ]
        return "\n".join(parts)


def add_sentiment_factors(frame: ModelFrame, lexicons: list[Lexicon], n_factors: int, rotation: str, names):
    """Fit the EFA on the lexicon columns and append factor scores under ``names``."""
    sent_cols = [lex.name for lex in lexicons]
    solution = fit_frame_efa(frame, sent_cols, n_factors, rotation)
    z = standardize(frame, sent_cols)
    scored = factor_scores(solution, z, names=list(names)[:n_factors])
    new_cols = {n: scored.numeric[n] for n in list(names)[:n_factors]}
    return frame.with_numeric(**new_cols), solution


def run_preset(raw: bytes, fmt: str, lexicons: list[Lexicon], config: PresetConfig | None = None) -> PresetResult:
    config = config or PresetConfig()
    t0 = time.perf_counter()
    parsed = parse_records(raw, fmt)
    log_stage("parse", len(parsed.records) + parsed.n_skipped, len(parsed.records), t0)

    t0 = time.perf_counter()
    filtered = filter_corpus(parsed.records, config.filter)
    log_stage("filter", len(parsed.records), len(filtered.records), t0)

    t0 = time.perf_counter()
    frame = build_model_frame(filtered.records, lexicons, FeatureSpec(squared=()))
    log_stage("features", len(filtered.records), frame.n_rows, t0)

    summary = describe(frame).render()
    corr = correlations(frame, [c for c in CORR_COLUMNS if c in frame.numeric]).render()

    t0 = time.perf_counter()
    frame, solution = add_sentiment_factors(frame, lexicons, config.n_factors, config.rotation, config.factor_names)
    log_stage("efa", frame.n_rows, frame.n_rows, t0)

    t0 = time.perf_counter()
    spec = parse_formula(config.formula, config.family)
    two_stage = control_function_fit(
        frame, config.endogenous, config.instrument, spec, config.family, mode=config.mode, residual=config.residual
    )
    log_stage("cf-fit", frame.n_rows, two_stage.stage2.n_obs, t0)
    return PresetResult(
        frame=frame,
        filter_report=filtered.report,
        n_parsed=len(parsed.records),
        n_skipped=parsed.n_skipped,
        efa=solution,
        two_stage=two_stage,
        summary=summary,
        corr=corr,
    )


def bundled_sample_path() -> Path:
    return Path(__file__).parent / "data" / "sample_tweets.jsonl"
