"""
Command-line entry point: ``viraltweets <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence.
Payloads go to ``--output`` (or stdout); logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import efa, features, ingest, lexicon, regress, stats, synth
from .formula import parse_formula
from .pipeline import DEFAULT_FORMULA, PresetConfig, add_sentiment_factors, run_preset

logger = logging.getLogger("viraltweets")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p, *, input_required=True):
    p.add_argument("--input", required=input_required, help="input file")
    p.add_argument("--format", choices=("jsonl", "csv"), help="tweet file format (default: from extension)")
    p.add_argument("--output", help="output file (default: stdout)")
    p.add_argument("--lexicons", help=f"lexicon directory (default: ${lexicon.LEXICON_DIR_ENV} or bundled)")


def _add_filter(p):
    p.add_argument("--keep-percentile", type=float, default=0.75, help="fraction of top retweeted tweets kept")
    p.add_argument("--lang", default="en", help="language code for tweet and account")


def _add_model(p, formula_required=True):
    p.add_argument("--formula", required=formula_required, help='e.g. "retweet_count ~ a + a^2 + b"')
    p.add_argument("--family", choices=("ols", "poisson", "negbin"), default="poisson")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viraltweets", description="Tweet virality analytics")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="parse and clean tweet records")
    _add_common(p)
    _add_filter(p)
    p.add_argument("--report", help="write the filter report JSON here")

    p = sub.add_parser("score", help="build the model frame (CSV + schema JSON)")
    _add_common(p)
    p.add_argument("--factors", type=int, default=0, help="append K sentiment factor scores")
    p.add_argument("--rotation", choices=("none", "varimax"), default="varimax")

    for name, helptext in (("describe", "summary statistics"), ("corr", "correlation table")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--columns", help="comma-separated numeric columns")
        p.add_argument("--as", dest="as_format", choices=("text", "json", "csv"), default="text")

    p = sub.add_parser("efa", help="exploratory factor analysis")
    _add_common(p)
    p.add_argument("--columns", help="comma-separated numeric columns (default: lexicon columns)")
    p.add_argument("--factors", type=int, required=True)
    p.add_argument("--rotation", choices=("none", "varimax"), default="varimax")

    p = sub.add_parser("fit", help="fit a single regression")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("cf-fit", help="two-stage control-function fit")
    _add_common(p)
    _add_model(p)
    p.add_argument("--endogenous", required=True)
    p.add_argument("--instrument", required=True)
    p.add_argument("--residual", choices=("response", "pearson", "deviance"), default="response")
    p.add_argument("--cf-mode", choices=("as-written", "conventional"), default="as-written")

    p = sub.add_parser("lrtest", help="likelihood ratio test of nested formulas")
    _add_common(p)
    _add_model(p)
    p.add_argument("--full-formula", required=True)

    p = sub.add_parser("simulate", help="write a synthetic frame plus a parameter sidecar")
    p.add_argument("--kind", choices=("poisson", "negbin", "endogenous", "factor", "tweets"), required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", help="comma-separated coefficients, intercept first")
    p.add_argument("--alpha", type=float, help="NB2 dispersion")
    p.add_argument("--rho", type=float, default=0.5, help="error correlation for --kind endogenous")
    p.add_argument("--gamma", type=float, default=1.0, help="instrument strength for --kind endogenous")
    p.add_argument("--output", required=True)
    p.add_argument("--lexicons")

    p = sub.add_parser("report", help="render a saved result, or run the full preset pipeline")
    _add_common(p)
    p.add_argument("--preset", choices=("paper",), help="run the full pipeline on raw tweets")
    p.add_argument("--formula", default=DEFAULT_FORMULA)
    p.add_argument("--family", choices=("ols", "poisson", "negbin"), default="negbin")
    p.add_argument("--endogenous", default="followers_count")
    p.add_argument("--instrument", default="listed_count")
    p.add_argument("--residual", choices=("response", "pearson", "deviance"), default="response")
    p.add_argument("--cf-mode", choices=("as-written", "conventional"), default="as-written")
    p.add_argument("--factors", type=int, default=4)
    p.add_argument("--rotation", choices=("none", "varimax"), default="varimax")
    p.add_argument("--seed", type=int, default=0, help="accepted for replayability; the preset is deterministic")
    _add_filter(p)
    return parser


# ----------------------------------------------------------------------------
# helpers


def _emit(args, text: str):
    if getattr(args, "output", None):
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _format_of(args) -> str:
    if args.format:
        return args.format
    return "csv" if str(args.input).lower().endswith(".csv") else "jsonl"


def _lexicons(args):
    directory = args.lexicons or lexicon.default_lexicon_dir()
    return lexicon.load_lexicon_dir(directory)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ingest.IngestError(f"cannot read {path}: {exc}") from exc


def _is_frame_csv(data: bytes) -> bool:
    first = data.split(b"\n", 1)[0].decode("utf-8", errors="replace")
    return first.startswith("row_id,")


def load_frame(args) -> features.ModelFrame:
    """Frame CSV (written by ``score``) or raw tweets, scored against the lexicons."""
    data = _read_bytes(args.input)
    if _format_of(args) == "csv" and _is_frame_csv(data):
        schema_path = Path(str(args.input) + ".schema.json")
        schema = json.loads(schema_path.read_text()) if schema_path.exists() else None
        return features.ModelFrame.from_csv(data.decode("utf-8"), schema)
    parsed = ingest.parse_records(data, _format_of(args))
    return features.build_model_frame(parsed.records, _lexicons(args))


def _columns(args, frame):
    if getattr(args, "columns", None):
        return [c.strip() for c in args.columns.split(",") if c.strip()]
    return list(frame.numeric)


def _family(name: str) -> str:
    return regress.canonical_family(name)


# ----------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    t0 = time.perf_counter()
    parsed = ingest.parse_records(_read_bytes(args.input), _format_of(args))
    config = ingest.FilterConfig(language=args.lang, retweet_percentile_keep=args.keep_percentile)
    result = ingest.filter_corpus(parsed.records, config)
    logger.info("stage=ingest rows_in=%d rows_out=%d skipped=%d wall=%.3fs",
                len(parsed.records), len(result.records), parsed.n_skipped, time.perf_counter() - t0)
    _emit(args, ingest.serialize_records(result.records, with_device_class=True))
    report = [{"stage": "parse", "dropped": parsed.n_skipped}] + result.report
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_score(args):
    parsed = ingest.parse_records(_read_bytes(args.input), _format_of(args))
    lexicons = _lexicons(args)
    frame = features.build_model_frame(parsed.records, lexicons)
    if args.factors:
        frame, _ = add_sentiment_factors(
            frame, lexicons, args.factors, args.rotation, [f"factor_{j + 1}" for j in range(args.factors)]
        )
    _emit(args, frame.to_csv())
    if args.output:
        Path(args.output + ".schema.json").write_text(features.frame_schema_json(frame) + "\n")
    return EXIT_OK


def cmd_describe(args):
    frame = load_frame(args)
    table = stats.describe(frame, _columns(args, frame))
    _emit(args, {"text": table.render, "json": table.to_json, "csv": table.to_csv}[args.as_format]())
    return EXIT_OK


def cmd_corr(args):
    frame = load_frame(args)
    cm = stats.correlations(frame, _columns(args, frame))
    _emit(args, {"text": cm.render, "json": cm.to_json, "csv": cm.to_csv}[args.as_format]())
    return EXIT_OK


def cmd_efa(args):
    frame = load_frame(args)
    if args.columns:
        columns = _columns(args, frame)
    else:
        names = [lex.name for lex in _lexicons(args)]
        columns = [c for c in names if c in frame.numeric] or list(frame.numeric)
    solution = efa.fit_frame_efa(frame, columns, args.factors, args.rotation)
    sys.stderr.write(solution.render())
    _emit(args, solution.to_json() + "\n")
    return EXIT_OK if solution.converged else EXIT_CONVERGENCE


def cmd_fit(args):
    frame = load_frame(args)
    spec = parse_formula(args.formula, _family(args.family))
    result = regress.fit(frame, spec)
    if args.output:
        Path(args.output).write_text(result.to_json() + "\n")
    sys.stdout.write(result.render())
    return EXIT_OK


def cmd_cf_fit(args):
    frame = load_frame(args)
    spec = parse_formula(args.formula, _family(args.family))
    result = regress.control_function_fit(
        frame, args.endogenous, args.instrument, spec, _family(args.family),
        mode=args.cf_mode, residual=args.residual,
    )
    if args.output:
        Path(args.output).write_text(result.to_json() + "\n")
    sys.stdout.write(result.render())
    return EXIT_OK


def cmd_lrtest(args):
    frame = load_frame(args)
    family = _family(args.family)
    restricted = regress.fit(frame, parse_formula(args.formula, family))
    full = regress.fit(frame, parse_formula(args.full_formula, family))
    result = regress.lr_test(restricted, full)
    _emit(args, json.dumps(result.to_dict()) + "\n" if args.output else result.render() + "\n")
    return EXIT_OK


def _parse_beta(text, default):
    if not text:
        return tuple(default)
    return tuple(float(b) for b in text.split(","))


def cmd_simulate(args):
    out = Path(args.output)
    sidecar = out.with_name(out.stem + ".params.json")
    if args.kind in ("poisson", "negbin"):
        alpha = args.alpha if args.alpha is not None else (0.0 if args.kind == "poisson" else 0.5)
        config = synth.SimConfig(
            n=args.n, beta=_parse_beta(args.beta, (1.0, 0.5, -0.3)), alpha=alpha,
            design=synth.default_design(len(_parse_beta(args.beta, (1.0, 0.5, -0.3))) - 1), seed=args.seed,
        )
        frame = synth.gen_count_data(config)
        params = synth.sidecar_json(config, args.kind)
    elif args.kind == "endogenous":
        beta = _parse_beta(args.beta, (1.0, 0.5, 0.3))
        config = synth.SimConfig(
            n=args.n, beta=beta, alpha=args.alpha or 0.0, design=synth.default_design(len(beta) - 2),
            endogeneity=synth.Endogeneity(args.rho, args.gamma), seed=args.seed,
        )
        frame = synth.gen_endogenous_data(config)
        params = synth.sidecar_json(config, args.kind, endogenous="w", instrument="z")
    elif args.kind == "factor":
        loadings = np.array([[0.8, 0.0], [0.7, 0.0], [0.6, 0.0], [0.0, 0.8], [0.0, 0.7], [0.0, 0.6]])
        frame = synth.gen_factor_data(args.n, loadings, args.seed)
        params = synth.sidecar_json({"n": args.n, "seed": args.seed, "loadings": loadings.tolist()}, "factor")
    else:
        lexicons = lexicon.load_lexicon_dir(args.lexicons or lexicon.default_lexicon_dir())
        words = sorted(set().union(*(set(lex.entries) for lex in lexicons)))
        records = synth.gen_tweet_corpus(args.n, args.seed, words)
        out.write_text(ingest.serialize_records(records), encoding="utf-8")
        sidecar.write_text(synth.sidecar_json({"n": args.n, "seed": args.seed}, "tweets") + "\n")
        return EXIT_OK
    out.write_text(frame.to_csv(), encoding="utf-8")
    Path(str(out) + ".schema.json").write_text(features.frame_schema_json(frame) + "\n")
    sidecar.write_text(params + "\n")
    return EXIT_OK


def _render_saved(payload: dict) -> str:
    if "stage1" in payload:
        return regress.TwoStageFit.from_dict(payload).render()
    if "beta" in payload:
        return regress.RegressionFit.from_dict(payload).render()
    if "loadings" in payload:
        return efa.FactorSolution.from_dict(payload).render()
    if payload.get("kind") in ("wald", "lr"):
        return regress.TestResult(**payload).render() + "\n"
    raise UsageError("unrecognized saved result")


def cmd_report(args):
    if args.preset:
        config = PresetConfig(
            formula=args.formula, family=_family(args.family), endogenous=args.endogenous,
            instrument=args.instrument, mode=args.cf_mode, residual=args.residual,
            n_factors=args.factors, rotation=args.rotation,
            filter=ingest.FilterConfig(language=args.lang, retweet_percentile_keep=args.keep_percentile),
        )
        result = run_preset(_read_bytes(args.input), _format_of(args), _lexicons(args), config)
        _emit(args, result.report_text())
        return EXIT_OK
    try:
        payload = json.loads(_read_bytes(args.input))
    except json.JSONDecodeError as exc:
        raise ingest.IngestError(f"{args.input} is not a saved JSON result: {exc}") from exc
    _emit(args, _render_saved(payload))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "score": cmd_score,
    "describe": cmd_describe,
    "corr": cmd_corr,
    "efa": cmd_efa,
    "fit": cmd_fit,
    "cf-fit": cmd_cf_fit,
    "lrtest": cmd_lrtest,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s %(message)s",
        force=True,
    )
    if getattr(args, "output", None) and getattr(args, "input", None):
        if os.path.abspath(args.output) == os.path.abspath(args.input):
            sys.stderr.write("error: --input and --output must differ\n")
            return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except regress.ConvergenceError as exc:
        sys.stderr.write(f"error: {exc}\n")
        for row in exc.trace[-10:]:
            sys.stderr.write(f"  {json.dumps(row)}\n")
        return EXIT_CONVERGENCE
    except (ValueError, KeyError, ingest.IngestError, lexicon.LexiconError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
