"""Tweet virality analytics: ingest, sentiment features, factor analysis and count regressions."""

__version__ = "0.1.0"
