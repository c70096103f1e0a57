"""Descriptive summaries and Pearson correlation tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .features import FrameError, ModelFrame

SUMMARY_HEADER = ("Statistic", "N", "Mean", "St. Dev.", "Min", "Pctl(25)", "Pctl(75)", "Max")
P_FLOOR = 1e-300


@dataclass(frozen=True)
class SummaryRow:
    name: str
    n: int
    mean: float
    sd: float
    min: float
    p25: float
    p75: float
    max: float


@dataclass
class SummaryTable:
    rows: list[SummaryRow]

    def to_json(self) -> str:
        return json.dumps([vars(r) for r in self.rows], indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in self.rows:
            w.writerow([r.name, r.n, r.mean, r.sd, r.min, r.p25, r.p75, r.max])
        return buf.getvalue()

    def render(self) -> str:
        body = [
            [r.name, f"{r.n:,}"] + [f"{v:,.3f}" for v in (r.mean, r.sd, r.min, r.p25, r.p75, r.max)]
            for r in self.rows
        ]
        return _align([list(SUMMARY_HEADER)] + body)


@dataclass
class CorrMatrix:
    names: list[str]
    r: np.ndarray
    p: np.ndarray
    n: int

    def stars(self, i: int, j: int) -> str:
        return "*" if i != j and self.p[i, j] <= 0.05 else ""

    def to_json(self) -> str:
        return json.dumps({"names": self.names, "n": self.n, "r": self.r.tolist(), "p": self.p.tolist()}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", *self.names])
        for i, name in enumerate(self.names):
            w.writerow([name, *(repr(float(v)) for v in self.r[i])])
        return buf.getvalue()

    def render(self) -> str:
        """Lower-triangular table, '*' marks p <= 0.05."""
        labels = [f"{i + 1}.{n}" for i, n in enumerate(self.names)]
        rows = [[""] + [str(i + 1) for i in range(len(self.names))]]
        for i, label in enumerate(labels):
            cells = [f"{self.r[i, j]:.2f}{self.stars(i, j)}" if j < i else "" for j in range(len(self.names))]
            rows.append([label] + cells)
        return _align(rows)


def _align(rows) -> str:
    widths = [max(len(str(row[j])) for row in rows) for j in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [str(row[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def describe(frame: ModelFrame, columns=None) -> SummaryTable:
    columns = list(frame.numeric) if columns is None else list(columns)
    rows = []
    for name in columns:
        if name not in frame.numeric:
            raise FrameError(f"unknown numeric column {name!r}")
        x = frame.numeric[name]
        if len(x) == 0:
            raise FrameError("describe needs at least one row")
        p25, p75 = np.quantile(x, [0.25, 0.75])
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        rows.append(SummaryRow(name, len(x), float(np.mean(x)), sd, float(x.min()), float(p25), float(p75), float(x.max())))
    return SummaryTable(rows)


def t_test_pvalue(r: np.ndarray, n: int) -> np.ndarray:
    """Two-sided p-value for H0: rho = 0 from the t statistic with n - 2 df."""
    df = n - 2
    r = np.clip(np.asarray(r, dtype=float), -1.0, 1.0)
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2), and df/(df+t^2) = 1 - r^2
    x = np.clip(1.0 - r * r, 0.0, 1.0)
    return betainc(df / 2.0, 0.5, x)


def correlations(frame: ModelFrame, columns=None) -> CorrMatrix:
    columns = list(frame.numeric) if columns is None else list(columns)
    x = frame.matrix(columns)
    n = x.shape[0]
    if n < 3:
        raise FrameError("correlations need at least 3 rows")
    centered = x - x.mean(axis=0)
    ss = np.sqrt(np.sum(centered**2, axis=0))
    for name, s, col in zip(columns, ss, x.T):
        if not s > 0 or np.ptp(col) == 0:
            raise FrameError(f"column {name!r} has zero variance")
    unit = centered / ss
    r = np.clip(unit.T @ unit, -1.0, 1.0)
    r = (r + r.T) / 2
    np.fill_diagonal(r, 1.0)
    p = t_test_pvalue(r, n)
    np.fill_diagonal(p, 0.0)
    return CorrMatrix(columns, r, p, n)


def format_p(p: float) -> str:
    return f"<{P_FLOOR:g}" if p < P_FLOOR else f"{p:.3g}"
