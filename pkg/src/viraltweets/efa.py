"""
Exploratory factor analysis.

Minimum-residual extraction: the uniquenesses are optimized with L-BFGS-B
(bounded to ``[0.005, 1]``); for a given vector of uniquenesses the
loadings come from the leading eigenpairs of the reduced correlation
matrix. The objective is the sum of squared off-diagonal residuals.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .features import FrameError, ModelFrame
from .stats import CorrMatrix, correlations

logger = logging.getLogger(__name__)

UNIQUENESS_BOUNDS = (0.005, 1.0)


class FactorError(ValueError):
    pass


@dataclass
class FactorSolution:
    names: list[str]
    loadings: np.ndarray
    uniquenesses: np.ndarray
    rotation: str
    rotation_matrix: np.ndarray
    corr: np.ndarray
    n_obs: int | None = None
    rmsea: float | None = None
    tli: float | None = None
    chi2: float | None = None
    df: int | None = None
    objective: float = float("nan")
    start_objective: float = float("nan")
    heywood: list[str] = field(default_factory=list)
    converged: bool = True
    iterations: int = 0

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    @property
    def communalities(self) -> np.ndarray:
        return np.sum(self.loadings**2, axis=1)

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "n_factors": self.n_factors,
            "rotation": self.rotation,
            "loadings": self.loadings.tolist(),
            "uniquenesses": self.uniquenesses.tolist(),
            "rotation_matrix": self.rotation_matrix.tolist(),
            "corr": self.corr.tolist(),
            "n_obs": self.n_obs,
            "rmsea": self.rmsea,
            "tli": self.tli,
            "chi2": self.chi2,
            "df": self.df,
            "objective": self.objective,
            "start_objective": self.start_objective,
            "heywood": self.heywood,
            "converged": self.converged,
            "iterations": self.iterations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSolution":
        d = dict(d)
        d.pop("n_factors", None)
        for key in ("loadings", "uniquenesses", "rotation_matrix", "corr"):
            d[key] = np.asarray(d[key], dtype=float)
        return cls(**d)

    def render(self, threshold: float = 0.3, factor_names=None) -> str:
        """Loading table; entries below ``threshold`` in magnitude are blanked."""
        k = self.n_factors
        heads = list(factor_names) if factor_names else [f"F{j + 1}" for j in range(k)]
        rows = [["variable", *heads, "h2", "u2"]]
        for i, name in enumerate(self.names):
            cells = [f"{v:.2f}" if abs(v) >= threshold else "" for v in self.loadings[i]]
            rows.append([name, *cells, f"{self.communalities[i]:.2f}", f"{self.uniquenesses[i]:.2f}"])
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        lines = ["  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]).rstrip() for r in rows]
        if self.rmsea is not None:
            lines.append(f"RMSEA = {self.rmsea:.4f}  TLI = {self.tli:.4f}  chi2 = {self.chi2:.3f} (df = {self.df})")
        return "\n".join(lines) + "\n"


def _loadings_from_uniquenesses(corr: np.ndarray, psi: np.ndarray, k: int) -> np.ndarray:
    reduced = corr - np.diag(psi)
    values, vectors = np.linalg.eigh(reduced)
    order = np.argsort(values)[::-1][:k]
    values = np.maximum(values[order], 0.0)
    return vectors[:, order] * np.sqrt(values)


def minres_objective(psi: np.ndarray, corr: np.ndarray, k: int) -> float:
    loadings = _loadings_from_uniquenesses(corr, psi, k)
    resid = corr - loadings @ loadings.T
    np.fill_diagonal(resid, 0.0)
    return float(np.sum(resid**2))


def smc_start(corr: np.ndarray) -> np.ndarray:
    """Starting uniquenesses: 1 - squared multiple correlation."""
    try:
        inv = np.linalg.inv(corr)
        smc = 1.0 - 1.0 / np.diag(inv)
    except np.linalg.LinAlgError:
        smc = np.max(np.abs(corr - np.eye(len(corr))), axis=1)
    lo, hi = UNIQUENESS_BOUNDS
    return np.clip(1.0 - smc, lo, hi)


def _orient(loadings: np.ndarray, rotation: np.ndarray):
    """Order factors by sum of squared loadings, flip so each column's largest entry is positive."""
    order = np.argsort(-np.sum(loadings**2, axis=0), kind="stable")
    loadings, rotation = loadings[:, order], rotation[:, order]
    for j in range(loadings.shape[1]):
        col = loadings[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            loadings[:, j] = -col
            rotation[:, j] = -rotation[:, j]
    return loadings, rotation


def _as_corr(data):
    if isinstance(data, CorrMatrix):
        return list(data.names), np.asarray(data.r, dtype=float), data.n
    if isinstance(data, ModelFrame):
        cm = correlations(data)
        return cm.names, cm.r, cm.n
    raise TypeError("fit_efa expects a CorrMatrix or a ModelFrame")


def fit_efa(data, n_factors: int, rotate: str = "varimax", max_iter: int = 1000) -> FactorSolution:
    """
    Fit a minres factor model with ``n_factors`` factors.

    Parameters
    ----------
    data : CorrMatrix or ModelFrame
        A frame is reduced to the correlation matrix of all its numeric columns.
    n_factors : int
    rotate : {'varimax', 'none'}

    Returns
    -------
    FactorSolution
        Fit indices are filled in when the number of observations is known.
    """
    if rotate not in ("varimax", "none"):
        raise FactorError(f"unknown rotation {rotate!r}")
    names, corr, n_obs = _as_corr(data)
    p = corr.shape[0]
    k = int(n_factors)
    if k < 1:
        raise FactorError("n_factors must be positive")
    if p < k + 1:
        raise FactorError(f"need at least {k + 1} variables for {k} factors, got {p}")
    if not np.allclose(corr, corr.T, atol=1e-10):
        raise FactorError("correlation matrix is not symmetric")
    if np.linalg.eigvalsh(corr).min() < -1e-8:
        raise FactorError("correlation matrix is not positive semidefinite")

    start = smc_start(corr)
    start_obj = minres_objective(start, corr, k)
    res = minimize(
        minres_objective,
        start,
        args=(corr, k),
        method="L-BFGS-B",
        bounds=[UNIQUENESS_BOUNDS] * p,
        options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10},
    )
    psi = res.x
    obj = float(res.fun)
    if obj > start_obj:
        psi, obj = start, start_obj
    if not res.success:
        logger.warning("minres did not converge: %s", res.message)
    heywood = [names[i] for i in np.flatnonzero(psi <= UNIQUENESS_BOUNDS[0] + 1e-9)]
    if heywood:
        logger.warning("Heywood case: uniqueness at lower bound for %s", heywood)

    loadings = _loadings_from_uniquenesses(corr, psi, k)
    rot = np.eye(k)
    if rotate == "varimax":
        loadings, rot = varimax(loadings)
    loadings, rot = _orient(loadings, rot)

    solution = FactorSolution(
        names=list(names),
        loadings=loadings,
        uniquenesses=1.0 - np.sum(loadings**2, axis=1),
        rotation=rotate,
        rotation_matrix=rot,
        corr=corr,
        n_obs=n_obs,
        objective=obj,
        start_objective=start_obj,
        heywood=heywood,
        converged=bool(res.success),
        iterations=int(res.nit),
    )
    if n_obs is not None and n_obs > p and _degrees_of_freedom(p, k) > 0:
        solution.rmsea, solution.tli = fit_indices(solution, corr, n_obs)
    return solution


def varimax_criterion(loadings: np.ndarray) -> float:
    sq = loadings**2
    return float(np.sum(np.mean(sq**2, axis=0) - np.mean(sq, axis=0) ** 2))


def varimax(loadings, normalize: bool = True, tol: float = 1e-7, max_sweeps: int = 1000, history=None):
    """
    Kaiser's varimax by successive planar rotations of factor pairs.

    Parameters
    ----------
    loadings : (p, k) array
    normalize : bool
        Row-normalize by communality before rotating, undone afterwards.
    tol : float
        Stop once a full sweep raises the criterion by less than this.
    history : list, optional
        If given, receives the criterion after the start and after every sweep.

    Returns
    -------
    rotated : (p, k) array
    rotation : (k, k) orthogonal array with ``rotated = loadings @ rotation``
    """
    a = np.array(loadings, dtype=float)
    p, k = a.shape
    rot = np.eye(k)
    if k < 2:
        if history is not None:
            history.append(varimax_criterion(a))
        return a, rot

    if normalize:
        h = np.sqrt(np.sum(a**2, axis=1))
        h[h == 0] = 1.0
        a = a / h[:, None]

    crit = varimax_criterion(a)
    if history is not None:
        history.append(crit)
    for _ in range(max_sweeps):
        a_prev, rot_prev = a.copy(), rot.copy()
        for i in range(k - 1):
            for j in range(i + 1, k):
                x, y = a[:, i], a[:, j]
                u = x * x - y * y
                v = 2.0 * x * y
                num = 2.0 * (np.sum(u * v) - np.sum(u) * np.sum(v) / p)
                den = np.sum(u * u - v * v) - (np.sum(u) ** 2 - np.sum(v) ** 2) / p
                phi = 0.25 * np.arctan2(num, den)
                c, s = np.cos(phi), np.sin(phi)
                plane = np.array([[c, -s], [s, c]])
                a[:, [i, j]] = a[:, [i, j]] @ plane
                rot[:, [i, j]] = rot[:, [i, j]] @ plane
        new = varimax_criterion(a)
        if new < crit:
            # rounding at convergence can cost an ulp; keep the previous sweep
            a, rot = a_prev, rot_prev
            break
        if history is not None:
            history.append(new)
        gain = new - crit
        crit = new
        if gain < tol:
            break

    rotated = np.asarray(loadings, dtype=float) @ rot
    return rotated, rot


def _degrees_of_freedom(p: int, k: int) -> int:
    return ((p - k) ** 2 - p - k) // 2


def _ml_discrepancy(sample: np.ndarray, implied: np.ndarray) -> float:
    p = sample.shape[0]
    _, logdet_implied = np.linalg.slogdet(implied)
    _, logdet_sample = np.linalg.slogdet(sample)
    return float(logdet_implied - logdet_sample + np.trace(np.linalg.solve(implied, sample)) - p)


def fit_indices(solution: FactorSolution, sample_corr, n_obs: int):
    """
    RMSEA and Tucker-Lewis index from the ML discrepancy at the fitted solution.

    The implied matrix is ``L L' + diag(u)``; the baseline is the independence
    model (identity).
    """
    sample = sample_corr.r if isinstance(sample_corr, CorrMatrix) else np.asarray(sample_corr, dtype=float)
    p = sample.shape[0]
    k = solution.n_factors
    if n_obs <= p:
        raise FactorError("fit indices need more observations than variables")
    df = _degrees_of_freedom(p, k)
    if df <= 0:
        raise FactorError(f"model with {k} factors on {p} variables has df = {df} <= 0")
    implied = solution.loadings @ solution.loadings.T + np.diag(solution.uniquenesses)
    chi2 = (n_obs - 1) * _ml_discrepancy(sample, implied)
    df0 = p * (p - 1) // 2
    chi2_0 = (n_obs - 1) * _ml_discrepancy(sample, np.eye(p))
    rmsea = float(np.sqrt(max((chi2 - df) / (df * (n_obs - 1)), 0.0)))
    tli = baseline_tli(chi2_0, df0, chi2, df)
    solution.chi2, solution.df = float(chi2), int(df)
    return rmsea, tli


def baseline_tli(chi2_0: float, df0: int, chi2: float, df: int) -> float:
    ratio0 = chi2_0 / df0
    return float((ratio0 - chi2 / df) / (ratio0 - 1.0))


def factor_scores(solution: FactorSolution, frame: ModelFrame, names=None, ridge: float = 0.0) -> ModelFrame:
    """
    Append regression-method (Thurstone) factor scores ``Z R^-1 L``.

    ``frame`` must hold the solution's variables, standardized.
    """
    names = list(names) if names else [f"factor_{j + 1}" for j in range(solution.n_factors)]
    if len(names) != solution.n_factors:
        raise FactorError(f"expected {solution.n_factors} score names, got {len(names)}")
    z = frame.matrix(solution.names)
    corr = solution.corr + ridge * np.eye(len(solution.names))
    if np.linalg.cond(corr) > 1e12:
        raise FactorError("correlation matrix is singular; pass ridge > 0 (e.g. 1e-6)")
    weights = np.linalg.solve(corr, solution.loadings)
    scores = z @ weights
    return frame.with_numeric(**{n: scores[:, j] for j, n in enumerate(names)})


def fit_frame_efa(frame: ModelFrame, columns, n_factors: int, rotate: str = "varimax") -> FactorSolution:
    missing = [c for c in columns if c not in frame.numeric]
    if missing:
        raise FrameError(f"unknown numeric columns {missing}")
    return fit_efa(correlations(frame, columns), n_factors, rotate)
