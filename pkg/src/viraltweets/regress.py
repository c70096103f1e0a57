"""
Count and linear regression by maximum likelihood, plus the two-stage
control-function procedure and Wald / likelihood-ratio tests.

Families
--------
gaussian_ols
    Least squares via QR; sigma^2 = RSS / (n - p).
poisson
    Log link, Newton-Raphson with step halving.
negbin
    NB2 (Var = mu + alpha * mu^2). Alternates a Newton step on beta with a
    safeguarded one-dimensional Newton solve on log(alpha).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.special import gammaln
from scipy.stats import chi2, norm
from scipy.stats import t as student_t

from .features import FrameError, ModelFrame

logger = logging.getLogger(__name__)

FAMILIES = ("gaussian_ols", "poisson", "negbin")
FAMILY_ALIASES = {"ols": "gaussian_ols", "gaussian": "gaussian_ols", "nb": "negbin", "nb2": "negbin"}

ALPHA_MIN = 1e-10
ALPHA_MAX = 1e6
MAX_ITER = 100
MAX_HALVINGS = 50
# beyond this response size the NB2 dispersion terms switch from exact sums to digamma identities
_CUMSUM_LIMIT = 2_000_000


class RegressionError(ValueError):
    pass


class RankDeficientError(RegressionError):
    def __init__(self, aliased):
        self.aliased = list(aliased)
        super().__init__(f"design matrix is rank deficient; aliased columns: {', '.join(self.aliased)}")


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


def canonical_family(family: str) -> str:
    family = FAMILY_ALIASES.get(family, family)
    if family not in FAMILIES:
        raise RegressionError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return family


@dataclass(frozen=True)
class Term:
    name: str
    squared: bool = False

    @property
    def label(self) -> str:
        return f"{self.name}^2" if self.squared else self.name

    def __str__(self):
        return self.label


@dataclass(frozen=True)
class ModelSpec:
    response: str
    terms: tuple[Term, ...] = ()
    family: str = "poisson"
    offset: str | None = None
    scale: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        terms = tuple(t if isinstance(t, Term) else Term(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "family", canonical_family(self.family))
        if isinstance(self.scale, dict):
            object.__setattr__(self, "scale", tuple(sorted(self.scale.items())))
        labels = [t.label for t in terms]
        dupes = sorted({x for x in labels if labels.count(x) > 1})
        if dupes:
            raise RegressionError(f"duplicate terms: {dupes}")
        if any(t.name == self.response for t in terms):
            raise RegressionError(f"response {self.response!r} appears among the terms")

    def with_terms(self, extra=(), drop=()) -> "ModelSpec":
        drop = set(drop)
        kept = [t for t in self.terms if t.name not in drop]
        kept += [t if isinstance(t, Term) else Term(t) for t in extra]
        return replace(self, terms=tuple(kept))

    def formula(self) -> str:
        rhs = " + ".join(t.label for t in self.terms) or "1"
        return f"{self.response} ~ {rhs}"

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "terms": [{"name": t.name, "squared": t.squared} for t in self.terms],
            "family": self.family,
            "offset": self.offset,
            "scale": [list(s) for s in self.scale],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            response=d["response"],
            terms=tuple(Term(t["name"], t["squared"]) for t in d["terms"]),
            family=d["family"],
            offset=d.get("offset"),
            scale=tuple((k, float(v)) for k, v in d.get("scale", [])),
        )


# ----------------------------------------------------------------------------
# design matrices


def design_matrix(frame: ModelFrame, spec: ModelSpec, check_rank: bool = True):
    """
    Build ``(X, y, names)`` with an intercept column first.

    Categorical terms contribute one dummy per observed non-reference level,
    named ``"name:level"``; the reference is the first declared level present
    in the data. Squared terms are computed here, never stored in the frame.
    """
    if spec.response not in frame.numeric:
        raise FrameError(f"unknown response column {spec.response!r}")
    scale = dict(spec.scale)
    cols = [np.ones(frame.n_rows)]
    names = ["(Intercept)"]
    for term in spec.terms:
        if term.name in frame.categorical:
            if term.squared:
                raise RegressionError(f"cannot square categorical term {term.name!r}")
            cat = frame.categorical[term.name]
            present = sorted(set(cat.codes.tolist()))
            for code in present[1:]:
                cols.append((cat.codes == code).astype(float))
                names.append(f"{term.name}:{cat.levels[code]}")
        elif term.name in frame.numeric:
            x = frame.numeric[term.name] * scale.get(term.name, 1.0)
            cols.append(x * x if term.squared else x)
            names.append(term.label)
        else:
            raise FrameError(f"unknown column {term.name!r}")
    X = np.column_stack(cols)
    y = np.array(frame.numeric[spec.response], dtype=float)
    if check_rank:
        check_full_rank(X, names)
    return X, y, names


def _column_scale(X: np.ndarray) -> np.ndarray:
    s = np.max(np.abs(X), axis=0)
    s[s == 0] = 1.0
    return s


def check_full_rank(X: np.ndarray, names) -> None:
    n, p = X.shape
    if n < p:
        raise RankDeficientError(names[n:])
    Xs = X / _column_scale(X)
    _, R, piv = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if len(diag) else 0.0) * 1e3
    rank = int(np.sum(diag > tol))
    if rank < p:
        raise RankDeficientError([names[i] for i in sorted(piv[rank:])])


# ----------------------------------------------------------------------------
# fit container


@dataclass
class RegressionFit:
    spec: ModelSpec
    names: list[str]
    beta: np.ndarray
    covariance: np.ndarray
    loglik: float
    n_obs: int
    converged: bool = True
    iterations: int = 0
    dispersion: float | None = None
    dispersion_se: float | None = None
    sigma: float | None = None
    r_squared: float | None = None
    adj_r_squared: float | None = None
    fitted_mu: np.ndarray = field(default=None, repr=False)
    residuals_response: np.ndarray = field(default=None, repr=False)
    row_ids: list[str] | None = field(default=None, repr=False)
    notes: list[str] = field(default_factory=list)

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def n_params(self) -> int:
        # sigma for OLS and alpha for NB2 are counted as parameters
        return len(self.beta) + (0 if self.family == "poisson" else 1)

    @property
    def aic(self) -> float:
        return 2.0 * self.n_params - 2.0 * self.loglik

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.beta / self.se

    @property
    def p(self) -> np.ndarray:
        if self.family == "gaussian_ols":
            return 2.0 * student_t.sf(np.abs(self.z), self.n_obs - len(self.beta))
        return 2.0 * norm.sf(np.abs(self.z))

    def coef(self, name: str) -> float:
        return float(self.beta[self.index(name)])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise RegressionError(f"no coefficient named {name!r}") from None

    def records(self) -> list[dict]:
        return [
            {"name": n, "estimate": float(b), "se": float(s), "z": float(z), "p": float(p)}
            for n, b, s, z, p in zip(self.names, self.beta, self.se, self.z, self.p)
        ]

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()

        return {
            "spec": self.spec.to_dict(),
            "names": self.names,
            "beta": arr(self.beta),
            "covariance": arr(self.covariance),
            "loglik": self.loglik,
            "n_obs": self.n_obs,
            "converged": self.converged,
            "iterations": self.iterations,
            "dispersion": self.dispersion,
            "dispersion_se": self.dispersion_se,
            "sigma": self.sigma,
            "r_squared": self.r_squared,
            "adj_r_squared": self.adj_r_squared,
            "fitted_mu": arr(self.fitted_mu),
            "residuals_response": arr(self.residuals_response),
            "row_ids": self.row_ids,
            "notes": self.notes,
            "aic": self.aic,
            "coefficients": self.records(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionFit":
        d = dict(d)
        d.pop("aic", None)
        d.pop("coefficients", None)
        d["spec"] = ModelSpec.from_dict(d["spec"])
        for key in ("beta", "covariance", "fitted_mu", "residuals_response"):
            if d.get(key) is not None:
                d[key] = np.asarray(d[key], dtype=float)
        return cls(**d)

    def render(self) -> str:
        return render_fits([self])


# ----------------------------------------------------------------------------
# OLS


def fit_ols(frame: ModelFrame, spec: ModelSpec) -> RegressionFit:
    spec = replace(spec, family="gaussian_ols")
    X, y, names = design_matrix(frame, spec)
    if spec.offset:
        y = y - frame.column(spec.offset)
    return _ols_core(X, y, names, spec, frame.row_ids)


def _ols_core(X, y, names, spec, row_ids=None) -> RegressionFit:
    n, p = X.shape
    if n <= p:
        raise RegressionError(f"OLS needs n > p (n={n}, p={p})")
    Q, R = np.linalg.qr(X)
    beta = scipy.linalg.solve_triangular(R, Q.T @ y)
    fitted = X @ beta
    resid = y - fitted
    rss = float(resid @ resid)
    sigma2 = rss / (n - p)
    rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    cov = sigma2 * (rinv @ rinv.T)
    cov = (cov + cov.T) / 2
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p) if tss > 0 else float("nan")
    sigma2_ml = rss / n
    loglik = -0.5 * n * (math.log(2 * math.pi * sigma2_ml) + 1.0) if sigma2_ml > 0 else float("inf")
    return RegressionFit(
        spec=spec,
        names=list(names),
        beta=beta,
        covariance=cov,
        loglik=loglik,
        n_obs=n,
        sigma=math.sqrt(sigma2),
        r_squared=r2,
        adj_r_squared=adj,
        fitted_mu=fitted,
        residuals_response=resid,
        row_ids=None if row_ids is None else list(row_ids),
    )


# ----------------------------------------------------------------------------
# Poisson


def poisson_logpmf(k, lam):
    """log P(Y = k) for Y ~ Poisson(lam); vectorized."""
    lam = np.asarray(lam, dtype=float)
    k = np.asarray(k, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("Poisson mean must be positive")
    out = k * np.log(lam) - lam - gammaln(k + 1.0)
    return float(out) if out.ndim == 0 else out


def poisson_loglik(beta, X, y, offset=None) -> float:
    eta = X @ beta + (0 if offset is None else offset)
    if np.max(eta) > 700:
        return -np.inf
    mu = np.exp(eta)
    return float(np.sum(y * eta - mu - gammaln(y + 1.0)))


def poisson_score(beta, X, y, offset=None) -> np.ndarray:
    eta = X @ beta + (0 if offset is None else offset)
    return X.T @ (y - np.exp(eta))


def _check_counts(y):
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise RegressionError("count models need a nonnegative integer response")


def _solve_pd(H, g):
    """Solve H x = g for symmetric positive definite H, falling back to lstsq."""
    try:
        c = scipy.linalg.cho_factor(H)
        return scipy.linalg.cho_solve(c, g)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        return np.linalg.lstsq(H, g, rcond=None)[0]


def _inverse_pd(H):
    try:
        c = scipy.linalg.cho_factor(H)
        inv = scipy.linalg.cho_solve(c, np.eye(len(H)))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        inv = np.linalg.pinv(H)
    return (inv + inv.T) / 2


def _start_beta(y, p):
    beta = np.zeros(p)
    beta[0] = math.log(float(np.mean(y)) + 0.5)
    return beta


def _newton_poisson(X, y, offset, beta, trace, max_iter=None):
    """Newton iterations on scaled columns. Returns (beta, loglik, iterations, converged)."""
    max_iter = MAX_ITER if max_iter is None else max_iter
    s = _column_scale(X)
    Xs = X / s
    gamma = beta * s
    ll = poisson_loglik(gamma, Xs, y, offset)
    if not np.isfinite(ll):
        gamma = np.zeros_like(gamma)
        gamma[0] = math.log(float(np.mean(y)) + 0.5)
        ll = poisson_loglik(gamma, Xs, y, offset)
    for it in range(1, max_iter + 1):
        eta = Xs @ gamma + (0 if offset is None else offset)
        mu = np.exp(eta)
        grad = Xs.T @ (y - mu)
        H = (Xs * mu[:, None]).T @ Xs
        step = _solve_pd(H, grad)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = gamma + t * step
            ll_new = poisson_loglik(cand, Xs, y, offset)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        else:
            trace.append({"iteration": it, "loglik": ll, "note": "step halving exhausted"})
            raise ConvergenceError("Poisson Newton step could not improve the log-likelihood", trace)
        delta = np.max(np.abs((cand - gamma) / s))
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        gamma, ll = cand, ll_new
        trace.append({"iteration": it, "loglik": ll, "max_step": float(delta), "step": t})
        if delta < 1e-8 or (rel < 1e-10 and t == 1.0):
            return gamma / s, ll, it, True
    return gamma / s, ll, max_iter, False


def fit_poisson(frame: ModelFrame, spec: ModelSpec) -> RegressionFit:
    spec = replace(spec, family="poisson")
    X, y, names = design_matrix(frame, spec)
    offset = frame.column(spec.offset) if spec.offset else None
    return _poisson_core(X, y, names, spec, offset, frame.row_ids)


def _poisson_core(X, y, names, spec, offset=None, row_ids=None) -> RegressionFit:
    _check_counts(y)
    n, p = X.shape
    if n <= p:
        raise RegressionError(f"need n > p (n={n}, p={p})")
    trace: list[dict] = []
    beta, ll, iters, converged = _newton_poisson(X, y, offset, _start_beta(y, p), trace)
    if not converged:
        raise ConvergenceError(f"Poisson fit did not converge in {MAX_ITER} iterations", trace)
    eta = X @ beta + (0 if offset is None else offset)
    mu = np.exp(eta)
    info = (X * mu[:, None]).T @ X
    cov = _scaled_inverse(info)
    return RegressionFit(
        spec=spec,
        names=list(names),
        beta=beta,
        covariance=cov,
        loglik=ll,
        n_obs=n,
        converged=True,
        iterations=iters,
        fitted_mu=mu,
        residuals_response=y - mu,
        row_ids=None if row_ids is None else list(row_ids),
    )


def _scaled_inverse(info):
    # inverse via symmetric diagonal scaling for conditioning
    d = np.sqrt(np.clip(np.diag(info), 1e-300, None))
    inv = _inverse_pd(info / np.outer(d, d))
    return inv / np.outer(d, d)


# ----------------------------------------------------------------------------
# NB2


def _h(x):
    """(log1p(x) - x/(1+x)) / x^2, stable near zero."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    acc = np.zeros_like(xs)
    for k in range(14, 1, -1):
        acc = acc * xs + (-1) ** k * (k - 1) / k
    out[small] = acc
    xl = x[~small]
    out[~small] = (np.log1p(xl) - xl / (1 + xl)) / xl**2
    return out


def _h_prime(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    acc = np.zeros_like(xs)
    for k in range(16, 2, -1):
        acc = acc * xs + (-1) ** k * (k - 1) * (k - 2) / k
    out[small] = acc
    xl = x[~small]
    hl = (np.log1p(xl) - xl / (1 + xl)) / xl**2
    out[~small] = 1.0 / (xl * (1 + xl) ** 2) - 2.0 * hl / xl
    return out


class _DispersionSums:
    """Sums over j < y of log1p(j a), j/(1+j a) and j^2/(1+j a)^2 for every y in the response."""

    def __init__(self, y):
        self.y = np.asarray(y, dtype=np.int64)
        self.ymax = int(self.y.max()) if len(self.y) else 0

    def __call__(self, alpha):
        y = self.y
        if self.ymax <= _CUMSUM_LIMIT:
            j = np.arange(self.ymax, dtype=float)
            ja = j * alpha
            tables = []
            for term in (np.log1p(ja), j / (1 + ja), (j / (1 + ja)) ** 2):
                tables.append(np.concatenate(([0.0], np.cumsum(term)))[y])
            return tables
        from scipy.special import digamma, polygamma

        r = 1.0 / alpha
        yf = y.astype(float)
        dpsi = digamma(yf + r) - digamma(r)
        d0 = gammaln(yf + r) - gammaln(r) - yf * np.log(r)
        d1 = (yf - r * dpsi) / alpha
        d2 = (yf - 2 * r * dpsi + r * r * (polygamma(1, r) - polygamma(1, yf + r))) / alpha**2
        return [d0, d1, d2]


def nb2_loglik_terms(y, mu, alpha, sums=None):
    """Per-observation NB2 log-likelihood."""
    sums = sums or _DispersionSums(y)
    d0, _, _ = sums(alpha)
    am = alpha * mu
    return d0 + y * np.log(mu) - y * np.log1p(am) - np.log1p(am) / alpha - gammaln(y + 1.0)


def nb2_loglik(beta, alpha, X, y, offset=None, sums=None) -> float:
    eta = X @ beta + (0 if offset is None else offset)
    if np.max(eta) > 700:
        return -np.inf
    return float(np.sum(nb2_loglik_terms(y, np.exp(eta), alpha, sums)))


def nb2_gradient(beta, alpha, X, y, offset=None, sums=None):
    """Score with respect to (beta, log alpha)."""
    sums = sums or _DispersionSums(y)
    mu = np.exp(X @ beta + (0 if offset is None else offset))
    am = alpha * mu
    g_beta = X.T @ ((y - mu) / (1 + am))
    _, d1, _ = sums(alpha)
    l_alpha = np.sum(d1 - y * mu / (1 + am) + mu**2 * _h(am))
    return np.append(g_beta, alpha * l_alpha)


def nb2_information(beta, alpha, X, y, offset=None, sums=None):
    """Observed information (negative Hessian) in (beta, log alpha)."""
    sums = sums or _DispersionSums(y)
    mu = np.exp(X @ beta + (0 if offset is None else offset))
    am = alpha * mu
    w = mu * (1 + alpha * y) / (1 + am) ** 2
    H_bb = (X * w[:, None]).T @ X
    H_ba = X.T @ (mu * (y - mu) / (1 + am) ** 2) * alpha
    _, d1, d2 = sums(alpha)
    l_a = np.sum(d1 - y * mu / (1 + am) + mu**2 * _h(am))
    l_aa = np.sum(-d2 + y * mu**2 / (1 + am) ** 2 + mu**3 * _h_prime(am))
    l_tt = alpha**2 * l_aa + alpha * l_a
    p = len(beta)
    info = np.empty((p + 1, p + 1))
    info[:p, :p] = H_bb
    info[:p, p] = info[p, :p] = H_ba
    info[p, p] = -l_tt
    return info


def _alpha_score(alpha, y, mu, sums):
    _, d1, d2 = sums(alpha)
    am = alpha * mu
    l_a = np.sum(d1 - y * mu / (1 + am) + mu**2 * _h(am))
    l_aa = np.sum(-d2 + y * mu**2 / (1 + am) ** 2 + mu**3 * _h_prime(am))
    # derivatives in theta = log(alpha)
    return alpha * l_a, alpha**2 * l_aa + alpha * l_a


def _maximize_alpha(y, mu, sums, theta0):
    """
    Maximize the NB2 log-likelihood in log(alpha) for fixed means.

    Newton on the score with a bisection fallback inside a sign-change
    bracket. Returns (alpha, at_lower_bound).
    """
    lo = math.log(ALPHA_MIN)
    g_lo, _ = _alpha_score(ALPHA_MIN, y, mu, sums)
    if g_lo <= 0:
        return ALPHA_MIN, True
    hi = max(theta0, 0.0) + 1.0
    while True:
        g_hi, _ = _alpha_score(math.exp(hi), y, mu, sums)
        if g_hi < 0:
            break
        lo = hi
        hi += 2.0
        if hi > math.log(ALPHA_MAX):
            raise ConvergenceError("dispersion estimate diverged (alpha > 1e6)")
    theta = min(max(theta0, lo), hi)
    for _ in range(200):
        g, gp = _alpha_score(math.exp(theta), y, mu, sums)
        if g > 0:
            lo = theta
        else:
            hi = theta
        step = -g / gp if gp < 0 else None
        new = theta + step if step is not None else None
        if new is None or not (lo < new < hi):
            new = 0.5 * (lo + hi)
        if abs(new - theta) < 1e-12 or hi - lo < 1e-12:
            theta = new
            break
        theta = new
    return math.exp(theta), False


def fit_negbin(frame: ModelFrame, spec: ModelSpec) -> RegressionFit:
    spec = replace(spec, family="negbin")
    X, y, names = design_matrix(frame, spec)
    offset = frame.column(spec.offset) if spec.offset else None
    return _negbin_core(X, y, names, spec, offset, frame.row_ids)


def _negbin_core(X, y, names, spec, offset=None, row_ids=None) -> RegressionFit:
    _check_counts(y)
    n, p = X.shape
    if n <= p:
        raise RegressionError(f"need n > p (n={n}, p={p})")
    off = 0 if offset is None else offset
    trace: list[dict] = []
    beta, _, _, _ = _newton_poisson(X, y, offset, _start_beta(y, p), trace)
    mu = np.exp(X @ beta + off)
    mom = float(np.sum((y - mu) ** 2 - y) / np.sum(mu**2))
    alpha = min(max(mom, 1e-4), 10.0)

    sums = _DispersionSums(y)
    s = _column_scale(X)
    Xs = X / s
    gamma = beta * s
    ll = nb2_loglik(gamma, alpha, Xs, y, offset, sums)
    at_bound = False
    converged = False
    iters = 0
    for iters in range(1, MAX_ITER + 1):
        eta = Xs @ gamma + off
        mu = np.exp(eta)
        am = alpha * mu
        grad = Xs.T @ ((y - mu) / (1 + am))
        w = mu * (1 + alpha * y) / (1 + am) ** 2
        H = (Xs * w[:, None]).T @ Xs
        step = _solve_pd(H, grad)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = gamma + t * step
            ll_new = nb2_loglik(cand, alpha, Xs, y, offset, sums)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        else:
            raise ConvergenceError("NB2 beta step could not improve the log-likelihood", trace)
        mu = np.exp(Xs @ cand + off)
        new_alpha, at_bound = _maximize_alpha(y, mu, sums, math.log(alpha))
        ll_new = nb2_loglik(cand, new_alpha, Xs, y, offset, sums)
        d_beta = float(np.max(np.abs((cand - gamma) / s)))
        d_theta = abs(math.log(new_alpha) - math.log(alpha))
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        gamma, alpha, ll = cand, new_alpha, ll_new
        trace.append({"iteration": iters, "loglik": ll, "alpha": alpha, "max_step": d_beta, "step": t})
        if (d_beta < 1e-8 and d_theta < 1e-8) or (rel < 1e-10 and t == 1.0 and d_theta < 1e-6):
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"NB2 fit did not converge in {MAX_ITER} iterations", trace)

    beta = gamma / s
    mu = np.exp(X @ beta + off)
    notes = []
    if at_bound:
        notes.append("dispersion at lower bound 1e-10: Poisson is adequate")
        am = alpha * mu
        info_b = (X * (mu * (1 + alpha * y) / (1 + am) ** 2)[:, None]).T @ X
        cov = _scaled_inverse(info_b)
        alpha_se = float("nan")
    else:
        info = nb2_information(beta, alpha, X, y, offset, sums)
        full = _scaled_inverse(info)
        cov = full[:p, :p]
        alpha_se = float(alpha * math.sqrt(max(full[p, p], 0.0)))
    return RegressionFit(
        spec=spec,
        names=list(names),
        beta=beta,
        covariance=cov,
        loglik=ll,
        n_obs=n,
        converged=True,
        iterations=iters,
        dispersion=alpha,
        dispersion_se=alpha_se,
        fitted_mu=mu,
        residuals_response=y - mu,
        row_ids=None if row_ids is None else list(row_ids),
        notes=notes,
    )


def fit(frame: ModelFrame, spec: ModelSpec) -> RegressionFit:
    return {"gaussian_ols": fit_ols, "poisson": fit_poisson, "negbin": fit_negbin}[spec.family](frame, spec)


def loglik_function(fit_: RegressionFit, frame: ModelFrame):
    """Log-likelihood as a function of the free parameters of ``fit_``'s model on ``frame``.

    Poisson: beta. NB2: (beta, log alpha). OLS: beta at the ML variance.
    """
    X, y, _ = design_matrix(frame, fit_.spec, check_rank=False)
    offset = frame.column(fit_.spec.offset) if fit_.spec.offset else None
    if fit_.family == "poisson":
        return lambda b: poisson_loglik(b, X, y, offset)
    if fit_.family == "negbin":
        sums = _DispersionSums(y)
        p = X.shape[1]
        return lambda v: nb2_loglik(v[:p], math.exp(v[p]), X, y, offset, sums)
    n = len(y)

    def gaussian(b):
        r = y - X @ b
        return -0.5 * n * (math.log(2 * math.pi * float(r @ r) / n) + 1.0)

    return gaussian


def score_function(fit_: RegressionFit, frame: ModelFrame):
    """Analytic score matching :func:`loglik_function`."""
    X, y, _ = design_matrix(frame, fit_.spec, check_rank=False)
    offset = frame.column(fit_.spec.offset) if fit_.spec.offset else None
    if fit_.family == "poisson":
        return lambda b: poisson_score(b, X, y, offset)
    if fit_.family == "negbin":
        sums = _DispersionSums(y)
        p = X.shape[1]
        return lambda v: nb2_gradient(v[:p], math.exp(v[p]), X, y, offset, sums)
    n = len(y)

    def gaussian(b):
        r = y - X @ b
        return n * (X.T @ r) / float(r @ r)

    return gaussian


def parameter_vector(fit_: RegressionFit) -> np.ndarray:
    if fit_.family == "negbin":
        return np.append(fit_.beta, math.log(fit_.dispersion))
    return np.array(fit_.beta, dtype=float)


# ----------------------------------------------------------------------------
# tests


@dataclass(frozen=True)
class TestResult:
    kind: str
    statistic: float
    df: int
    p_value: float

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {"kind": self.kind, "statistic": self.statistic, "df": self.df, "p_value": self.p_value}

    def render(self) -> str:
        label = "Wald" if self.kind == "wald" else "LR"
        return f"{label} test: chi2 = {self.statistic:.4f}, df = {self.df}, p = {self.p_value:.4g}"


def wald_test(fit_: RegressionFit, coefficient: str) -> TestResult:
    j = fit_.index(coefficient)
    z = fit_.beta[j] / fit_.se[j]
    stat = float(z * z)
    return TestResult("wald", stat, 1, float(chi2.sf(stat, 1)))


def lr_test(restricted: RegressionFit, full: RegressionFit) -> TestResult:
    if restricted.family != full.family:
        raise RegressionError("likelihood ratio test needs fits from the same family")
    if restricted.n_obs != full.n_obs or (
        restricted.row_ids is not None and full.row_ids is not None and restricted.row_ids != full.row_ids
    ):
        raise RegressionError("likelihood ratio test needs fits on the same rows")
    if restricted.spec.response != full.spec.response:
        raise RegressionError("likelihood ratio test needs the same response")
    missing = set(restricted.names) - set(full.names)
    if missing:
        raise RegressionError(f"models are not nested; restricted has {sorted(missing)}")
    df = full.n_params - restricted.n_params
    if df <= 0:
        raise RegressionError(f"full model must have more parameters (df = {df})")
    diff = full.loglik - restricted.loglik
    if diff < -1e-8:
        raise RegressionError(
            f"full model log-likelihood is below the restricted one by {-diff:.3g}; optimizer failure"
        )
    stat = max(2.0 * diff, 0.0)
    return TestResult("lr", stat, int(df), float(chi2.sf(stat, df)))


# ----------------------------------------------------------------------------
# control function


@dataclass
class TwoStageFit:
    stage1: RegressionFit
    stage2: RegressionFit
    residual_column_name: str
    wald_on_residual: TestResult
    mode: str = "as-written"
    residual_type: str = "response"
    endogenous: str = ""
    instrument: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "residual_type": self.residual_type,
            "endogenous": self.endogenous,
            "instrument": self.instrument,
            "residual_column_name": self.residual_column_name,
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "wald_on_residual": self.wald_on_residual.to_dict(),
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TwoStageFit":
        return cls(
            stage1=RegressionFit.from_dict(d["stage1"]),
            stage2=RegressionFit.from_dict(d["stage2"]),
            residual_column_name=d["residual_column_name"],
            wald_on_residual=TestResult(**d["wald_on_residual"]),
            mode=d["mode"],
            residual_type=d["residual_type"],
            endogenous=d["endogenous"],
            instrument=d["instrument"],
            warnings=list(d.get("warnings", [])),
        )

    def render(self) -> str:
        out = ["Stage 1", render_fits([self.stage1]), "Stage 2", render_fits([self.stage2])]
        out.append(f"Residual {self.residual_column_name!r}: {self.wald_on_residual.render()}")
        return "\n".join(out) + "\n"


def residuals(fit_: RegressionFit, y, kind: str = "response") -> np.ndarray:
    mu = fit_.fitted_mu
    raw = y - mu
    if kind == "response":
        return raw
    fam = fit_.family
    if kind == "pearson":
        if fam == "gaussian_ols":
            return raw / fit_.sigma
        var = mu if fam == "poisson" else mu + fit_.dispersion * mu**2
        return raw / np.sqrt(var)
    if kind == "deviance":
        if fam == "gaussian_ols":
            return raw
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(y / mu), 0.0)
        if fam == "poisson":
            dev = 2 * (ylogy - raw)
        else:
            a = fit_.dispersion
            dev = 2 * (ylogy - (y + 1 / a) * np.log((1 + a * y) / (1 + a * mu)))
        return np.sign(raw) * np.sqrt(np.clip(dev, 0.0, None))
    raise RegressionError(f"unknown residual type {kind!r}")


def control_function_fit(
    frame: ModelFrame,
    endogenous: str,
    instrument: str,
    spec: ModelSpec,
    family: str | None = None,
    mode: str = "as-written",
    residual: str = "response",
    residual_name: str = "cf_residual",
) -> TwoStageFit:
    """
    Two-stage control-function fit.

    ``as-written``: stage 1 regresses the outcome on the exogenous terms plus
    the instrument (endogenous regressor left out); stage 2 regresses the
    outcome on the exogenous terms, the endogenous regressor and the stage-1
    residual. ``conventional``: stage 1 is OLS of the endogenous regressor on
    the exogenous terms plus the instrument.
    """
    family = canonical_family(family or spec.family)
    spec = replace(spec, family=family)
    if mode not in ("as-written", "conventional"):
        raise RegressionError(f"unknown control-function mode {mode!r}")
    for col in (endogenous, instrument):
        if col not in frame.numeric:
            raise FrameError(f"{col!r} must be a numeric column")
    names_in_spec = {t.name for t in spec.terms}
    if endogenous in names_in_spec or instrument in names_in_spec:
        raise RegressionError("spec must not contain the endogenous regressor or the instrument")
    if residual_name in frame:
        raise RegressionError(f"frame already has a column named {residual_name!r}")

    warnings = []
    w, z = frame.column(endogenous), frame.column(instrument)
    if np.std(w) > 0 and np.std(z) > 0:
        rho = float(np.corrcoef(w, z)[0, 1])
        if abs(rho) < 0.05:
            msg = f"weak instrument: corr({instrument}, {endogenous}) = {rho:.3f}"
            logger.warning(msg)
            warnings.append(msg)

    if mode == "as-written":
        s1_spec = spec.with_terms(extra=[Term(instrument)])
        stage1 = fit(frame, s1_spec)
        y1 = frame.column(spec.response)
    else:
        s1_spec = ModelSpec(endogenous, spec.terms + (Term(instrument),), "gaussian_ols", scale=spec.scale)
        stage1 = fit_ols(frame, s1_spec)
        y1 = w
    eps = residuals(stage1, y1, residual)
    augmented = frame.with_numeric(**{residual_name: eps})
    s2_spec = spec.with_terms(extra=[Term(endogenous), Term(residual_name)])
    stage2 = fit(augmented, s2_spec)
    return TwoStageFit(
        stage1=stage1,
        stage2=stage2,
        residual_column_name=residual_name,
        wald_on_residual=wald_test(stage2, residual_name),
        mode=mode,
        residual_type=residual,
        endogenous=endogenous,
        instrument=instrument,
        warnings=warnings,
    )


# ----------------------------------------------------------------------------
# rendering


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _fmt(v: float) -> str:
    if not math.isfinite(v):
        return "nan"
    if v == 0 or 1e-4 <= abs(v) < 1e6:
        return f"{v:.4f}"
    return f"{v:.4e}"


def render_fits(fits, titles=None) -> str:
    """Side-by-side coefficient table: estimate with stars, SE in parentheses underneath."""
    titles = list(titles) if titles else [f"({i + 1}) {f.family}" for i, f in enumerate(fits)]
    names: list[str] = []
    for f in fits:
        for n in f.names:
            if n not in names:
                names.append(n)
    # intercept goes last, as "Constant"
    names = [n for n in names if n != "(Intercept)"] + (["(Intercept)"] if any("(Intercept)" in f.names for f in fits) else [])
    rows = [["", *titles]]
    for name in names:
        est, se = [], []
        for f in fits:
            if name in f.names:
                j = f.names.index(name)
                est.append(f"{_fmt(f.beta[j])}{stars(f.p[j])}")
                se.append(f"({_fmt(f.se[j])})")
            else:
                est.append("")
                se.append("")
        rows.append(["Constant" if name == "(Intercept)" else name, *est])
        rows.append(["", *se])
    rows.append(["Observations", *(f"{f.n_obs:,}" for f in fits)])
    rows.append(["R2", *("" if f.r_squared is None else f"{f.r_squared:.4f}" for f in fits)])
    rows.append(["Adjusted R2", *("" if f.adj_r_squared is None else f"{f.adj_r_squared:.4f}" for f in fits)])
    rows.append(["Log Likelihood", *(f"{f.loglik:.3f}" for f in fits)])
    rows.append(["Akaike Inf. Crit.", *(f"{f.aic:.3f}" for f in fits)])
    rows.append(["Residual Std. Error", *("" if f.sigma is None else f"{f.sigma:.4f}" for f in fits)])
    rows.append(
        ["alpha (NB2)", *("" if f.dispersion is None else f"{_fmt(f.dispersion)} ({_fmt(f.dispersion_se)})" for f in fits)]
    )
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = ["  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]).rstrip() for r in rows]
    lines.append("Note: *p<0.05; **p<0.01; ***p<0.001")
    for f in fits:
        lines.extend(f"Note: {n}" for n in f.notes)
    return "\n".join(lines) + "\n"
