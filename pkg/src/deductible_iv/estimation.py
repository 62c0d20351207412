"""Econometric core: logistic MLE, two-stage residual inclusion, diagnostics.

The causal pipeline: a first-stage logit of the treatment (family deductible
met) on the instrument (family member's accidental injury) plus covariates;
probability-scale residuals r = D - p carried into a second-stage logit of
each outcome on treatment, covariates, and the residual.  The treatment
coefficient's marginal effect at covariate means is the complier-average
effect in percentage points.  Inference is a family-clustered percentile
bootstrap re-running both stages.

Comparators: a naive single-stage logit and a linear two-stage least squares
fit, plus a placebo regression of prior-period treatment on current
instrument for panel data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from . import codes

GRADIENT_TOL = 1e-8
LL_REL_TOL = 1e-12
MAX_ITER = 100
SEPARATION_BETA = 30.0

TREATMENT = "treatment_d"
INSTRUMENT = "instrument_z"
RESIDUAL = "residual"


class SeparationError(RuntimeError):
    """Perfect or quasi-separation: coefficients diverge."""


class CollinearityError(RuntimeError):
    """Singular information matrix; design has linearly dependent columns."""


class UnknownRegressorError(KeyError):
    pass


class UnstableBootstrapError(RuntimeError):
    """More than 10% of bootstrap replicates failed to converge."""


@dataclass
class DesignMatrix:
    """Response, named regressor columns, and family cluster codes."""

    X: np.ndarray
    y: np.ndarray
    names: list[str]
    cluster_ids: np.ndarray  # integer family codes, aligned with rows
    dropped: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.y)

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownRegressorError(name) from None

    def with_column(self, name: str, values: np.ndarray) -> "DesignMatrix":
        return DesignMatrix(
            X=np.column_stack([self.X, values]),
            y=self.y,
            names=self.names + [name],
            cluster_ids=self.cluster_ids,
            dropped=list(self.dropped),
        )

    def with_response(self, y: np.ndarray) -> "DesignMatrix":
        return DesignMatrix(self.X, np.asarray(y, float), list(self.names), self.cluster_ids, list(self.dropped))


@dataclass
class LogitFit:
    coefficients: dict[str, float]
    covariance: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    beta: np.ndarray
    names: list[str]

    def coef(self, name: str) -> float:
        try:
            return self.coefficients[name]
        except KeyError:
            raise UnknownRegressorError(name) from None


@dataclass
class FitResult:
    outcome: str
    estimator: str
    point_estimate_me: float  # percentage points
    ci95: tuple[float, float] | None
    n_obs: int
    diagnostics: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# design construction

_DEDUCTIBLE_EDGES = (100_000, 250_000, 500_000)  # cents; ref band < $1,000
_AGE_EDGES = (26, 40, 50)  # ref band 18-26
_RACE_REF = "white"
_RACE_LEVELS = ("black", "asian", "hispanic", "other", "unknown")


def _deductible_band(d: np.ndarray) -> np.ndarray:
    return np.searchsorted(_DEDUCTIBLE_EDGES, d, side="left")


def _age_band(age: np.ndarray) -> np.ndarray:
    return np.searchsorted(_AGE_EDGES, age, side="left")


def build_design(
    rows: pd.DataFrame,
    response: str,
    main: tuple[str, ...] = (TREATMENT,),
) -> DesignMatrix:
    """Assemble the dummy-coded design for one regression.

    Reference levels: white race, age 18-26, comorbidity count 0,
    deductible under $1,000, family size 3.  The Yost quintile enters as a
    single numeric index.  Constant dummy columns (possible inside narrow
    strata) are dropped and recorded.
    """
    n = len(rows)
    cols: list[np.ndarray] = [np.ones(n)]
    names = ["intercept"]

    for var in main:
        source = {TREATMENT: "deductible_met", INSTRUMENT: "instrument_z"}[var]
        cols.append(rows[source].to_numpy(float))
        names.append(var)

    band = _deductible_band(rows["family_deductible"].to_numpy())
    for b in (1, 2, 3):
        cols.append((band == b).astype(float))
        names.append(f"deductible_band_{b}")
    fs = np.minimum(rows["family_size"].to_numpy(), 6)
    for k in (4, 5, 6):
        cols.append((fs == k).astype(float))
        names.append(f"family_size_{k}")
    ageb = _age_band(rows["age"].to_numpy())
    for b, label in ((1, "27_40"), (2, "41_50"), (3, "51_64")):
        cols.append((ageb == b).astype(float))
        names.append(f"age_{label}")
    race = rows["race_ethnicity"].to_numpy()
    for level in _RACE_LEVELS:
        cols.append((race == level).astype(float))
        names.append(f"race_{level}")
    elix = rows["elixhauser_count"].to_numpy()
    for k in (1, 2, 3):
        cols.append((elix == k).astype(float))
        names.append(f"elixhauser_{k}")
    cols.append(rows["yost_quintile"].to_numpy(float))
    names.append("yost_index")

    X = np.column_stack(cols)
    protected = 1 + len(main)
    keep = list(range(protected)) + [
        j for j in range(protected, X.shape[1]) if np.ptp(X[:, j]) > 0
    ]
    X = X[:, keep]
    kept_names = [names[j] for j in keep]
    dropped = [nm for nm in names if nm not in kept_names]

    # prune linearly dependent dummies left-to-right (narrow strata can
    # make, e.g., the family-size dummies sum to the intercept), so the
    # intercept and main regressors are only dropped if they themselves are
    # collinear with what precedes them — which is a hard error
    basis: list[np.ndarray] = []
    keep2: list[int] = []
    for j in range(X.shape[1]):
        x = X[:, j]
        r = x.copy()
        for q in basis:
            r -= (q @ r) * q
        norm_x = np.linalg.norm(x)
        if np.linalg.norm(r) > 1e-8 * max(norm_x, 1.0):
            basis.append(r / np.linalg.norm(r))
            keep2.append(j)
        elif j <= len(main):
            raise CollinearityError(f"regressor {kept_names[j]} is collinear")
        else:
            dropped.append(kept_names[j])
    X = X[:, keep2]
    names = [kept_names[j] for j in keep2]

    y = rows[response].to_numpy(float)
    clusters = pd.factorize(rows["family_id"])[0]
    return DesignMatrix(X=X, y=y, names=names, cluster_ids=clusters, dropped=dropped)


# ---------------------------------------------------------------------------
# logistic maximum likelihood


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log_likelihood(y, eta, w) -> float:
    # stable sum of w * (y*eta - log(1 + e^eta))
    softplus = np.where(eta > 30, eta, np.log1p(np.exp(np.minimum(eta, 30))))
    return float(np.sum(w * (y * eta - softplus)))


def fit_logit(
    design: DesignMatrix,
    weights: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> LogitFit:
    """Newton-Raphson logistic MLE with step-halving.

    Converged when every gradient component is below 1e-8 in magnitude or
    the relative log-likelihood change is below 1e-12.  Raises
    SeparationError when any coefficient passes |beta| > 30 or the response
    is degenerate, CollinearityError on a singular information matrix.
    """
    X, y = design.X, design.y
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    wsum = w.sum()
    if n <= p:
        raise CollinearityError(f"{n} rows for {p} parameters")
    ybar = float(np.sum(w * y) / wsum)
    if ybar <= 0.0 or ybar >= 1.0:
        raise SeparationError("response is degenerate (all 0 or all 1)")

    beta = np.zeros(p) if start is None else np.asarray(start, float).copy()
    eta = X @ beta
    ll = _log_likelihood(y, eta, w)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = _sigmoid(eta)
        grad = X.T @ (w * (y - mu))
        if np.max(np.abs(grad)) < GRADIENT_TOL:
            converged = True
            break
        wt = w * mu * (1.0 - mu)
        H = (X * wt[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise CollinearityError("singular information matrix") from None
        if not np.all(np.isfinite(step)):
            raise CollinearityError("non-finite update step")
        # step-halving on non-increase
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            eta_new = X @ candidate
            ll_new = _log_likelihood(y, eta_new, w)
            if ll_new >= ll:
                break
            scale *= 0.5
        else:
            converged = True  # cannot improve: numerically at the optimum
            break
        beta, eta = candidate, eta_new
        if np.max(np.abs(beta)) > SEPARATION_BETA:
            raise SeparationError(
                f"coefficient magnitude exceeded {SEPARATION_BETA}; separation likely"
            )
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        ll = ll_new
        if rel < LL_REL_TOL:
            converged = True
            break

    mu = _sigmoid(eta)
    wt = w * mu * (1.0 - mu)
    H = (X * wt[:, None]).T @ X
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise CollinearityError("singular information matrix at solution") from None
    return LogitFit(
        coefficients=dict(zip(design.names, beta)),
        covariance=cov,
        log_likelihood=ll,
        converged=converged,
        iterations=it,
        beta=beta,
        names=list(design.names),
    )


def marginal_effect(fit: LogitFit, design: DesignMatrix, var: str, weights=None) -> float:
    """Discrete-change marginal effect of a binary regressor, in percentage
    points, with every other regressor held at its sample mean."""
    j = design.column(var)
    w = np.ones(design.n) if weights is None else np.asarray(weights, float)
    xbar = (design.X * w[:, None]).sum(axis=0) / w.sum()
    x1, x0 = xbar.copy(), xbar.copy()
    x1[j], x0[j] = 1.0, 0.0
    p1 = 1.0 / (1.0 + math.exp(-float(x1 @ fit.beta)))
    p0 = 1.0 / (1.0 + math.exp(-float(x0 @ fit.beta)))
    return 100.0 * (p1 - p0)


# ---------------------------------------------------------------------------
# two-stage residual inclusion


def first_stage(
    rows: pd.DataFrame, weights: np.ndarray | None = None, start: np.ndarray | None = None
) -> tuple[LogitFit, np.ndarray, dict[str, float]]:
    """Fit Pr(D=1 | Z, z); return the fit, probability-scale residuals, and
    instrument-strength diagnostics (logit Wald chi-square and LPM F)."""
    design = build_design(rows, "deductible_met", main=(INSTRUMENT,))
    fit = fit_logit(design, weights=weights, start=start)
    p_hat = _sigmoid(design.X @ fit.beta)
    residuals = design.y - p_hat

    j = design.column(INSTRUMENT)
    z_coef = fit.beta[j]
    chi2 = float(z_coef**2 / fit.covariance[j, j])
    diagnostics = {
        "me_pp": marginal_effect(fit, design, INSTRUMENT, weights),
        "chi2_z": chi2,
        "f_lpm": lpm_f_statistic(design, weights),
    }
    return fit, residuals, diagnostics


def second_stage_2sri(
    rows: pd.DataFrame,
    residuals: np.ndarray,
    outcome: str,
    weights: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> tuple[LogitFit, DesignMatrix]:
    """Fit Pr(Y=1 | D, z, r).  An identically zero residual column is
    dropped so the fit degenerates exactly to the naive logit."""
    design = build_design(rows, f"y_{outcome}", main=(TREATMENT,))
    if np.ptp(residuals) > 0:
        design = design.with_column(RESIDUAL, residuals)
    fit = fit_logit(design, weights=weights, start=start)
    return fit, design


def lpm_f_statistic(design: DesignMatrix, weights: np.ndarray | None = None) -> float:
    """Restricted-vs-unrestricted F statistic for the instrument in a linear
    probability model of D on (Z, z)."""
    X, y = design.X, design.y
    w = np.ones(design.n) if weights is None else np.asarray(weights, float)
    sw = np.sqrt(w)
    j = design.column(INSTRUMENT)
    Xw, yw = X * sw[:, None], y * sw
    beta_u, ssr_u = _ols(Xw, yw)
    X_r = np.delete(Xw, j, axis=1)
    _, ssr_r = _ols(X_r, yw)
    dof = design.n - X.shape[1]
    if ssr_u <= 0:
        return math.inf
    return float((ssr_r - ssr_u) / (ssr_u / dof))


def _ols(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise CollinearityError("singular design in least squares")
    resid = y - X @ beta
    return beta, float(resid @ resid)


# ---------------------------------------------------------------------------
# estimators


def estimate_2sri(
    rows: pd.DataFrame, outcome: str, weights: np.ndarray | None = None
) -> tuple[float, dict[str, float]]:
    """Point estimate of the treatment marginal effect (pp) via 2SRI."""
    _, residuals, diagnostics = first_stage(rows, weights=weights)
    fit, design = second_stage_2sri(rows, residuals, outcome, weights=weights)
    return marginal_effect(fit, design, TREATMENT, weights), diagnostics


def naive_logit(
    rows: pd.DataFrame, outcome: str, weights: np.ndarray | None = None
) -> tuple[float, LogitFit]:
    """Single-stage logit of Y on D and covariates; ME in pp."""
    design = build_design(rows, f"y_{outcome}", main=(TREATMENT,))
    fit = fit_logit(design, weights=weights)
    return marginal_effect(fit, design, TREATMENT, weights), fit


def two_stage_least_squares(
    rows: pd.DataFrame, outcome: str
) -> tuple[float, dict[str, float]]:
    """Just-identified linear IV; coefficient on D in percentage points with
    a family-cluster-robust standard error."""
    design = build_design(rows, f"y_{outcome}", main=())
    W = design.X  # exogenous covariates incl. intercept
    d = rows["deductible_met"].to_numpy(float)
    z = rows["instrument_z"].to_numpy(float)
    y = design.y

    first, _ = _ols(np.column_stack([W, z]), d)
    d_hat = np.column_stack([W, z]) @ first
    X2 = np.column_stack([W, d_hat])
    beta2, _ = _ols(X2, y)
    coef_d = beta2[-1]

    # cluster-robust sandwich with structural residuals (actual D)
    X_struct = np.column_stack([W, d])
    u = y - X_struct @ beta2
    bread = np.linalg.inv(X2.T @ X2)
    meat = np.zeros((X2.shape[1], X2.shape[1]))
    order = np.argsort(design.cluster_ids, kind="stable")
    cid = design.cluster_ids[order]
    Xu = X2[order] * u[order, None]
    starts = np.flatnonzero(np.r_[True, cid[1:] != cid[:-1]])
    sums = np.add.reduceat(Xu, starts, axis=0)
    meat = sums.T @ sums
    cov = bread @ meat @ bread
    se = math.sqrt(cov[-1, -1])
    return 100.0 * coef_d, {"se_pp": 100.0 * se}


def wald_ratio(rows: pd.DataFrame, outcome: str) -> float:
    """Reduced-form over first-stage coefficient ratio (just-identified IV),
    after partialling out the covariates.  Reported in percentage points."""
    design = build_design(rows, f"y_{outcome}", main=())
    W = design.X
    d = rows["deductible_met"].to_numpy(float)
    z = rows["instrument_z"].to_numpy(float)
    y = design.y
    rf, _ = _ols(np.column_stack([W, z]), y)
    fs, _ = _ols(np.column_stack([W, z]), d)
    return 100.0 * rf[-1] / fs[-1]


def placebo_test(rows: pd.DataFrame) -> float:
    """Logit of prior-period treatment on current instrument and covariates;
    returns the instrument coefficient's Wald p-value.

    Both the instrument and the prior treatment are constant within a
    family, so the variance is the family-cluster-robust sandwich; the
    model-based information matrix would badly overstate precision.
    """
    panel = rows[(rows["period"] >= 1) & (rows["d_prev"] >= 0)]
    if panel.empty:
        raise ValueError("placebo test needs at least two consecutive periods")
    design = build_design(panel, "d_prev", main=(INSTRUMENT,))
    fit = fit_logit(design)
    j = design.column(INSTRUMENT)
    cov = _cluster_robust_logit_cov(design, fit)
    zstat = fit.beta[j] / math.sqrt(cov[j, j])
    return float(2.0 * stats.norm.sf(abs(zstat)))


def _cluster_robust_logit_cov(design: DesignMatrix, fit: LogitFit) -> np.ndarray:
    """Sandwich covariance with scores summed within family clusters."""
    mu = _sigmoid(design.X @ fit.beta)
    scores = design.X * (design.y - mu)[:, None]
    order = np.argsort(design.cluster_ids, kind="stable")
    cid = design.cluster_ids[order]
    starts = np.flatnonzero(np.r_[True, cid[1:] != cid[:-1]])
    sums = np.add.reduceat(scores[order], starts, axis=0)
    meat = sums.T @ sums
    return fit.covariance @ meat @ fit.covariance


# ---------------------------------------------------------------------------
# clustered bootstrap


def cluster_bootstrap(
    rows: pd.DataFrame,
    outcome: str,
    estimator: str = "2sri",
    reps: int = 1000,
    seed: int = 0,
) -> FitResult:
    """Family-clustered percentile bootstrap of the treatment effect.

    Families are resampled with replacement (as frequency weights, which is
    estimation-equivalent to duplicating their rows) and both stages re-run
    per replicate with warm starts from the full-sample fit.  Replicates
    that fail to converge are dropped and counted; more than 10% failures
    raises UnstableBootstrapError.
    """
    if estimator not in ("2sri", "naive"):
        raise ValueError(f"unsupported bootstrap estimator: {estimator}")

    cluster_ids = pd.factorize(rows["family_id"])[0]
    n_fam = int(cluster_ids.max()) + 1

    ss_base = build_design(rows, f"y_{outcome}", main=(TREATMENT,))
    if estimator == "2sri":
        fs_design = build_design(rows, "deductible_met", main=(INSTRUMENT,))
        fs_fit = fit_logit(fs_design)
        residuals = fs_design.y - _sigmoid(fs_design.X @ fs_fit.beta)
        ss_design = ss_base.with_column(RESIDUAL, residuals)
        ss_fit = fit_logit(ss_design)
        point = marginal_effect(ss_fit, ss_design, TREATMENT)
        j_z = fs_design.column(INSTRUMENT)
        diagnostics = {
            "first_stage_f": lpm_f_statistic(fs_design),
            "first_stage_chi2": float(fs_fit.beta[j_z] ** 2 / fs_fit.covariance[j_z, j_z]),
        }
        fs_start, ss_start = fs_fit.beta, ss_fit.beta
        resid_col = ss_design.column(RESIDUAL)
    else:
        fs_design = None
        ss_design = ss_base
        ss_fit = fit_logit(ss_design)
        point = marginal_effect(ss_fit, ss_design, TREATMENT)
        diagnostics = {}
        ss_start = ss_fit.beta

    estimates: list[float] = []
    failures = 0
    for rep in range(reps):
        rng = np.random.default_rng((seed, rep))
        counts = np.bincount(rng.integers(0, n_fam, size=n_fam), minlength=n_fam)
        w = counts[cluster_ids].astype(float)
        try:
            if estimator == "2sri":
                fs_rep = fit_logit(fs_design, weights=w, start=fs_start)
                ss_design.X[:, resid_col] = fs_design.y - _sigmoid(fs_design.X @ fs_rep.beta)
                ss_rep = fit_logit(ss_design, weights=w, start=ss_start)
            else:
                ss_rep = fit_logit(ss_design, weights=w, start=ss_start)
            estimates.append(marginal_effect(ss_rep, ss_design, TREATMENT, w))
        except (SeparationError, CollinearityError):
            failures += 1
    if estimator == "2sri":
        ss_design.X[:, resid_col] = residuals  # restore full-sample residuals

    if failures > 0.1 * reps:
        raise UnstableBootstrapError(f"{failures}/{reps} bootstrap replicates failed")
    lo, hi = np.percentile(estimates, [2.5, 97.5])
    diagnostics["reps_completed"] = float(len(estimates))
    diagnostics["bootstrap_se"] = float(np.std(estimates, ddof=1))
    return FitResult(
        outcome=outcome,
        estimator=estimator,
        point_estimate_me=point,
        ci95=(float(lo), float(hi)),
        n_obs=len(rows),
        diagnostics=diagnostics,
    )
