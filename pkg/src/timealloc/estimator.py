"""Coefficient recovery from observed allocations.

Two estimators share the same design matrix:

* ``fit_structural`` -- nonlinear least squares on time shares.  Predicted
  shares are the softmax of per-activity linear indices with the reference
  activity pinned at zero, so the estimate rationalizes observed choices as
  optimal budget allocations.  Solved by Levenberg-Marquardt with the
  analytic share-map Jacobian; asymptotic Gauss-Newton covariance by
  default, nonparametric bootstrap behind ``bootstrap_ci``.
* ``fit_ols`` -- the reduced-form baseline: four independent linear
  regressions of each activity's share on the same covariates, no
  cross-activity constraint beyond what the data imposes.

Residuals stack the three non-reference activities record-major (the
reference share is linearly determined by the others, so its residual adds
no information); degrees of freedom are 3n minus the number of free
coefficients.  Observed shares outside (0, 1) are clamped into
[1e-6, 1 - 1e-6] and counted in the diagnostics rather than dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .model import ACTIVITIES, FEATURES, feature_matrix, share_matrix

N_FREE = 3  # activities with free coefficients (reference excluded)

SHARE_CLAMP = 1e-6
Z_95 = 1.96


class DataError(ValueError):
    """Input data violates an estimator precondition."""


class DesignRankError(DataError):
    """Design matrix is rank deficient."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(
            "design matrix is rank deficient; collinear columns: "
            + ", ".join(self.columns)
        )


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed to converge."""


@dataclass
class FitOptions:
    features: tuple = FEATURES
    max_iter: int = 500
    sse_rtol: float = 1e-10
    grad_tol: float = 1e-8
    lambda0: float = 1e-3
    multi_start: bool = False
    n_starts: int = 5
    start_scale: float = 0.1
    seed: int = 0
    start: np.ndarray | None = None


@dataclass
class FitResult:
    theta: np.ndarray                 # (3, F) coefficient matrix, activities (L, W, S)
    features: tuple
    covariance: np.ndarray            # (3F, 3F), flattened activity-major
    se: np.ndarray                    # (3, F)
    ci_low: np.ndarray                # (3, F)
    ci_high: np.ndarray               # (3, F)
    sse: float
    n_obs: int
    iterations: int
    converged: bool
    gradient_norm: float
    n_clamped: int = 0
    model_form: str = "softmax"
    ci_method: str = "asymptotic"

    def theta_flat(self) -> np.ndarray:
        return self.theta.ravel()

    def to_json(self) -> str:
        rows = []
        for j, act in enumerate(ACTIVITIES[:N_FREE]):
            for f, name in enumerate(self.features):
                rows.append(
                    {
                        "activity": act,
                        "feature": name,
                        "estimate": float(self.theta[j, f]),
                        "se": float(self.se[j, f]),
                        "ci_low": float(self.ci_low[j, f]),
                        "ci_high": float(self.ci_high[j, f]),
                    }
                )
        doc = {
            "kind": "structural_fit",
            "activities": list(ACTIVITIES[:N_FREE]),
            "features": list(self.features),
            "coefficients": rows,
            "covariance": self.covariance.tolist(),
            "diagnostics": {
                "sse": self.sse,
                "n_obs": self.n_obs,
                "iterations": self.iterations,
                "converged": self.converged,
                "gradient_norm": self.gradient_norm,
                "n_clamped": self.n_clamped,
                "model_form": self.model_form,
                "ci_method": self.ci_method,
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        doc = json.loads(text)
        if doc.get("kind") != "structural_fit":
            raise ValueError(f"not a structural fit document: kind={doc.get('kind')!r}")
        features = tuple(doc["features"])
        F = len(features)
        theta = np.zeros((N_FREE, F))
        se = np.zeros((N_FREE, F))
        lo = np.zeros((N_FREE, F))
        hi = np.zeros((N_FREE, F))
        act_index = {a: j for j, a in enumerate(doc["activities"])}
        feat_index = {n: f for f, n in enumerate(features)}
        for row in doc["coefficients"]:
            j = act_index[row["activity"]]
            f = feat_index[row["feature"]]
            theta[j, f] = row["estimate"]
            se[j, f] = row["se"]
            lo[j, f] = row["ci_low"]
            hi[j, f] = row["ci_high"]
        d = doc["diagnostics"]
        return cls(
            theta=theta,
            features=features,
            covariance=np.asarray(doc["covariance"], dtype=float),
            se=se,
            ci_low=lo,
            ci_high=hi,
            sse=d["sse"],
            n_obs=d["n_obs"],
            iterations=d["iterations"],
            converged=d["converged"],
            gradient_norm=d["gradient_norm"],
            n_clamped=d.get("n_clamped", 0),
            model_form=d.get("model_form", "softmax"),
            ci_method=d.get("ci_method", "asymptotic"),
        )


@dataclass
class OlsResult:
    beta: np.ndarray                  # (4, F), one row per activity incl. reference
    margin: np.ndarray                # (4, F) half-width of the 95% interval
    r_squared: np.ndarray             # (4,)
    features: tuple
    n_obs: int

    def beta_flat(self) -> np.ndarray:
        return self.beta.ravel()

    def to_json(self) -> str:
        rows = []
        for j, act in enumerate(ACTIVITIES):
            for f, name in enumerate(self.features):
                rows.append(
                    {
                        "activity": act,
                        "feature": name,
                        "estimate": float(self.beta[j, f]),
                        "margin": float(self.margin[j, f]),
                    }
                )
        doc = {
            "kind": "ols_fit",
            "activities": list(ACTIVITIES),
            "features": list(self.features),
            "coefficients": rows,
            "r_squared": {a: float(r) for a, r in zip(ACTIVITIES, self.r_squared)},
            "n_obs": self.n_obs,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "OlsResult":
        doc = json.loads(text)
        if doc.get("kind") != "ols_fit":
            raise ValueError(f"not an OLS fit document: kind={doc.get('kind')!r}")
        features = tuple(doc["features"])
        F = len(features)
        beta = np.zeros((len(ACTIVITIES), F))
        margin = np.zeros((len(ACTIVITIES), F))
        act_index = {a: j for j, a in enumerate(doc["activities"])}
        feat_index = {n: f for f, n in enumerate(features)}
        for row in doc["coefficients"]:
            beta[act_index[row["activity"]], feat_index[row["feature"]]] = row["estimate"]
            margin[act_index[row["activity"]], feat_index[row["feature"]]] = row["margin"]
        r2 = np.array([doc["r_squared"][a] for a in ACTIVITIES])
        return cls(
            beta=beta, margin=margin, r_squared=r2, features=features, n_obs=doc["n_obs"]
        )


# ---------------------------------------------------------------------------
# design checks
# ---------------------------------------------------------------------------


def check_design(X: np.ndarray, names) -> None:
    """Raise DesignRankError naming the involved columns if X is rank deficient."""
    if X.shape[0] < X.shape[1]:
        raise DataError(
            f"need at least {X.shape[1]} records for {X.shape[1]} features, got {X.shape[0]}"
        )
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = s[0] * max(X.shape) * np.finfo(float).eps if s[0] > 0 else 0.0
    deficient = s <= tol
    if not deficient.any():
        return
    involved: list[str] = []
    for v in vt[deficient]:
        big = np.abs(v) > 1e-6 * np.abs(v).max()
        for name, flag in zip(names, big):
            if flag and name not in involved:
                involved.append(name)
    raise DesignRankError(involved)


# ---------------------------------------------------------------------------
# structural NLLS
# ---------------------------------------------------------------------------


def predicted_shares(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """(n, 4) softmax shares for a coefficient matrix over design X."""
    z = X @ theta.T
    Z = np.concatenate([z, np.zeros((X.shape[0], 1))], axis=1)
    return kernels.softmax_rows(Z)


def jacobian(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of predicted shares w.r.t. flattened coefficients.

    Shape (3n, 3F): rows are record-major over the three non-reference
    activities, columns activity-major over features; entry
    d s_ij / d theta_kf = s_ij (delta_jk - s_ik) x_if.
    """
    theta = np.asarray(theta, dtype=float)
    P = predicted_shares(theta, X)
    return kernels.share_jacobian(P, X)


def _clamped_shares(df) -> tuple[np.ndarray, int]:
    S = share_matrix(df)
    bad = (S <= 0.0) | (S >= 1.0)
    n_clamped = int(bad.any(axis=1).sum())
    return np.clip(S, SHARE_CLAMP, 1.0 - SHARE_CLAMP), n_clamped


def _lm_minimize(X, S3, theta0, opts: FitOptions, trace_sse: list | None = None):
    """Levenberg-Marquardt on stacked share residuals.

    Returns (theta, sse, iterations, converged, grad_inf, J_final).
    Damping lambda starts at opts.lambda0, x10 on a rejected step, /10 on
    an accepted one.  Convergence requires both a relative SSE decrease
    below sse_rtol on an accepted step and a gradient infinity-norm below
    grad_tol; hitting max_iter instead reports converged=False.
    trace_sse, when given, collects the SSE after every accepted step.
    """
    n, F = X.shape
    theta = theta0.copy()

    def evaluate(t):
        P = predicted_shares(t, X)
        r = (S3 - P[:, :N_FREE]).ravel()
        return P, r, float(r @ r)

    P, r, sse = evaluate(theta)
    J = kernels.share_jacobian(P, X)
    g = -2.0 * (J.T @ r)
    grad_inf = float(np.abs(g).max())
    lam = opts.lambda0
    converged = False
    iterations = 0
    eye = np.eye(N_FREE * F)
    if trace_sse is not None:
        trace_sse.append(sse)

    for _ in range(opts.max_iter):
        iterations += 1
        JtJ = J.T @ J
        Jtr = J.T @ r
        try:
            delta = np.linalg.solve(JtJ + lam * eye, Jtr)
        except np.linalg.LinAlgError:
            lam = min(lam * 10.0, 1e15)
            continue
        cand = theta + delta.reshape(N_FREE, F)
        P_new, r_new, sse_new = evaluate(cand)
        if sse_new <= sse:
            rel_drop = (sse - sse_new) / max(sse, np.finfo(float).tiny)
            theta, P, r = cand, P_new, r_new
            sse = sse_new
            if trace_sse is not None:
                trace_sse.append(sse)
            J = kernels.share_jacobian(P, X)
            g = -2.0 * (J.T @ r)
            grad_inf = float(np.abs(g).max())
            lam = max(lam / 10.0, 1e-12)
            if rel_drop < opts.sse_rtol and grad_inf < opts.grad_tol:
                converged = True
                break
        else:
            lam = min(lam * 10.0, 1e15)

    return theta, sse, iterations, converged, grad_inf, J


def fit_structural(df, options: FitOptions | None = None) -> FitResult:
    """Fit the structural share model by nonlinear least squares.

    Requires at least 2x as many records as features and a full-rank
    design.  Never fails silently: a fit that exhausts max_iter comes back
    with converged=False.
    """
    opts = options or FitOptions()
    X = feature_matrix(df, opts.features)
    n, F = X.shape
    if n < 2 * F:
        raise DataError(f"need at least {2 * F} records to fit {F} features, got {n}")
    check_design(X, opts.features)
    S, n_clamped = _clamped_shares(df)
    S3 = S[:, :N_FREE]

    starts = []
    if opts.start is not None:
        starts.append(np.asarray(opts.start, dtype=float).reshape(N_FREE, F))
    else:
        starts.append(np.zeros((N_FREE, F)))
        if opts.multi_start:
            rng = np.random.default_rng(opts.seed)
            for _ in range(opts.n_starts):
                starts.append(rng.normal(scale=opts.start_scale, size=(N_FREE, F)))

    best = None
    for theta0 in starts:
        out = _lm_minimize(X, S3, theta0, opts)
        if best is None:
            best = out
            continue
        # keep lowest SSE; break exact ties by smaller coefficient norm
        if out[1] < best[1] or (
            out[1] == best[1]
            and np.linalg.norm(out[0]) < np.linalg.norm(best[0])
        ):
            best = out
    theta, sse, iterations, converged, grad_inf, J = best

    dof = N_FREE * n - N_FREE * F
    sigma2 = sse / dof if dof > 0 else np.nan
    JtJ = J.T @ J
    try:
        cov = sigma2 * np.linalg.inv(JtJ)
    except np.linalg.LinAlgError:
        cov = sigma2 * np.linalg.pinv(JtJ)
    cov = (cov + cov.T) / 2.0
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None)).reshape(N_FREE, F)

    return FitResult(
        theta=theta,
        features=tuple(opts.features),
        covariance=cov,
        se=se,
        ci_low=theta - Z_95 * se,
        ci_high=theta + Z_95 * se,
        sse=sse,
        n_obs=n,
        iterations=iterations,
        converged=converged,
        gradient_norm=grad_inf,
        n_clamped=n_clamped,
    )


# ---------------------------------------------------------------------------
# bootstrap confidence intervals
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    ci_low: np.ndarray                # (3, F)
    ci_high: np.ndarray               # (3, F)
    features: tuple
    n_replicates: int
    n_failures: int


def bootstrap_ci(
    df, options: FitOptions | None = None, B: int = 200, seed: int = 0
) -> BootstrapResult:
    """Percentile bootstrap intervals (2.5/97.5) from resampled refits.

    Replicates start from the full-sample estimate.  Replicates that fail
    to converge are skipped and counted; more than 10% failures raises
    BootstrapError.
    """
    if B < 100:
        raise ValueError(f"bootstrap needs B >= 100 replicates, got {B}")
    opts = options or FitOptions()
    base = fit_structural(df, opts)
    rng = np.random.default_rng(seed)
    n = len(df)
    draws = []
    failures = 0
    rep_opts = replace(opts, start=base.theta, multi_start=False)
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        sample = df.iloc[idx].reset_index(drop=True)
        try:
            fit = fit_structural(sample, rep_opts)
        except DataError:
            failures += 1
            continue
        if not fit.converged:
            failures += 1
            continue
        draws.append(fit.theta_flat())
    if failures > 0.1 * B:
        raise BootstrapError(
            f"{failures} of {B} bootstrap replicates failed to converge"
        )
    stack = np.vstack(draws)
    lo = np.percentile(stack, 2.5, axis=0).reshape(base.theta.shape)
    hi = np.percentile(stack, 97.5, axis=0).reshape(base.theta.shape)
    return BootstrapResult(
        ci_low=lo,
        ci_high=hi,
        features=tuple(opts.features),
        n_replicates=B,
        n_failures=failures,
    )


# ---------------------------------------------------------------------------
# reduced-form OLS baseline
# ---------------------------------------------------------------------------


def fit_ols(df, features=FEATURES) -> OlsResult:
    """Per-activity OLS of observed shares on the covariates (QR solve)."""
    X = feature_matrix(df, features)
    n, F = X.shape
    if n <= F:
        raise DataError(f"need more than {F} records for OLS, got {n}")
    check_design(X, features)
    S = share_matrix(df)
    Q, R = np.linalg.qr(X)
    XtX_inv_diag = np.diag(np.linalg.inv(R.T @ R))
    beta = np.zeros((len(ACTIVITIES), F))
    margin = np.zeros((len(ACTIVITIES), F))
    r2 = np.zeros(len(ACTIVITIES))
    for j in range(len(ACTIVITIES)):
        y = S[:, j]
        b = np.linalg.solve(R, Q.T @ y)
        resid = y - X @ b
        rss = float(resid @ resid)
        sigma2 = rss / (n - F)
        se = np.sqrt(sigma2 * XtX_inv_diag)
        tss = float(((y - y.mean()) ** 2).sum())
        beta[j] = b
        margin[j] = Z_95 * se
        r2[j] = 1.0 - rss / tss if tss > 0 else np.nan
    return OlsResult(
        beta=beta, margin=margin, r_squared=r2, features=tuple(features), n_obs=n
    )
