"""Structural time-allocation model.

A day of T minutes is split across four activities -- leisure, work,
sleep/personal care, and a residual "other" category -- by maximizing a
log-utility whose per-activity weights are linear in the individual's
covariates.  "Other" is the reference activity: its coefficient vector is
pinned to zero and never stored, so a parameter matrix has shape
(3, F_DIM) covering (leisure, work, sleep).

The default model form maps linear indices to shares through a softmax,
under which the zero reference coefficient is the usual normalization and
predicted shares are always strictly positive.  A secondary "ratio" form
(shares proportional to the raw indices, reference index pinned at 1) is
kept behind a flag for sensitivity checks; it requires positive indices.
"""

from __future__ import annotations

import numpy as np

from . import kernels

ACTIVITIES = ("leisure", "work", "sleep", "other")
ACTIVITY_LABELS = ("Leisure", "Work", "Sleep and Personal Care", "Other")
N_ACTIVITIES = 4

FEATURES = (
    "intercept",
    "age_z",
    "edu_z",
    "earnweek_z",
    "male",
    "spouse_present",
    "partner_present",
    "race_black",
    "race_native",
    "race_asian",
    "race_pacific",
)
F_DIM = len(FEATURES)

T_DEFAULT = 1440.0
SHARE_FLOOR = 1e-12

MODEL_FORMS = ("softmax", "ratio")


class ModelError(ValueError):
    """Invalid model inputs (shapes, domains, non-finite values)."""


def as_theta(theta) -> np.ndarray:
    """Validate and return a (3, F_DIM) coefficient matrix as float64."""
    t = np.asarray(theta, dtype=float)
    if t.shape != (N_ACTIVITIES - 1, F_DIM):
        raise ModelError(
            f"theta must have shape {(N_ACTIVITIES - 1, F_DIM)}, got {t.shape}"
        )
    if not np.all(np.isfinite(t)):
        raise ModelError("theta contains non-finite entries")
    return t


def as_features(x) -> np.ndarray:
    """Validate a single feature vector (intercept first, == 1.0)."""
    v = np.asarray(x, dtype=float)
    if v.shape != (F_DIM,):
        raise ModelError(f"feature vector must have length {F_DIM}, got {v.shape}")
    if v[0] != 1.0:
        raise ModelError("feature vector intercept must equal 1.0")
    return v


def linear_indices(theta, X) -> np.ndarray:
    """Per-activity linear indices theta_j . x, reference activity = 0.

    X may be a single feature vector (F_DIM,) or a matrix (n, F_DIM);
    the result has a trailing axis of length 4 in canonical activity order.
    """
    t = as_theta(theta)
    x = np.asarray(X, dtype=float)
    squeeze = x.ndim == 1
    Xm = np.atleast_2d(x)
    z = Xm @ t.T
    out = np.concatenate([z, np.zeros((Xm.shape[0], 1))], axis=1)
    return out[0] if squeeze else out


def softmax_shares(indices) -> np.ndarray:
    """Shares from linear indices via a numerically stable softmax.

    Stable for indices up to +/-700 (max-subtraction), floored at
    SHARE_FLOOR and renormalized so downstream logs stay finite.
    """
    z = np.asarray(indices, dtype=float)
    squeeze = z.ndim == 1
    Z = np.atleast_2d(z)
    P = kernels.softmax_rows(Z)
    return P[0] if squeeze else P


def ratio_shares(indices) -> np.ndarray:
    """Literal-ratio shares: s_j = z_j / sum_k z_k with the reference index 1.

    The caller supplies all four indices; the reference slot must already
    be set (predict_shares pins it at 1).  All indices must be positive.
    """
    z = np.asarray(indices, dtype=float)
    if np.any(z <= 0):
        raise ModelError("ratio model form requires strictly positive indices")
    s = z / z.sum(axis=-1, keepdims=True)
    return np.maximum(s, SHARE_FLOOR)


def predict_shares(theta, X, form: str = "softmax") -> np.ndarray:
    """Optimal time shares for feature vector(s) X under the given form.

    Returns shape (4,) for a single vector, (n, 4) for a matrix.  Shares
    are strictly positive and sum to 1 (softmax form unconditionally;
    ratio form only where indices permit).
    """
    if form not in MODEL_FORMS:
        raise ModelError(f"unknown model form {form!r}; expected one of {MODEL_FORMS}")
    t = as_theta(theta)
    x = np.asarray(X, dtype=float)
    squeeze = x.ndim == 1
    Xm = np.atleast_2d(x)
    z = Xm @ t.T
    if form == "softmax":
        Z = np.concatenate([z, np.zeros((Xm.shape[0], 1))], axis=1)
        P = kernels.softmax_rows(Z)
    else:
        Z = np.concatenate([z, np.ones((Xm.shape[0], 1))], axis=1)
        P = ratio_shares(Z)
    return P[0] if squeeze else P


def shares_to_minutes(shares, T: float = T_DEFAULT) -> np.ndarray:
    """Scale a share vector (or matrix of rows) into minutes summing to T."""
    if T <= 0:
        raise ModelError("T must be positive")
    return np.asarray(shares, dtype=float) * T


def minutes_to_shares(minutes, T: float = T_DEFAULT) -> np.ndarray:
    if T <= 0:
        raise ModelError("T must be positive")
    return np.asarray(minutes, dtype=float) / T


def validate_allocation(minutes, T: float = T_DEFAULT, tol: float = 1e-9) -> np.ndarray:
    """Check the allocation invariants: four strictly positive minutes summing to T."""
    h = np.asarray(minutes, dtype=float)
    if h.shape != (N_ACTIVITIES,):
        raise ModelError(f"allocation must have length {N_ACTIVITIES}, got {h.shape}")
    if np.any(h <= 0):
        raise ModelError("allocation minutes must be strictly positive")
    if abs(h.sum() - T) > tol:
        raise ModelError(f"allocation sums to {h.sum()!r}, expected {T}")
    return h


def utility(theta, x, minutes, T: float = T_DEFAULT) -> float:
    """Utility of an allocation: sum_j (theta_j . x) ln(h_j).

    The reference activity contributes nothing (zero coefficient).  The
    allocation must satisfy its invariants; a non-positive component is
    rejected because the log is undefined there.
    """
    t = as_theta(theta)
    v = as_features(x)
    h = validate_allocation(minutes, T=T)
    w = t @ v
    return float(np.dot(w, np.log(h[: N_ACTIVITIES - 1])))


def allocation_weights(theta, x, form: str = "softmax") -> np.ndarray:
    """The four positive log-utility weights implied by a model form.

    Softmax form: w_j = exp(theta_j . x), reference weight exp(0) = 1 --
    the objective whose budget-constrained maximizer is T * softmax.
    Ratio form: w_j = theta_j . x with the reference weight pinned at 1;
    requires positive indices.
    """
    if form not in MODEL_FORMS:
        raise ModelError(f"unknown model form {form!r}; expected one of {MODEL_FORMS}")
    t = as_theta(theta)
    v = as_features(x)
    z = t @ v
    if form == "softmax":
        return np.exp(np.concatenate([z, [0.0]]))
    w = np.concatenate([z, [1.0]])
    if np.any(w <= 0):
        raise ModelError("ratio model form requires strictly positive indices")
    return w


def weighted_log_utility(weights, minutes) -> float:
    """sum_j w_j ln(h_j) for positive weights and a valid allocation."""
    w = np.asarray(weights, dtype=float)
    h = np.asarray(minutes, dtype=float)
    if np.any(h <= 0):
        raise ModelError("allocation minutes must be strictly positive")
    return float(np.dot(w, np.log(h)))


def feature_matrix(df, features=FEATURES) -> np.ndarray:
    """Design matrix (n, len(features)) from a records frame.

    The intercept column is synthesized; all other names must be columns.
    """
    cols = []
    for name in features:
        if name == "intercept":
            cols.append(np.ones(len(df)))
        else:
            if name not in df.columns:
                raise ModelError(f"records are missing feature column {name!r}")
            cols.append(df[name].to_numpy(dtype=float))
    return np.column_stack(cols) if cols else np.empty((len(df), 0))


MINUTES_COLUMNS = tuple(f"minutes_{a}" for a in ACTIVITIES)


def minutes_matrix(df) -> np.ndarray:
    """Observed minutes (n, 4) in canonical activity order."""
    for c in MINUTES_COLUMNS:
        if c not in df.columns:
            raise ModelError(f"records are missing minutes column {c!r}")
    return df.loc[:, list(MINUTES_COLUMNS)].to_numpy(dtype=float)


def share_matrix(df, T: float = T_DEFAULT) -> np.ndarray:
    """Observed shares (n, 4) = minutes / T."""
    return minutes_matrix(df) / T
