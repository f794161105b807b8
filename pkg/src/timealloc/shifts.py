"""Counterfactual covariate shifts and estimate-drift metrics.

Four mild, policy-like perturbations act on the raw (unstandardized)
covariates:

* earnings_quantile_lift -- add magnitude * sd(earnweek) to everyone at or
  below the median, reshaping the lower half of the distribution;
* age_band_shift -- move a seeded fraction p of one age band up by delta
  years (count rounded half-even);
* race_mix -- raking-style resampling within (age band, sex) strata that
  moves the Asian share up and the White share down by a couple of
  percentage points while preserving stratum sizes exactly;
* spouse_mix -- the same mechanics on spouse status, restricted to the age
  bands covering 30-44.

Resampling draws with replacement within a (stratum, category) cell, from
the cell's members in record-id order, so results depend only on the seed
and the record-id multiset -- shifting a permuted dataset yields a
permutation of the shifted dataset.  Drift between pre- and post-shift
coefficient vectors is summarized by three lower-is-better metrics: mean
absolute change, relative L2 change, and one minus cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
import pandas as pd

from .estimator import FitOptions, fit_ols, fit_structural
from .fileio import atomic_write_text
from .ingest import apply_standardization, fit_standardization

AGE_BAND_CUTS = (18, 25, 30, 35, 45, 55, 65, 100)

SHIFT_KINDS = ("earnings_quantile_lift", "age_band_shift", "race_mix", "spouse_mix")

RACE_DUMMY_BY_CATEGORY = {
    "black": "race_black",
    "native": "race_native",
    "asian": "race_asian",
    "pacific": "race_pacific",
}


class ShiftError(ValueError):
    pass


def age_band_index(age, cuts=AGE_BAND_CUTS) -> np.ndarray:
    """Index of the age band [cut_i, cut_{i+1}) containing each age."""
    idx = np.searchsorted(cuts, np.asarray(age, dtype=float), side="right") - 1
    return np.clip(idx, 0, len(cuts) - 2)


def record_uniforms(seed: int, salt: str, record_ids) -> np.ndarray:
    """Stable per-record uniforms in [0, 1) from (seed, salt, record_id)."""
    out = np.empty(len(record_ids))
    for i, rid in enumerate(record_ids):
        h = hashlib.sha256(f"{seed}:{salt}:{rid}".encode("utf-8")).digest()
        out[i] = int.from_bytes(h[:8], "big") / 2.0**64
    return out


def race_category(df: pd.DataFrame) -> pd.Series:
    cat = pd.Series("white", index=df.index)
    for name, col in RACE_DUMMY_BY_CATEGORY.items():
        cat = cat.mask(df[col].to_numpy(dtype=float) == 1, name)
    return cat


def spouse_category(df: pd.DataFrame) -> pd.Series:
    cat = pd.Series("none", index=df.index)
    cat = cat.mask(df["spouse_present"].to_numpy(dtype=float) == 1, "spouse")
    cat = cat.mask(df["partner_present"].to_numpy(dtype=float) == 1, "partner")
    return cat


@dataclass
class ShiftSpec:
    kind: str
    seed: int = 0
    magnitude: float = 0.5            # earnings lift, in sd units
    p: float = 0.1                    # age shift fraction
    delta: float = 10.0               # age shift years
    age_band: tuple = (25.0, 35.0)    # half-open [lo, hi) for the age shift
    asian_pp: float = 0.02
    white_pp: float = -0.02
    spouse_pp: float = 0.03
    baseline_pp: float = -0.03
    spouse_age_range: tuple = (30.0, 45.0)
    age_band_cuts: tuple = AGE_BAND_CUTS

    def validate(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ShiftError(f"unknown shift kind {self.kind!r}; expected {SHIFT_KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ShiftError("age shift fraction p must be in [0, 1]")
        lo, hi = self.age_band
        if not lo < hi:
            raise ShiftError("age band must satisfy lo < hi")
        cuts = tuple(self.age_band_cuts)
        if len(cuts) < 2 or any(a >= b for a, b in zip(cuts, cuts[1:])):
            raise ShiftError("age band cutpoints must be strictly increasing")


# ---------------------------------------------------------------------------
# the four shifts
# ---------------------------------------------------------------------------


def shift_earnings_quantile_lift(df: pd.DataFrame, magnitude: float = 0.5) -> pd.DataFrame:
    """Lift earnweek by magnitude * sample sd for everyone at or below the median."""
    out = df.copy()
    earn = out["earnweek"].to_numpy(dtype=float)
    med = float(np.median(earn))
    sd = float(earn.std(ddof=1)) if len(earn) > 1 else 0.0
    lift = magnitude * sd
    out["earnweek"] = np.where(earn <= med, earn + lift, earn)
    return out


def shift_age_band(
    df: pd.DataFrame,
    p: float = 0.1,
    delta: float = 10.0,
    band: tuple = (25.0, 35.0),
    seed: int = 0,
) -> pd.DataFrame:
    """Add delta years of age to a seeded fraction p of the band's members.

    The selected count is round-half-even(p * band size); selection keeps
    the members with the smallest per-record uniforms, so it commutes with
    record order.
    """
    out = df.copy()
    age = out["age"].to_numpy(dtype=float)
    lo, hi = band
    in_band = np.where((age >= lo) & (age < hi))[0]
    if in_band.size == 0 or p == 0.0:
        return out
    k = round(_decimal_fraction(p) * in_band.size)
    if k == 0:
        return out
    ids = out["record_id"].astype(str).to_numpy()
    u = record_uniforms(seed, "age_band_shift", ids[in_band])
    order = np.lexsort((ids[in_band], u))
    chosen = in_band[order[:k]]
    age[chosen] += delta
    out["age"] = age
    return out


def _decimal_fraction(x: float) -> Fraction:
    """Exact rational value of a magnitude given as a decimal float."""
    return Fraction(str(x))


def _rake_stratum(
    sub: pd.DataFrame,
    categories: pd.Series,
    moves: dict,
    seed: int,
    salt: str,
    stratum_key: str,
) -> pd.DataFrame | None:
    """Resample one stratum toward moved category shares.

    moves maps category -> share change in percentage points (as fractions).
    Target counts are round-half-even of count + m * move, computed in
    exact rational arithmetic so .5 boundaries behave as documented.
    Returns the new stratum frame, or None when a required increase is
    infeasible (no member of that category to resample from).
    """
    m = len(sub)
    counts = categories.value_counts().to_dict()
    targets = {}
    for cat, pp in moves.items():
        cur = counts.get(cat, 0)
        t = round(cur + m * _decimal_fraction(pp))
        targets[cat] = max(t, 0)
        if t > cur and cur == 0:
            return None
    untouched = [c for c in counts if c not in moves]
    for cat in untouched:
        targets[cat] = counts[cat]
    residual = m - sum(targets.values())
    if residual != 0:
        # absorb rounding slack in the largest untouched category, falling
        # back to the moved categories when the stratum has no other kind
        pool = sorted(untouched, key=lambda c: (-counts[c], c)) or sorted(
            moves, key=lambda c: (-counts.get(c, 0), c)
        )
        for cat in pool:
            adj = max(targets.get(cat, 0) + residual, 0)
            residual -= adj - targets.get(cat, 0)
            targets[cat] = adj
            if residual == 0:
                break
        if residual != 0:
            return None

    parts = []
    for cat in sorted(targets):
        members = sub[categories == cat]
        cur = len(members)
        t = targets[cat]
        if t == cur:
            if cur:
                parts.append(members)
            continue
        if cur == 0:
            return None
        members = members.sort_values("record_id", kind="mergesort")
        rng = np.random.default_rng(
            _derive_seed(seed, salt, stratum_key, cat)
        )
        draw = rng.integers(0, cur, size=t)
        parts.append(members.iloc[draw])
    return pd.concat(parts, axis=0) if parts else sub.iloc[:0]


def _derive_seed(seed: int, *parts) -> np.random.SeedSequence:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.SeedSequence((int(seed), int.from_bytes(h[:8], "big")))


def shift_race_mix(
    df: pd.DataFrame,
    asian_pp: float = 0.02,
    white_pp: float = -0.02,
    seed: int = 0,
    cuts=AGE_BAND_CUTS,
) -> pd.DataFrame:
    """Move the Asian share up and the White share down within strata.

    Strata are (age band, sex).  Stratum sizes are preserved exactly;
    categories already at target keep their original rows.  A stratum that
    must grow a category with no members is left unchanged with a warning.
    """
    moves = {"asian": asian_pp, "white": white_pp}
    if asian_pp == 0.0 and white_pp == 0.0:
        return df.copy()
    bands = age_band_index(df["age"], cuts)
    cats = race_category(df)
    parts = []
    for (band, male), idx in df.groupby([bands, df["male"]], sort=True).groups.items():
        sub = df.loc[idx]
        new = _rake_stratum(
            sub, cats.loc[idx], moves, seed, "race_mix", f"band{band}-male{male}"
        )
        if new is None:
            warnings.warn(
                f"race_mix: stratum band={band} male={male} lacks members to "
                "resample toward its target; stratum left unchanged"
            )
            parts.append(sub)
        else:
            parts.append(new)
    return pd.concat(parts, axis=0).reset_index(drop=True)


def shift_spouse_mix(
    df: pd.DataFrame,
    spouse_pp: float = 0.03,
    baseline_pp: float = -0.03,
    age_range: tuple = (30.0, 45.0),
    seed: int = 0,
    cuts=AGE_BAND_CUTS,
) -> pd.DataFrame:
    """Move spouse-present up against the no-spouse baseline in ages 30-44.

    Raking mechanics as in shift_race_mix, with age-band strata restricted
    to the bands covering age_range; records elsewhere are untouched.
    """
    moves = {"spouse": spouse_pp, "none": baseline_pp}
    if spouse_pp == 0.0 and baseline_pp == 0.0:
        return df.copy()
    bands = age_band_index(df["age"], cuts)
    lo, hi = age_range
    lo_band = int(age_band_index([lo], cuts)[0])
    hi_band = int(age_band_index([hi - 1e-9], cuts)[0])
    cats = spouse_category(df)
    parts = []
    for band, idx in df.groupby(bands, sort=True).groups.items():
        sub = df.loc[idx]
        if not lo_band <= band <= hi_band:
            parts.append(sub)
            continue
        new = _rake_stratum(
            sub, cats.loc[idx], moves, seed, "spouse_mix", f"band{band}"
        )
        if new is None:
            warnings.warn(
                f"spouse_mix: age band {band} lacks members to resample toward "
                "its target; band left unchanged"
            )
            parts.append(sub)
        else:
            parts.append(new)
    return pd.concat(parts, axis=0).reset_index(drop=True)


def apply_shift(df: pd.DataFrame, spec: ShiftSpec) -> pd.DataFrame:
    spec.validate()
    if spec.kind == "earnings_quantile_lift":
        return shift_earnings_quantile_lift(df, magnitude=spec.magnitude)
    if spec.kind == "age_band_shift":
        return shift_age_band(
            df, p=spec.p, delta=spec.delta, band=spec.age_band, seed=spec.seed
        )
    if spec.kind == "race_mix":
        return shift_race_mix(
            df,
            asian_pp=spec.asian_pp,
            white_pp=spec.white_pp,
            seed=spec.seed,
            cuts=tuple(spec.age_band_cuts),
        )
    return shift_spouse_mix(
        df,
        spouse_pp=spec.spouse_pp,
        baseline_pp=spec.baseline_pp,
        age_range=spec.spouse_age_range,
        seed=spec.seed,
        cuts=tuple(spec.age_band_cuts),
    )


def default_shift_specs(seed: int = 0) -> list[ShiftSpec]:
    return [ShiftSpec(kind=k, seed=seed) for k in SHIFT_KINDS]


def write_shift_provenance(path, spec: ShiftSpec) -> None:
    atomic_write_text(path, json.dumps(asdict(spec), indent=2) + "\n")


# ---------------------------------------------------------------------------
# drift metrics
# ---------------------------------------------------------------------------


@dataclass
class DriftReport:
    estimator: str
    shift: str
    mad: float
    rel_l2: float
    one_minus_cos: float


def drift_metrics(theta0, theta1, estimator: str = "", shift: str = "") -> DriftReport:
    """MAD, RelL2, and 1 - cosine between two flat coefficient vectors."""
    t0 = np.asarray(theta0, dtype=float).ravel()
    t1 = np.asarray(theta1, dtype=float).ravel()
    if t0.shape != t1.shape or t0.size == 0:
        raise ShiftError(f"coefficient vectors must share a positive length, got {t0.size} vs {t1.size}")
    n0 = np.linalg.norm(t0)
    n1 = np.linalg.norm(t1)
    if n0 == 0.0 or n1 == 0.0:
        raise ShiftError("drift metrics are undefined for a zero coefficient vector")
    diff = t1 - t0
    return DriftReport(
        estimator=estimator,
        shift=shift,
        mad=float(np.abs(diff).mean()),
        rel_l2=float(np.linalg.norm(diff) / n0),
        one_minus_cos=float(1.0 - (t0 @ t1) / (n0 * n1)),
    )


# ---------------------------------------------------------------------------
# invariance orchestration
# ---------------------------------------------------------------------------


def _flat_estimate(df, estimator: str, options: FitOptions):
    if estimator == "structural":
        fit = fit_structural(df, options)
        if not fit.converged:
            raise ShiftError("structural fit did not converge during invariance run")
        return fit.theta_flat()
    if estimator == "ols":
        return fit_ols(df, features=options.features).beta_flat()
    raise ShiftError(f"unknown estimator {estimator!r}")


def run_invariance(
    df: pd.DataFrame,
    specs: list[ShiftSpec],
    estimators: tuple = ("structural", "ols"),
    options: FitOptions | None = None,
    refit_standardization: bool = False,
) -> list[DriftReport]:
    """Fit each estimator before and after each shift; report drift.

    Shifts act on the raw continuous fields.  By default the post-shift
    sample is standardized with the BASELINE moments so drift reflects
    behavioral/compositional change, not rescaling; pass
    refit_standardization=True to re-fit moments after the shift instead.
    """
    opts = options or FitOptions()
    params = fit_standardization(df)
    base = apply_standardization(df, params)
    theta0 = {est: _flat_estimate(base, est, opts) for est in estimators}
    reports = []
    for spec in specs:
        shifted = apply_shift(df, spec)
        sparams = fit_standardization(shifted) if refit_standardization else params
        shifted_std = apply_standardization(shifted, sparams)
        for est in estimators:
            try:
                theta1 = _flat_estimate(shifted_std, est, opts)
            except Exception as exc:
                raise ShiftError(f"estimator {est!r} failed under shift {spec.kind!r}: {exc}") from exc
            reports.append(drift_metrics(theta0[est], theta1, estimator=est, shift=spec.kind))
    return reports


def drift_table(reports: list[DriftReport]) -> pd.DataFrame:
    """One row per shift, metric x estimator columns."""
    rows = {}
    for r in reports:
        row = rows.setdefault(r.shift, {"shift": r.shift})
        for metric in ("mad", "rel_l2", "one_minus_cos"):
            row[f"{metric}_{r.estimator}"] = getattr(r, metric)
    return pd.DataFrame(list(rows.values()))
