"""Survey-extract ingestion: recoding, filtering, standardization.

Raw rows use the IPUMS-style integer codings (SEX, RACE, EARNWEEK,
EDUCYRS, SPOUSEPRES) plus pre-aggregated daily minutes for the four
activities.  Cleaning applies the filters and recodes in a fixed order and
returns either a clean record or a structured rejection reason, so the raw
-> final funnel is fully auditable: every input row lands in exactly one
bucket, and rejections go to a sidecar file instead of vanishing.

Column names in the input CSV are configurable through a header map
(ATUS-style defaults below) because extract naming varies by download.
Continuous covariates (age, the 4-level education grade, weekly earnings)
are z-scored with sample (n-1) standard deviations; binary indicators are
left on the 0/1 scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .fileio import atomic_write_df, atomic_write_text
from .model import ACTIVITIES, T_DEFAULT

# raw-field -> default CSV header
DEFAULT_HEADER_MAP = {
    "record_id": "CASEID",
    "sex": "SEX",
    "race": "RACE",
    "earnweek": "EARNWEEK",
    "educyrs": "EDUCYRS",
    "spousepres": "SPOUSEPRES",
    "age": "AGE",
    "minutes_work": "minutes_work",
    "minutes_leisure": "minutes_leisure",
    "minutes_sleep": "minutes_sleep",
    "minutes_other": "minutes_other",
}

EARNWEEK_MISSING = 99999.99
RACE_WHITE = 100
RACE_DUMMIES = {110: "race_black", 120: "race_native", 131: "race_asian", 132: "race_pacific"}

# rejection reasons, in rule order
R_NIU_SEX = "niu-sex"
R_NIU_SPOUSE = "niu-spousepres"
R_MULTIRACIAL = "multiracial-excluded"
R_MISSING_EARN = "missing-earnings"
R_UNKNOWN_SEX = "unknown-sex-code"
R_UNKNOWN_SPOUSE = "unknown-spousepres-code"
R_UNKNOWN_RACE = "unknown-race-code"
R_UNKNOWN_EDU = "unknown-educyrs-code"
R_BAD_MINUTES = "negative-minutes"
R_MINUTES_SUM = "minutes-sum-mismatch"

REJECTION_REASONS = (
    R_NIU_SEX,
    R_NIU_SPOUSE,
    R_MULTIRACIAL,
    R_MISSING_EARN,
    R_UNKNOWN_SEX,
    R_UNKNOWN_SPOUSE,
    R_UNKNOWN_RACE,
    R_UNKNOWN_EDU,
    R_BAD_MINUTES,
    R_MINUTES_SUM,
)

MINUTES_SUM_TOL = 1e-6

# canonical cleaned-records column order, shared by every dataset producer
CLEAN_COLUMNS = (
    "record_id",
    "age",
    "edu",
    "earnweek",
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
    "minutes_leisure",
    "minutes_work",
    "minutes_sleep",
    "minutes_other",
    "renormalized",
    "floored",
)

CONTINUOUS_FIELDS = ("age", "edu", "earnweek")


class IngestError(ValueError):
    pass


def recode_edu(educyrs: float) -> int | None:
    """Collapse detailed schooling codes into the 4-level grade.

    <=112 (grades 1-12) -> 1; (112, 216] some college -> 2; 217
    bachelor's -> 3; >300 postgraduate -> 4.  Codes in (217, 300] have no
    documented meaning and map to None.
    """
    e = float(educyrs)
    if e <= 112:
        return 1
    if e <= 216:
        return 2
    if e == 217:
        return 3
    if e > 300:
        return 4
    return None


def clean_row(row: dict) -> tuple[dict | None, str | None]:
    """Apply the filters and recodes to one raw row.

    Returns (record, None) on success or (None, reason).  Filter order:
    NIU sex, NIU spouse status, multiracial, missing earnings, then code
    recodes and minutes validation.  Deterministic and row-local, so
    cleaning is order-independent over the file.
    """
    sex = float(row["sex"])
    spousepres = float(row["spousepres"])
    race = float(row["race"])
    earnweek = float(row["earnweek"])
    if sex == 99:
        return None, R_NIU_SEX
    if spousepres == 99:
        return None, R_NIU_SPOUSE
    if race >= 200:
        return None, R_MULTIRACIAL
    if earnweek == EARNWEEK_MISSING:
        return None, R_MISSING_EARN
    if sex not in (1, 2):
        return None, R_UNKNOWN_SEX
    if spousepres not in (1, 2, 3):
        return None, R_UNKNOWN_SPOUSE
    if race != RACE_WHITE and int(race) not in RACE_DUMMIES:
        return None, R_UNKNOWN_RACE
    edu = recode_edu(row["educyrs"])
    if edu is None:
        return None, R_UNKNOWN_EDU

    minutes = np.array(
        [float(row[f"minutes_{a}"]) for a in ACTIVITIES], dtype=float
    )
    if np.any(minutes < 0):
        return None, R_BAD_MINUTES
    if abs(minutes.sum() - T_DEFAULT) > MINUTES_SUM_TOL:
        return None, R_MINUTES_SUM
    floored = 0
    if np.any(minutes == 0):
        # logs need strictly positive minutes: floor zeros at 1 minute and
        # rescale the rest so the budget still holds exactly
        zeros = minutes == 0
        nz = int(zeros.sum())
        minutes[~zeros] *= (T_DEFAULT - nz) / minutes[~zeros].sum()
        minutes[zeros] = 1.0
        floored = 1

    rec = {
        "record_id": str(row["record_id"]),
        "age": float(row["age"]),
        "edu": float(edu),
        "earnweek": earnweek,
        "male": int(sex == 1),
        "spouse_present": int(spousepres == 1),
        "partner_present": int(spousepres == 2),
        "race_black": 0,
        "race_native": 0,
        "race_asian": 0,
        "race_pacific": 0,
        "renormalized": 0,
        "floored": floored,
    }
    if race != RACE_WHITE:
        rec[RACE_DUMMIES[int(race)]] = 1
    for a, m in zip(ACTIVITIES, minutes):
        rec[f"minutes_{a}"] = float(m)
    return rec, None


def read_raw_csv(path, header_map: dict | None = None, delimiter: str = ",") -> pd.DataFrame:
    """Read a raw extract, renaming headers to the canonical raw fields.

    record_id falls back to the row number when the mapped column is absent.
    """
    hmap = dict(DEFAULT_HEADER_MAP)
    if header_map:
        hmap.update(header_map)
    df = pd.read_csv(path, delimiter=delimiter)
    rename = {}
    for field, col in hmap.items():
        if col in df.columns:
            rename[col] = field
        elif field in df.columns:
            continue  # already using the canonical name
        elif field != "record_id":
            raise IngestError(f"raw file is missing column {col!r} (field {field!r})")
    df = df.rename(columns=rename)
    if "record_id" not in df.columns:
        df["record_id"] = [f"row-{i}" for i in range(len(df))]
    return df


def clean_dataframe(raw: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Clean every row; returns (clean records, rejections).

    len(clean) + len(rejections) == len(raw) always (funnel accounting).
    """
    records = []
    rejections = []
    for row in raw.to_dict("records"):
        rec, reason = clean_row(row)
        if rec is None:
            rejections.append({"record_id": str(row.get("record_id", "")), "reason": reason})
        else:
            records.append(rec)
    cols = [c for c in CLEAN_COLUMNS if c not in ("age_z", "edu_z", "earnweek_z")]
    clean = pd.DataFrame(records, columns=cols)
    rej = pd.DataFrame(rejections, columns=["record_id", "reason"])
    return clean, rej


def funnel_counts(raw: pd.DataFrame, clean: pd.DataFrame, rejections: pd.DataFrame) -> dict:
    counts = {"raw": len(raw), "accepted": len(clean)}
    by_reason = rejections["reason"].value_counts().to_dict() if len(rejections) else {}
    for reason in REJECTION_REASONS:
        if by_reason.get(reason):
            counts[reason] = int(by_reason[reason])
    return counts


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass
class StandardizationParams:
    mean: dict
    sd: dict

    def to_json(self) -> str:
        return json.dumps(
            {f: {"mean": self.mean[f], "sd": self.sd[f]} for f in CONTINUOUS_FIELDS},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "StandardizationParams":
        doc = json.loads(text)
        return cls(
            mean={f: float(doc[f]["mean"]) for f in CONTINUOUS_FIELDS},
            sd={f: float(doc[f]["sd"]) for f in CONTINUOUS_FIELDS},
        )


def fit_standardization(df: pd.DataFrame) -> StandardizationParams:
    """Sample mean/sd (n-1 denominator) for the continuous covariates."""
    if len(df) < 2:
        raise IngestError("standardization needs at least 2 records")
    mean, sd = {}, {}
    for f in CONTINUOUS_FIELDS:
        x = df[f].to_numpy(dtype=float)
        m = float(x.mean())
        s = float(x.std(ddof=1))
        if s == 0.0:
            raise IngestError(f"column {f!r} has zero variance; cannot standardize")
        mean[f], sd[f] = m, s
    return StandardizationParams(mean=mean, sd=sd)


def apply_standardization(df: pd.DataFrame, params: StandardizationParams) -> pd.DataFrame:
    """Add/overwrite the z-score columns; binaries are untouched."""
    out = df.copy()
    for f in CONTINUOUS_FIELDS:
        out[f"{f}_z"] = (out[f].to_numpy(dtype=float) - params.mean[f]) / params.sd[f]
    return out[[c for c in CLEAN_COLUMNS if c in out.columns]
               + [c for c in out.columns if c not in CLEAN_COLUMNS]]


# ---------------------------------------------------------------------------
# summary statistics
# ---------------------------------------------------------------------------

SUMMARY_VARIABLES = (
    "age",
    "edu",
    "earnweek",
    "male",
    "spouse_present",
    "partner_present",
    "race_black",
    "race_native",
    "race_asian",
    "race_pacific",
)


def summarize(df: pd.DataFrame) -> pd.DataFrame:
    """Mean/sd/min/max per covariate plus mean minutes per activity."""
    if len(df) == 0:
        raise IngestError("cannot summarize an empty dataset")
    single = len(df) == 1
    rows = []
    names = list(SUMMARY_VARIABLES) + [f"minutes_{a}" for a in ACTIVITIES]
    for name in names:
        x = df[name].to_numpy(dtype=float)
        rows.append(
            {
                "variable": name,
                "mean": float(x.mean()),
                "sd": 0.0 if single else float(x.std(ddof=1)),
                "min": float(x.min()),
                "max": float(x.max()),
                "flag": "single-record" if single else "",
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------


def write_clean_csv(path, df: pd.DataFrame) -> None:
    missing = [c for c in CLEAN_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(f"cleaned dataset is missing columns: {missing}")
    atomic_write_df(path, df[list(CLEAN_COLUMNS)])


def load_clean_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"record_id": str})
    missing = [c for c in CLEAN_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(f"cleaned dataset file is missing columns: {missing}")
    return df


def write_rejections_csv(path, rejections: pd.DataFrame) -> None:
    atomic_write_df(path, rejections)


def write_standardization_json(path, params: StandardizationParams) -> None:
    atomic_write_text(path, params.to_json() + "\n")
