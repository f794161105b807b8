"""Alignment diagnostics between a human baseline fit and model fits.

All diagnostics compare coefficient matrices cell by cell over the
(activity, feature) grid:

* per-activity cosine similarity of coefficient vectors (direction match),
* absolute deviations per cell, averaged into a per-model divergence score
  and into per-cell across-model attribute scores,
* per-feature cosine between the two 3-vectors of activity coefficients
  (does the model bend trade-offs for this feature the same way humans do),
* a ranked worst-alignment table localizing the biggest gaps.

Intercept cells are included in the averages by default; every aggregate
is also emitted with intercepts excluded, since reasonable readers want
either convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .estimator import FitOptions, FitResult, N_FREE, fit_structural
from .model import ACTIVITIES


class AlignmentError(ValueError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise AlignmentError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise AlignmentError("cosine similarity is undefined for a zero vector")
    return float(a @ b / (na * nb))


def _check_schema(human: FitResult, model: FitResult) -> None:
    if human.features != model.features:
        only_h = [f for f in human.features if f not in model.features]
        only_m = [f for f in model.features if f not in human.features]
        raise AlignmentError(
            "fits use different feature sets; "
            f"human-only={only_h}, model-only={only_m}"
        )


def feature_deviations(human: FitResult, model: FitResult) -> np.ndarray:
    """|theta_model - theta_human| per (activity, feature) cell, (3, F)."""
    _check_schema(human, model)
    return np.abs(model.theta - human.theta)


def model_divergence(delta: np.ndarray) -> float:
    """Mean of a deviation table over all its cells."""
    d = np.asarray(delta, dtype=float)
    if d.size == 0:
        raise AlignmentError("deviation table is empty")
    return float(d.mean())


def attribute_divergence(deltas: list[np.ndarray]) -> np.ndarray:
    """Per-cell mean of deviation tables across models, (3, F)."""
    if not deltas:
        raise AlignmentError("need at least one model deviation table")
    return np.mean(np.stack([np.asarray(d, dtype=float) for d in deltas]), axis=0)


def attribute_activity_cosine(human: FitResult, model: FitResult, feature: str) -> float:
    """Cosine between the two (leisure, work, sleep) coefficient 3-vectors."""
    _check_schema(human, model)
    if feature not in human.features:
        raise AlignmentError(f"unknown feature {feature!r}")
    f = human.features.index(feature)
    return cosine_similarity(human.theta[:, f], model.theta[:, f])


@dataclass
class AlignmentReport:
    features: tuple
    models: tuple
    # per model: {activity: cosine}, intercept included / excluded
    activity_cosine: dict
    activity_cosine_no_intercept: dict
    # per model: (3, F) deviation table
    deviations: dict
    model_divergence: dict               # M per model, all cells
    model_divergence_no_intercept: dict
    attribute_table: np.ndarray          # (3, F) across-model mean deviation
    feature_cosine: dict                 # per model: {feature: 3-vector cosine}
    worst: pd.DataFrame                  # per activity: worst cell and model

    def attribute_ranking(self) -> pd.DataFrame:
        rows = []
        for j, act in enumerate(ACTIVITIES[:N_FREE]):
            for f, name in enumerate(self.features):
                rows.append(
                    {
                        "activity": act,
                        "feature": name,
                        "mean_abs_deviation": float(self.attribute_table[j, f]),
                    }
                )
        out = pd.DataFrame(rows).sort_values(
            "mean_abs_deviation", ascending=False, kind="mergesort"
        )
        return out.reset_index(drop=True)

    def to_json(self) -> str:
        doc = {
            "kind": "alignment_report",
            "features": list(self.features),
            "models": list(self.models),
            "activity_cosine": self.activity_cosine,
            "activity_cosine_no_intercept": self.activity_cosine_no_intercept,
            "deviations": {m: d.tolist() for m, d in self.deviations.items()},
            "model_divergence": self.model_divergence,
            "model_divergence_no_intercept": self.model_divergence_no_intercept,
            "attribute_table": self.attribute_table.tolist(),
            "feature_cosine": self.feature_cosine,
            "worst": self.worst.to_dict("records"),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AlignmentReport":
        doc = json.loads(text)
        if doc.get("kind") != "alignment_report":
            raise ValueError(f"not an alignment report: kind={doc.get('kind')!r}")
        return cls(
            features=tuple(doc["features"]),
            models=tuple(doc["models"]),
            activity_cosine=doc["activity_cosine"],
            activity_cosine_no_intercept=doc["activity_cosine_no_intercept"],
            deviations={m: np.asarray(d) for m, d in doc["deviations"].items()},
            model_divergence=doc["model_divergence"],
            model_divergence_no_intercept=doc["model_divergence_no_intercept"],
            attribute_table=np.asarray(doc["attribute_table"]),
            feature_cosine=doc["feature_cosine"],
            worst=pd.DataFrame(doc["worst"]),
        )


def build_alignment_report(human: FitResult, models: dict) -> AlignmentReport:
    """All alignment diagnostics for one or more model fits."""
    if not models:
        raise AlignmentError("need at least one model fit")
    for m in models.values():
        _check_schema(human, m)
    features = human.features
    has_intercept = "intercept" in features
    nonint = [f for f, n in enumerate(features) if n != "intercept"]

    activity_cos = {}
    activity_cos_ni = {}
    deviations = {}
    m_div = {}
    m_div_ni = {}
    feat_cos = {}
    for label, fit in models.items():
        activity_cos[label] = {
            act: cosine_similarity(human.theta[j], fit.theta[j])
            for j, act in enumerate(ACTIVITIES[:N_FREE])
        }
        if has_intercept:
            activity_cos_ni[label] = {
                act: cosine_similarity(human.theta[j, nonint], fit.theta[j, nonint])
                for j, act in enumerate(ACTIVITIES[:N_FREE])
            }
        else:
            activity_cos_ni[label] = dict(activity_cos[label])
        delta = feature_deviations(human, fit)
        deviations[label] = delta
        m_div[label] = model_divergence(delta)
        m_div_ni[label] = model_divergence(delta[:, nonint]) if nonint else m_div[label]
        feat_cos[label] = {
            name: attribute_activity_cosine(human, fit, name) for name in features
        }

    attribute_table = attribute_divergence(list(deviations.values()))

    worst_rows = []
    for j, act in enumerate(ACTIVITIES[:N_FREE]):
        f_worst = int(np.argmax(attribute_table[j]))
        best_pair = max(
            ((label, float(d[j, f_worst])) for label, d in deviations.items()),
            key=lambda t: t[1],
        )
        worst_rows.append(
            {
                "activity": act,
                "worst_feature": features[f_worst],
                "mean_abs_deviation": float(attribute_table[j, f_worst]),
                "worst_model": best_pair[0],
                "worst_model_deviation": best_pair[1],
            }
        )

    return AlignmentReport(
        features=features,
        models=tuple(models.keys()),
        activity_cosine=activity_cos,
        activity_cosine_no_intercept=activity_cos_ni,
        deviations=deviations,
        model_divergence=m_div,
        model_divergence_no_intercept=m_div_ni,
        attribute_table=attribute_table,
        feature_cosine=feat_cos,
        worst=pd.DataFrame(worst_rows),
    )


# ---------------------------------------------------------------------------
# subgroup aggregation
# ---------------------------------------------------------------------------

MIN_GROUP_SIZE = 50


def subgroup_split(df: pd.DataFrame, keys, min_size: int = MIN_GROUP_SIZE):
    """Partition records by demographic keys.

    Returns a list of (key_tuple, group_df, unstable_flag); groups below
    min_size are flagged rather than dropped.
    """
    keys = list(keys)
    if not keys:
        raise AlignmentError("need at least one grouping key")
    for k in keys:
        if k not in df.columns:
            raise AlignmentError(f"unknown grouping key {k!r}")
    out = []
    for key, group in df.groupby(keys, sort=True):
        if not isinstance(key, tuple):
            key = (key,)
        out.append((key, group.reset_index(drop=True), len(group) < min_size))
    return out


def group_mean_shares(df: pd.DataFrame, keys, T: float = 1440.0) -> pd.DataFrame:
    """Per-group mean observed shares, one row per group."""
    rows = []
    for key, group, unstable in subgroup_split(df, keys, min_size=MIN_GROUP_SIZE):
        row = dict(zip(keys, key))
        for a in ACTIVITIES:
            row[f"share_{a}"] = float(group[f"minutes_{a}"].mean() / T)
        row["n"] = len(group)
        row["unstable"] = unstable
        rows.append(row)
    return pd.DataFrame(rows)


def subgroup_fits(df: pd.DataFrame, keys, options: FitOptions | None = None,
                  min_size: int = MIN_GROUP_SIZE):
    """Structural fit per demographic group.

    Returns a list of (key_tuple, FitResult, unstable_flag); groups below
    min_size are fitted anyway but flagged as unstable.
    """
    out = []
    for key, group, unstable in subgroup_split(df, keys, min_size=min_size):
        out.append((key, fit_structural(group, options), unstable))
    return out


# ---------------------------------------------------------------------------
# flat CSV emission
# ---------------------------------------------------------------------------


def report_tables(report: AlignmentReport) -> dict:
    """Flat tables per metric, keyed by a short table name."""
    cos_rows = []
    for label in report.models:
        for act in ACTIVITIES[:N_FREE]:
            cos_rows.append(
                {
                    "model": label,
                    "activity": act,
                    "cosine": report.activity_cosine[label][act],
                    "cosine_no_intercept": report.activity_cosine_no_intercept[label][act],
                }
            )
    div_rows = [
        {
            "model": label,
            "divergence": report.model_divergence[label],
            "divergence_no_intercept": report.model_divergence_no_intercept[label],
        }
        for label in report.models
    ]
    dev_rows = []
    for label in report.models:
        d = report.deviations[label]
        for j, act in enumerate(ACTIVITIES[:N_FREE]):
            for f, name in enumerate(report.features):
                dev_rows.append(
                    {
                        "model": label,
                        "activity": act,
                        "feature": name,
                        "abs_deviation": float(d[j, f]),
                    }
                )
    feat_rows = []
    for label in report.models:
        for name in report.features:
            feat_rows.append(
                {
                    "model": label,
                    "feature": name,
                    "activity_vector_cosine": report.feature_cosine[label][name],
                }
            )
    return {
        "activity_cosine": pd.DataFrame(cos_rows),
        "model_divergence": pd.DataFrame(div_rows),
        "deviations": pd.DataFrame(dev_rows),
        "attribute_ranking": report.attribute_ranking(),
        "feature_cosine": pd.DataFrame(feat_rows),
        "worst_alignment": report.worst,
    }
