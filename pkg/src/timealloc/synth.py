"""Synthetic populations and simulated allocations from a known truth.

Covariates are drawn from configurable marginals (truncated-normal age,
categorical education, log-normal weekly earnings, Bernoulli/categorical
indicators), then allocations are simulated from a ground-truth coefficient
matrix -- exactly the model's predicted shares, optionally perturbed by
mean-preserving Dirichlet noise.  This gives offline parameter-recovery and
shift-invariance tests a planted truth without any survey access.

Determinism contract: all draws come from numpy's PCG64 generator (the
algorithm identifier ``numpy-pcg64`` is embedded in dataset metadata).
Population draws use one stream seeded by the config seed; per-record noise
uses an independent stream per record seeded by (seed, record index), so
simulation is reproducible record by record regardless of batching.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .fileio import atomic_write_text
from .ingest import CLEAN_COLUMNS, apply_standardization, fit_standardization
from .model import ACTIVITIES, T_DEFAULT, as_theta, feature_matrix, predict_shares

PRNG_NAME = "numpy-pcg64"

RACE_CATEGORIES = ("white", "black", "native", "asian", "pacific")
SPOUSE_CATEGORIES = ("spouse", "partner", "none")


class SynthError(ValueError):
    pass


@dataclass
class PopulationConfig:
    n: int = 1000
    seed: int = 0
    age_mean: float = 45.0
    age_sd: float = 17.0
    age_bounds: tuple = (18.0, 80.0)
    edu_probs: tuple = (0.35, 0.30, 0.20, 0.15)
    earn_log_mu: float = 6.5
    earn_log_sigma: float = 0.8
    male_p: float = 0.51
    # (spouse present, unmarried partner, neither)
    spouse_probs: tuple = (0.54, 0.06, 0.40)
    # (white, black, native, asian, pacific)
    race_probs: tuple = (0.78, 0.12, 0.01, 0.08, 0.01)

    def validate(self) -> None:
        if self.n < 1:
            raise SynthError("population size must be at least 1")
        if self.age_sd <= 0:
            raise SynthError("age_sd must be positive")
        lo, hi = self.age_bounds
        if not lo < hi:
            raise SynthError("age bounds must satisfy lo < hi")
        if self.earn_log_sigma <= 0:
            raise SynthError("earn_log_sigma must be positive")
        if not 0.0 <= self.male_p <= 1.0:
            raise SynthError("male_p must be in [0, 1]")
        for name, probs, k in (
            ("edu_probs", self.edu_probs, 4),
            ("spouse_probs", self.spouse_probs, 3),
            ("race_probs", self.race_probs, 5),
        ):
            p = np.asarray(probs, dtype=float)
            if p.shape != (k,) or np.any(p < 0):
                raise SynthError(f"{name} must be {k} nonnegative probabilities")
            if abs(p.sum() - 1.0) > 1e-9:
                raise SynthError(f"{name} must sum to 1 (got {p.sum()!r})")


@dataclass
class NoiseConfig:
    kind: str = "none"  # "none" or "dirichlet"
    kappa: float = 1000.0

    def validate(self) -> None:
        if self.kind not in ("none", "dirichlet"):
            raise SynthError(f"unknown noise kind {self.kind!r}")
        if self.kind == "dirichlet" and not self.kappa > 0:
            raise SynthError("dirichlet concentration kappa must be positive")


def _truncated_normal(rng, mean, sd, lo, hi, size):
    """Rejection-sampled truncated normal; deterministic given the stream."""
    out = np.empty(size)
    pending = np.arange(size)
    for _ in range(1000):
        draws = rng.normal(mean, sd, size=pending.size)
        ok = (draws >= lo) & (draws <= hi)
        out[pending[ok]] = draws[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise SynthError(
        "truncated normal rejected 1000 passes; age bounds exclude nearly all mass"
    )


def _categorical(rng, probs, size):
    cum = np.cumsum(np.asarray(probs, dtype=float))
    cum[-1] = 1.0
    return np.searchsorted(cum, rng.random(size), side="right")


def generate_population(cfg: PopulationConfig) -> pd.DataFrame:
    """Draw covariates for n records; z-scores fit on the generated sample."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    n = cfg.n
    lo, hi = cfg.age_bounds
    age = _truncated_normal(rng, cfg.age_mean, cfg.age_sd, lo, hi, n)
    edu = _categorical(rng, cfg.edu_probs, n) + 1
    earnweek = rng.lognormal(cfg.earn_log_mu, cfg.earn_log_sigma, n)
    male = (rng.random(n) < cfg.male_p).astype(int)
    spouse_cat = _categorical(rng, cfg.spouse_probs, n)
    race_cat = _categorical(rng, cfg.race_probs, n)

    df = pd.DataFrame(
        {
            "record_id": [f"synth-{i:06d}" for i in range(n)],
            "age": age,
            "edu": edu.astype(float),
            "earnweek": earnweek,
            "male": male,
            "spouse_present": (spouse_cat == 0).astype(int),
            "partner_present": (spouse_cat == 1).astype(int),
            "race_black": (race_cat == 1).astype(int),
            "race_native": (race_cat == 2).astype(int),
            "race_asian": (race_cat == 3).astype(int),
            "race_pacific": (race_cat == 4).astype(int),
            "renormalized": 0,
            "floored": 0,
        }
    )
    params = fit_standardization(df)
    return apply_standardization(df, params)


def simulate_allocations(
    theta_star,
    df: pd.DataFrame,
    noise: NoiseConfig | None = None,
    seed: int = 0,
    T: float = T_DEFAULT,
    form: str = "softmax",
) -> pd.DataFrame:
    """Attach observed minutes simulated from the ground-truth coefficients.

    noise "none" writes the model's predicted minutes exactly; "dirichlet"
    draws shares with mean equal to the predicted shares and concentration
    kappa (gamma construction: g_j ~ Gamma(kappa * s_j), share = g / sum g),
    one independent PCG64 stream per record seeded by (seed, row index).
    """
    noise = noise or NoiseConfig()
    noise.validate()
    theta = as_theta(theta_star)
    X = feature_matrix(df)
    P = predict_shares(theta, X, form=form)
    if noise.kind == "dirichlet":
        S = np.empty_like(P)
        for i in range(len(df)):
            rg = np.random.default_rng(np.random.SeedSequence((seed, i)))
            g = rg.gamma(shape=noise.kappa * P[i], scale=1.0)
            tot = g.sum()
            if tot == 0.0 or np.any(g == 0.0):
                g = np.maximum(g, 1e-300)
                tot = g.sum()
            S[i] = g / tot
    else:
        S = P
    out = df.copy()
    M = S * T
    for j, a in enumerate(ACTIVITIES):
        out[f"minutes_{a}"] = M[:, j]
    return out[[c for c in CLEAN_COLUMNS if c in out.columns]
               + [c for c in out.columns if c not in CLEAN_COLUMNS]]


def dataset_metadata(
    cfg: PopulationConfig, theta_star, noise: NoiseConfig, seed: int,
    form: str = "softmax",
) -> dict:
    return {
        "generator": PRNG_NAME,
        "population": asdict(cfg),
        "theta_star": as_theta(theta_star).tolist(),
        "noise": asdict(noise),
        "allocation_seed": seed,
        "model_form": form,
    }


def write_metadata_json(path, metadata: dict) -> None:
    atomic_write_text(path, json.dumps(metadata, indent=2) + "\n")
