"""Structural time-allocation toolkit.

Fits an interpretable constrained time-allocation model to observed daily
minutes, compares the recovered coefficient vectors across decision makers
(survey respondents, language-model agents), stress-tests estimates under
counterfactual covariate shifts, and runs a retrieval-augmented mitigation
loop for targeted prompts.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    ACTIVITIES,
    ACTIVITY_LABELS,
    FEATURES,
    F_DIM,
    T_DEFAULT,
    predict_shares,
    shares_to_minutes,
    utility,
)
