"""Differentially private training of linear classifiers under rate constraints."""

from .constraints import (
    ConstraintSet,
    RateConstraint,
    build_demographic_parity,
    build_equalized_odds,
    build_fnr,
    evaluate_from_histogram,
)
from .estimator import RaCODPClassifier
from .optimizer import Hyperparams, train
from .privacy import ClosedFormAccountant, PrivacyConfig, calibrate_closed_form, steps_for_budget

__version__ = "0.1.0"

__all__ = [
    "ClosedFormAccountant",
    "ConstraintSet",
    "Hyperparams",
    "PrivacyConfig",
    "RaCODPClassifier",
    "RateConstraint",
    "build_demographic_parity",
    "build_equalized_odds",
    "build_fnr",
    "calibrate_closed_form",
    "evaluate_from_histogram",
    "steps_for_budget",
    "train",
]
