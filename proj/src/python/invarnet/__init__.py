"""Adversarial invariant representations: training, exact oracle, evaluation."""

import json

from ._core import (
    ConfigError,
    DataError,
    Error,
    GuardError,
    NumericalError,
    biased_category_accuracy,
    cli,
    oracle_search,
    synthetic,
    verify,
)


def run_synthetic(**kwargs):
    """Train and evaluate on a synthetic dataset; returns the metrics dict."""
    from ._core import run_synthetic_json

    return json.loads(run_synthetic_json(**kwargs))


__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "GuardError",
    "NumericalError",
    "biased_category_accuracy",
    "cli",
    "oracle_search",
    "run_synthetic",
    "synthetic",
    "verify",
]
