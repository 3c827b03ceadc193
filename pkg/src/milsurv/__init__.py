"""Weakly-supervised survival prediction from patch bags, with the
statistics, mask morphology and cluster-based explanation around it."""

__version__ = "0.1.0"

from milsurv.errors import NumericalError, ValidationError

__all__ = [
    "CovariateMatrix",
    "NumericalError",
    "SurvivalRecord",
    "ValidationError",
    "__version__",
]


def __getattr__(name):
    # numpy-backed types load lazily so the CLI can set thread counts first
    if name in ("CovariateMatrix", "SurvivalRecord"):
        from milsurv import records

        return getattr(records, name)
    raise AttributeError(name)
