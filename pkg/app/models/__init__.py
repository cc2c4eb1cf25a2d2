"""
Pydantic models for model parameters, run configuration and results.

``RunConfig`` lives in ``app.models.requests``; it depends on the core
modules and is not re-exported here.
"""

from .params import BlackScholesParams, CEVParams, Exchange2DParams
from .responses import ExperimentRow, PriceReport

__all__ = [
    "BlackScholesParams", "CEVParams", "Exchange2DParams",
    "PriceReport", "ExperimentRow"
]
