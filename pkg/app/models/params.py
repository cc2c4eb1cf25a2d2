"""
Pydantic parameter models for the diffusion models.
"""
from pydantic import BaseModel, ConfigDict, Field


class BlackScholesParams(BaseModel):
    """Parameters of the Black-Scholes model.

    Attributes:
        mu: Drift rate of the Euler form
        sigma: Volatility
        r: Interest rate (drift of the exact form)
    """
    model_config = ConfigDict(frozen=True)

    mu: float = 0.0
    sigma: float = Field(gt=0)
    r: float = 0.0


class CEVParams(BaseModel):
    """Parameters of the CEV model dX = mu X dt + vartheta X^delta dW.

    Attributes:
        mu: Drift rate
        vartheta: Volatility scale
        delta_exponent: Elasticity, strictly between 0 and 1
    """
    model_config = ConfigDict(frozen=True)

    mu: float = 0.0
    vartheta: float = Field(gt=0)
    delta_exponent: float = Field(gt=0, lt=1)


class Exchange2DParams(BaseModel):
    """Parameters of the correlated two-asset Black-Scholes model.

    Attributes:
        r: Interest rate
        sigma: Common volatility
        rho: Correlation of the two Brownian drivers
        lambda_dividend: Geometric dividend rate of the first asset
    """
    model_config = ConfigDict(frozen=True)

    r: float = 0.0
    sigma: float = Field(gt=0)
    rho: float = Field(ge=-1, le=1)
    lambda_dividend: float = 0.0
