"""
Pydantic run configuration parsed from flat key=value files.
"""
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.diffusion_models import (EulerModel, ModelId, black_scholes_euler, black_scholes_exact,
                                       cev_euler, correlated_bs_2d)
from app.core.rbsde_solver import (BidAskDriver, CallPayoff, ExchangePayoff, PutPayoff, RBSDEProblem,
                                   american_problem, zero_driver)


class RunConfig(BaseModel):
    """Run configuration for tree building and pricing.

    Attributes:
        model: BlackScholesEuler, BlackScholesExact, CEVEuler or CorrelatedBS2D
        mu: Drift rate (Euler models)
        sigma: Volatility (Black-Scholes models)
        r: Lending / interest rate
        R: Borrowing rate of the bid-ask driver
        vartheta: CEV volatility scale
        delta_exp: CEV elasticity
        rho: Correlation (two-asset model)
        lambda_dividend: Dividend rate of the first asset, key ``lambda``
        x0: Starting value (first asset)
        x0_2: Starting value of the second asset
        T: Horizon in years
        n_steps: Number of time steps
        grid_size: Grid size at every step
        noise_grid_size: Innovation quantizer size (hrq)
        strike: Strike of call and put payoffs
        exchange_ratio: Exchange ratio of the exchange payoff
        payoff: call, put or exchange
        driver: bidask or zero
        obstacle: Reflect on the payoff when true
        transition_mode: exact, gapprox or mc (marginal trees)
        noise_moment_mode: mc or quadrature (marginal trees)
        quad_legendre: Legendre order
        quad_laguerre: Laguerre order
        mc_paths: Paths for Monte Carlo transitions
        mc_noise_paths: Paths for Monte Carlo noise moments
        seed: Seed of every stochastic component
        lloyd_tol: Quantizer tolerance
        lloyd_max_iter: Maximum quantizer iterations
        threads: Worker threads over the grid sizes of a convergence study
    """
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    model: Literal["BlackScholesEuler", "BlackScholesExact", "CEVEuler", "CorrelatedBS2D"]
    mu: float = 0.0
    sigma: Optional[float] = Field(default=None, gt=0)
    r: float = 0.0
    R: Optional[float] = None
    vartheta: Optional[float] = Field(default=None, gt=0)
    delta_exp: Optional[float] = Field(default=None, gt=0, lt=1)
    rho: float = Field(default=0.0, ge=-1, le=1)
    lambda_dividend: float = Field(default=0.0, alias="lambda")
    x0: float
    x0_2: Optional[float] = None
    T: float = Field(gt=0)
    n_steps: int = Field(ge=1)
    grid_size: int = Field(default=100, ge=1)
    noise_grid_size: Optional[int] = Field(default=None, ge=1)
    strike: Optional[float] = None
    exchange_ratio: float = 1.0
    payoff: Literal["call", "put", "exchange"] = "call"
    driver: Literal["bidask", "zero"] = "zero"
    obstacle: bool = True
    transition_mode: Optional[Literal["exact", "gapprox", "mc"]] = None
    noise_moment_mode: Literal["mc", "quadrature"] = "mc"
    quad_legendre: Optional[int] = Field(default=None, ge=1, le=256)
    quad_laguerre: Optional[int] = Field(default=None, ge=1, le=256)
    mc_paths: Optional[int] = Field(default=None, ge=1000)
    mc_noise_paths: Optional[int] = Field(default=None, ge=1000)
    seed: Optional[int] = None
    lloyd_tol: Optional[float] = Field(default=None, gt=0)
    lloyd_max_iter: Optional[int] = Field(default=None, ge=1)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_model_keys(self) -> "RunConfig":
        required = {
            "BlackScholesEuler": ["sigma"],
            "BlackScholesExact": ["sigma"],
            "CEVEuler": ["vartheta", "delta_exp"],
            "CorrelatedBS2D": ["sigma", "x0_2"],
        }[self.model]
        if self.payoff in ("call", "put"):
            required = required + ["strike"]
        if self.driver == "bidask":
            required = required + ["R"]
        missing = [key for key in required if getattr(self, key) is None]
        if missing:
            raise ValueError(f"missing required key(s) for model {self.model}: {', '.join(missing)}")
        if self.payoff == "exchange" and self.model != "CorrelatedBS2D":
            raise ValueError("payoff=exchange requires model CorrelatedBS2D")
        if self.driver == "bidask" and self.model == "CorrelatedBS2D":
            raise ValueError("driver=bidask requires a one-dimensional model")
        return self

    def build_model(self) -> EulerModel:
        """Instantiate the diffusion model."""
        model_id = ModelId(self.model)
        if model_id is ModelId.BLACK_SCHOLES_EULER:
            return black_scholes_euler(self.x0, self.T, self.n_steps, self.mu, self.sigma, self.r)
        if model_id is ModelId.BLACK_SCHOLES_EXACT:
            return black_scholes_exact(self.x0, self.T, self.n_steps, self.sigma, self.r)
        if model_id is ModelId.CEV_EULER:
            return cev_euler(self.x0, self.T, self.n_steps, self.mu, self.vartheta, self.delta_exp)
        return correlated_bs_2d([self.x0, self.x0_2], self.T, self.n_steps, self.r, self.sigma,
                                self.rho, self.lambda_dividend)

    def build_problem(self, model: EulerModel) -> RBSDEProblem:
        """Instantiate the reflected BSDE on the given model."""
        if self.payoff == "call":
            payoff = CallPayoff(self.strike)
        elif self.payoff == "put":
            payoff = PutPayoff(self.strike)
        else:
            payoff = ExchangePayoff(self.exchange_ratio, self.lambda_dividend)
        driver = BidAskDriver(model, self.r, self.R) if self.driver == "bidask" else zero_driver
        return american_problem(payoff, self.T, driver=driver, obstacle_enabled=self.obstacle)

    def build_options(self) -> Dict[str, Any]:
        """Keyword arguments of ``build_tree``."""
        return {
            "noise_grid_size": self.noise_grid_size,
            "transition_mode": self.transition_mode,
            "noise_moment_mode": self.noise_moment_mode,
            "seed": self.seed,
            "quad_legendre": self.quad_legendre,
            "quad_laguerre": self.quad_laguerre,
            "mc_paths": self.mc_paths,
            "mc_noise_paths": self.mc_noise_paths,
            "lloyd_tol": self.lloyd_tol,
            "lloyd_max_iter": self.lloyd_max_iter,
        }
