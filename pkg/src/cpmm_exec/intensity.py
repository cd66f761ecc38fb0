"""Spread-driven arrival rates of spot ticks and pool swaps.

Every rate is a baseline times a logistic of a Legendre expansion in the
spread delta = r_y / r_x - S.  The two rates of each venue share a baseline:
kappa_plus + kappa_minus = A_kappa and lambda_x + lambda_y = A_lambda.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from scipy.special import expit

from .basis import BasisSpec, basis_expansion


@dataclass(frozen=True)
class IntensityParams:
    A_kappa: float
    A_lambda: float
    kappa_basis: BasisSpec
    lambda_basis: BasisSpec

    def __post_init__(self):
        if not (self.A_kappa > 0 and self.A_lambda > 0):
            raise ValueError("baseline rates must be positive")

    def zeroed(self) -> "IntensityParams":
        """Same baselines, flat (coefficient-free) spread dependence."""
        return replace(self, kappa_basis=self.kappa_basis.zeroed(), lambda_basis=self.lambda_basis.zeroed())


# Centralised-exchange trade curve (b_i) and pool swap curve (a_i), ETH-USDC, Sep 2022.
PAPER_SEP2022 = IntensityParams(
    A_kappa=0.0833,
    A_lambda=0.4166,
    kappa_basis=BasisSpec((0.0190, 0.2065, -0.0944, 0.0268, -0.0586), shift=-0.0377, scale=2.5800),
    lambda_basis=BasisSpec((0.1154, -3.3510, 0.0010, 0.1123, -0.0717), shift=0.0153, scale=1.7635),
)

PRESETS = {"paper-sep2022": PAPER_SEP2022}


def kappa_plus(params: IntensityParams, delta):
    # expit saturates to exactly 0 or 1 instead of overflowing
    return params.A_kappa * expit(basis_expansion(params.kappa_basis, delta))


def kappa_minus(params: IntensityParams, delta):
    return params.A_kappa - kappa_plus(params, delta)


def lambda_x(params: IntensityParams, delta):
    """Rate of the pool swap side whose probability the a_i curve describes."""
    return params.A_lambda * expit(basis_expansion(params.lambda_basis, delta))


def lambda_y(params: IntensityParams, delta):
    return params.A_lambda - lambda_x(params, delta)
