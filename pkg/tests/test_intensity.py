import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpmm_exec.intensity import (
    PAPER_SEP2022,
    PRESETS,
    IntensityParams,
    kappa_minus,
    kappa_plus,
    lambda_x,
    lambda_y,
)

P = PAPER_SEP2022
FLAT = P.zeroed()


def test_table_values_shipped():
    assert PRESETS["paper-sep2022"] is P
    assert (P.A_kappa, P.A_lambda) == (0.0833, 0.4166)
    assert P.lambda_basis.coefficients == (0.1154, -3.3510, 0.0010, 0.1123, -0.0717)
    assert (P.lambda_basis.shift, P.lambda_basis.scale) == (0.0153, 1.7635)
    assert P.kappa_basis.coefficients == (0.0190, 0.2065, -0.0944, 0.0268, -0.0586)
    assert (P.kappa_basis.shift, P.kappa_basis.scale) == (-0.0377, 2.58)


@pytest.mark.parametrize("delta", [-3.0, 0.0, 0.4, 10.0])
def test_flat_basis_halves_baseline(delta):
    assert kappa_plus(FLAT, delta) == pytest.approx(P.A_kappa / 2)
    assert kappa_minus(FLAT, delta) == pytest.approx(P.A_kappa / 2)
    assert lambda_x(FLAT, delta) == pytest.approx(P.A_lambda / 2)
    assert lambda_y(FLAT, delta) == pytest.approx(P.A_lambda / 2)


# 40-digit reference values at zero spread
@pytest.mark.parametrize(
    "fn, expected",
    [
        (kappa_plus, 0.042520596065025858456),
        (kappa_minus, 0.040779403934974141544),
        (lambda_x, 0.21428682324880860494),
        (lambda_y, 0.20231317675119139506),
    ],
)
def test_rates_at_zero_spread(fn, expected):
    assert fn(P, 0.0) == pytest.approx(expected, rel=1e-13)


@given(st.floats(-50, 50))
def test_partition_identities(delta):
    assert kappa_plus(P, delta) + kappa_minus(P, delta) == pytest.approx(P.A_kappa, rel=1e-15)
    assert lambda_x(P, delta) + lambda_y(P, delta) == pytest.approx(P.A_lambda, rel=1e-15)


@given(st.floats(-1.75, 1.75))
def test_rates_strictly_inside_range(delta):
    for fn, A in ((kappa_plus, P.A_kappa), (kappa_minus, P.A_kappa), (lambda_x, P.A_lambda), (lambda_y, P.A_lambda)):
        assert 0 < fn(P, delta) < A


def test_lambda_x_decreasing_on_spread_range():
    g = np.linspace(-1.75, 1.75, 3501)
    assert np.all(np.diff(lambda_x(P, g)) < 0)


def test_saturation_without_overflow():
    spec = IntensityParams(1.0, 1.0, FLAT.kappa_basis.__class__((0.0, 1.0)), FLAT.lambda_basis)
    with np.errstate(all="raise"):
        assert kappa_plus(spec, 1e6) == 1.0
        assert kappa_plus(spec, -1e6) == 0.0
    assert kappa_plus(spec, 40.0) == pytest.approx(1.0)


def test_invalid_baselines():
    with pytest.raises(ValueError):
        IntensityParams(0.0, 1.0, P.kappa_basis, P.lambda_basis)
    with pytest.raises(ValueError):
        IntensityParams(1.0, -1.0, P.kappa_basis, P.lambda_basis)
