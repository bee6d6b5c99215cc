import numpy as np
import pytest

from bgfield.bounds import (_stability, fit_exponent, gamma_background, gamma_critical, gamma_delta_mu_V,
                            gamma_delta_psi, probe_threshold)


def test_fit_exponent_exact():
    x = np.array([0.1, 0.2, 0.4])
    assert fit_exponent(x, 3.0 * x**5) == pytest.approx(5.0)


def test_stability():
    assert _stability([1.0, 1.1, 0.9])["stable"]
    assert not _stability([1.0, 2.0])["stable"]


def test_background_numerators_vanish_with_V():
    small = gamma_background(rvs=(1e-7,), wfs=(1.0,))["rows"][0]
    big = gamma_background(rvs=(1e-3,), wfs=(1.0,))["rows"][0]
    assert small["norm_higher"] < 1e-3 * big["norm_higher"]
    # the linear part does not depend on V
    assert small["norm_linear"] == pytest.approx(big["norm_linear"], rel=1e-6)
    assert set(big) >= {"ratio_higher", "ratio_phi", "ratio_linear"}


def test_other_maps_report_schema():
    dp = gamma_delta_psi(rvs=(1e-3,), wfs=(1.0,))
    assert set(dp) == {"rows", "gamma_4_plus", "gamma_4_ge2", "truncation"}
    dm = gamma_delta_mu_V(rvs=(1e-3,), wfs=(1.0,))
    assert dm["rows"][0]["ratio"] > 0 and "gamma_5" in dm
    cr = gamma_critical(rvs=(1e-3,), wfs=(1.0,))
    assert cr["rows"][0]["ratio"] > 0 and set(cr["gamma_6"]) == {"mean", "max_rel_dev", "stable"}


def test_probe_threshold():
    th = probe_threshold(rvs=np.geomspace(1e-3, 10.0, 5))
    assert th["rho_hat_1"] is not None and 0 < th["rho_hat_1"] < 10
