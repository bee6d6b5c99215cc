import numpy as np
import pytest

from bgfield.background import QuarticKernel, solve_background
from bgfield.bounds import fit_exponent
from bgfield.critical import next_ops
from bgfield.field import Field
from bgfield.lattice import scaled_lattice
from bgfield.operator import model_operators
from bgfield.variation import (FluctuationSetup, delta_phi, delta_phi_decompose, delta_phi_hat, delta_phi_hat_higher,
                               delta_phi_hat_linear, delta_phi_mu_V, resolvent_series_linear)

from conftest import SMALL2

V = QuarticKernel.on_site(0.01)
MU = 0.01


@pytest.fixture(scope="module")
def fl():
    return FluctuationSetup(model_operators(SMALL2, 1), 0.0)


def _pair(lat, seed, scale=0.5):
    return Field.random(lat, seed, 0, scale=scale), Field.random(lat, seed, 1, scale=scale)


def test_delta_phi_is_difference(small1):
    psi_s, psi = _pair(small1.unit, 1)
    dps, dp = _pair(small1.unit, 2, 0.05)
    base = solve_background(psi_s, psi, MU, V, small1)
    new = solve_background(psi_s + dps, psi + dp, MU, V, small1)
    res = delta_phi(base.phi_s, base.phi, dps, dp, MU, V, small1)
    assert (res.d - (new.phi - base.phi)).sup() < 1e-12
    assert (res.d_s - (new.phi_s - base.phi_s)).sup() < 1e-12
    assert res.residual < 1e-12
    lin, plus, ge2 = delta_phi_decompose(res)
    assert (lin[1] + plus[1] - res.d).sup() < 1e-15
    # the degree >= 2 part is quadratic in dpsi
    half = delta_phi(base.phi_s, base.phi, 0.5 * dps, 0.5 * dp, MU, V, small1)
    ratio = delta_phi_decompose(half)[2][1].sup() / ge2[1].sup()
    assert 0.2 < ratio < 0.3


def test_delta_phi_trivial_cases(small1):
    psi_s, psi = _pair(small1.unit, 3)
    base = solve_background(psi_s, psi, MU, V, small1)
    z = Field.zeros(small1.unit)
    res = delta_phi(base.phi_s, base.phi, z, z, MU, V, small1)
    assert res.d.sup() == 0 and res.d_s.sup() == 0
    dps, dp = _pair(small1.unit, 4, 0.1)
    lin = delta_phi(base.phi_s, base.phi, dps, dp, 0.0, QuarticKernel.on_site(0.0), small1)
    assert lin.plus.sup() == 0 and lin.plus_s.sup() == 0


def test_delta_mu_V_is_difference_and_neumann(small1):
    psi_s, psi = _pair(small1.unit, 5)
    dV = V * 0.1
    res = delta_phi_mu_V(psi_s, psi, MU, 1e-3, V, dV, small1)
    a = solve_background(psi_s, psi, MU + 1e-3, V + dV, small1)
    b = solve_background(psi_s, psi, MU, V, small1)
    assert (res.d - (a.phi - b.phi)).sup() < 1e-12
    assert (res.d_s - (a.phi_s - b.phi_s)).sup() < 1e-12
    ser = resolvent_series_linear(b.phi, MU, 1e-3, small1)
    assert (ser - res.lin).sup() < 1e-12
    ser_s = resolvent_series_linear(b.phi_s, MU, 1e-3, small1, starred=True)
    assert (ser_s - res.lin_s).sup() < 1e-12
    zero = delta_phi_mu_V(psi_s, psi, MU, 0.0, V, V * 0.0, small1)
    assert zero.d.sup() == 0


def test_fluctuation_setup(fl):
    C = fl.critical.C
    assert np.max(np.abs(fl.D @ fl.D - C)) < 1e-9 * np.max(np.abs(C))
    assert fl.positive and fl.min_real_eig > 0
    d = fl.to_dict()
    assert set(d) >= {"sqrt_residual", "symmetry_gap", "positive"}


def test_delta_phi_hat_routes_and_linear(fl):
    ops1 = next_ops(fl.ops)
    zl = scaled_lattice(fl.ops.unit, "finer")
    psi_s, psi = _pair(ops1.unit, 6)
    z_s, z = _pair(zl, 7, 0.1)
    a = delta_phi_hat(psi_s, psi, z_s, z, MU, V, fl, route="direct")
    b = delta_phi_hat(psi_s, psi, z_s, z, MU, V, fl, route="scaled")
    assert (a.d - b.d).sup() < 1e-12 and (a.d_s - b.d_s).sup() < 1e-12
    ls, lu = delta_phi_hat_linear(z_s, z, fl)
    assert (ls - a.lin_s).sup() < 1e-12 and (lu - a.lin).sup() < 1e-12
    zero = delta_phi_hat(psi_s, psi, Field.zeros(zl), Field.zeros(zl), MU, V, fl)
    assert zero.d.sup() == 0


def test_delta_phi_hat_higher_order_five(fl):
    ops1 = next_ops(fl.ops)
    zl = scaled_lattice(fl.ops.unit, "finer")
    amps = (0.1, 0.2, 0.4)
    vals = []
    for t in amps:
        psi_s, psi = _pair(ops1.unit, 8, t)
        z_s, z = _pair(zl, 9, t)
        hs, h = delta_phi_hat_higher(psi_s, psi, z_s, z, MU, V, fl)
        vals.append(max(hs.sup(), h.sup()))
    assert abs(fit_exponent(amps, vals) - 5.0) < 0.1
