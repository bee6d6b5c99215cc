import numpy as np
import pytest

from bgfield.background import QuarticKernel
from bgfield.critical import (CriticalSetup, critical_conjugation_gap, critical_field, critical_map, next_ops,
                              verify_resolvent_identity)
from bgfield.field import Field
from bgfield.lattice import ConfigError
from bgfield.operator import model_operators

from conftest import SMALL, SMALL2

V = QuarticKernel.on_site(0.01)


@pytest.fixture(scope="module")
def setup():
    return CriticalSetup(model_operators(SMALL2, 1), 0.01)


def test_constant_eigenvalue(setup):
    an, mu = setup.ops.an, setup.mu
    assert setup.constant_eigenvalue() == pytest.approx(-an * mu / (an - mu), rel=1e-10)
    one = np.ones(setup.unit.size)
    assert np.allclose(setup.Delta @ one, setup.constant_eigenvalue())


@pytest.mark.parametrize("starred", [False, True])
def test_resolvent_identity(setup, starred):
    assert verify_resolvent_identity(setup.ops, setup.mu, starred, setup=setup) < 1e-12


def test_identity_needs_n_at_least_one():
    with pytest.raises(ConfigError):
        verify_resolvent_identity(model_operators(SMALL, 0))


def test_route_gap_and_constant_linear_coefficient(setup):
    ops1 = next_ops(setup.ops)
    c = 0.3
    psi = Field.constant(ops1.unit, c)
    cf = critical_field(psi, psi, setup.mu, QuarticKernel.on_site(0.0), setup)
    w = setup.weight
    expect = c * w / (w + setup.constant_eigenvalue())
    assert np.max(np.abs(cf.lin.values - expect)) < 1e-12
    assert cf.higher.sup() < 1e-14
    psi_s, psi = Field.random(ops1.unit, 1, 0, scale=0.5), Field.random(ops1.unit, 1, 1, scale=0.5)
    cf = critical_field(psi_s, psi, setup.mu, V, setup)
    assert cf.route_gap < 1e-12
    assert cf.higher.sup() > 0


def test_critical_map_matches_field(setup):
    ops1 = next_ops(setup.ops)
    psi_s, psi = Field.random(ops1.unit, 2, 0, scale=0.5), Field.random(ops1.unit, 2, 1, scale=0.5)
    cf = critical_field(psi_s, psi, setup.mu, V, setup)
    out = critical_map(setup, setup.mu, V)([psi_s.values[:, None], psi.values[:, None]])
    assert np.max(np.abs(out[0][:, 0] - cf.hat_s.values)) < 1e-12
    assert np.max(np.abs(out[1][:, 0] - cf.hat.values)) < 1e-12
    hi = critical_map(setup, setup.mu, V, part="higher")([psi_s.values[:, None], psi.values[:, None]])
    assert np.max(np.abs(hi[1][:, 0] - cf.higher.values)) < 1e-12


def test_conjugation_gap_constant(setup):
    theta = Field.constant(setup.coarse, 0.4 + 0.1j)
    gap, direct = critical_conjugation_gap(theta, setup.mu, V, setup, details=True)
    assert gap < 1e-13 and direct < 1e-13


def test_n0_is_background():
    ops0 = model_operators(SMALL, 0)
    psi = Field.random(next_ops(ops0).unit, 3, scale=0.5)
    cf = critical_field(psi.conj(), psi, 0.01, V, ops0)
    assert cf.route_gap == 0.0
    assert (cf.hat - cf.background.phi).sup() == 0.0


def test_theta_lattice_checked(setup):
    with pytest.raises(ValueError):
        critical_conjugation_gap(Field.zeros(setup.unit), setup.mu, V, setup)
