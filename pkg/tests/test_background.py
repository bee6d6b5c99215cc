import numpy as np
import pytest
from hypothesis import given, strategies as st

from bgfield.background import (QuarticKernel, action_gradient, background_map, background_residual,
                                derivative_field, dn_image, local_expansion, solve_background)
from bgfield.field import Field, inner_product
from bgfield.operator import ProductOp



def _cubic(an, mu, rv, psi):
    roots = np.roots([rv, 0.0, an - mu, -an * psi])
    real = roots[np.abs(roots.imag) < 1e-9].real
    lin = an * psi / (an - mu)
    return float(real[np.argmin(np.abs(real - lin))])


@pytest.mark.parametrize("mu,rv,psi", [(0.0, 0.01, 0.5), (0.03, 0.005, 0.3), (0.01, 0.02, -0.4)])
def test_constant_oracle(small1, mu, rv, psi):
    c = Field.constant(small1.unit, psi)
    sol = solve_background(c, c, mu, QuarticKernel.on_site(rv), small1)
    x = _cubic(small1.an, mu, rv, psi)
    assert np.max(np.abs(sol.phi.values - x)) < 1e-12
    assert np.max(np.abs(sol.phi_s.values - x)) < 1e-12
    assert sol.certificate.ok


def test_linear_case(small1):
    psi_s, psi = Field.random(small1.unit, 1), Field.random(small1.unit, 2)
    sol = solve_background(psi_s, psi, 0.02, QuarticKernel.on_site(0.0), small1)
    S = small1.resolvent(0.02)
    assert sol.certificate is None
    assert np.allclose(sol.phi.values, S.matvec(small1.QadjF.matvec(psi.values)))
    assert sol.higher.sup() == 0.0


@given(st.integers(0, 1000))
def test_oddness(small1, seed):
    V = QuarticKernel.on_site(0.01)
    psi_s, psi = Field.random(small1.unit, seed, 0, scale=0.5), Field.random(small1.unit, seed, 1, scale=0.5)
    a = solve_background(psi_s, psi, 0.01, V, small1)
    b = solve_background(-psi_s, -psi, 0.01, V, small1)
    assert (a.phi + b.phi).sup() < 1e-13 and (a.phi_s + b.phi_s).sup() < 1e-13


def test_residual_and_local_expansion(small1):
    V = QuarticKernel.on_site(0.01)
    psi = Field.random(small1.unit, 4, scale=0.5)
    sol = solve_background(psi.conj(), psi, 0.01, V, small1)
    assert max(background_residual(sol)) < 1e-12
    _, _, c = local_expansion(sol)
    assert c == pytest.approx(small1.an / (small1.an - 0.01))
    const = Field.constant(small1.unit, 0.3)
    sol0 = solve_background(const, const, 0.01, QuarticKernel.on_site(0.0), small1)
    rs, r, _ = local_expansion(sol0)
    assert max(rs.sup(), r.sup()) < 1e-12


def test_dn_image(small1):
    psi = Field.random(small1.unit, 5, scale=0.5)
    sol = solve_background(psi, psi, 0.01, QuarticKernel.on_site(0.01), small1)
    _, _, gap = dn_image(sol)
    assert gap < 1e-10


@pytest.mark.parametrize("nu", [0, 1])
def test_derivative_routes(small1, nu):
    psi_s, psi = Field.random(small1.unit, 6, 0, scale=0.5), Field.random(small1.unit, 6, 1, scale=0.5)
    sol = solve_background(psi_s, psi, 0.01, QuarticKernel.on_site(0.01), small1)
    dr = derivative_field(sol, nu)
    scale = max(dr.direct.sup(), dr.direct_s.sup(), 1.0)
    assert dr.gap < 1e-10 * scale


def test_background_map_matches_solver(small1):
    V = QuarticKernel.on_site(0.01)
    psi_s, psi = Field.random(small1.unit, 7, 0, scale=0.5), Field.random(small1.unit, 7, 1, scale=0.5)
    sol = solve_background(psi_s, psi, 0.01, V, small1)
    out = background_map(small1, 0.01, V)([psi_s.values[:, None], psi.values[:, None]])
    assert np.max(np.abs(out[0][:, 0] - sol.phi_s.values)) < 1e-12
    assert np.max(np.abs(out[1][:, 0] - sol.phi.values)) < 1e-12


def test_pair_kernel_symmetry_and_gradients(small1):
    V = QuarticKernel.pair({(0, 1): 0.01, (1, 0): 0.004, (0,): 0.002})
    sub = lambda x, y: tuple(i - j for i, j in zip(x, y))
    neg = lambda x: tuple(-i for i in x)
    for (a, b, c), w in V.table.items():
        # u1 <-> u3 and u2 <-> u4
        assert V.table[(sub(a, b), neg(b), sub(c, b))] == pytest.approx(w)
        assert V.table[(c, b, a)] == pytest.approx(w)
    lat = small1.fine
    ps, p = Field.random(lat, 8, 0), Field.random(lat, 8, 1)
    hs, h = Field.random(lat, 9, 0), Field.random(lat, 9, 1)
    eps = 1e-5
    # directional derivatives of the energy against the gradients
    dd = (V.energy(ps + eps * hs, p) - V.energy(ps - eps * hs, p)) / (2 * eps)
    assert dd == pytest.approx(inner_product(hs, V.grad(p, ps, p)), rel=1e-8)
    dd = (V.energy(ps, p + eps * h) - V.energy(ps, p - eps * h)) / (2 * eps)
    assert dd == pytest.approx(inner_product(h, V.grad(ps, p, ps, starred=True)), rel=1e-8)


def test_kernel_roundtrip_and_arithmetic(small1):
    V = QuarticKernel.pair({(0, 1): 0.01})
    W = QuarticKernel.from_dict(V.to_dict())
    assert W.table == pytest.approx(V.table)
    assert QuarticKernel.from_dict({"r_v": 0.3}).r_v == pytest.approx(0.3)
    assert (V * 2).r_v == pytest.approx(2 * V.r_v)
    assert (V + V * -1.0).is_zero
    assert QuarticKernel.on_site(0.01).norm(small1.fine, 1.0) == pytest.approx(0.01)
    assert V.norm(small1.fine, 1.0) > V.norm(small1.fine, 0.0)


def test_action_gradient_vanishes_at_solution(small1):
    V = QuarticKernel.on_site(0.01)
    psi = Field.random(small1.unit, 10, scale=0.5)
    sol = solve_background(psi.conj(), psi, 0.01, V, small1)
    rs, r = action_gradient(sol.psi_s, sol.psi, sol.phi_s, sol.phi, 0.01, V, small1)
    src = ProductOp(small1.Qn_adj, small1.fq).matvec(psi.values)
    assert max(rs.sup(), r.sup()) < 1e-12 * max(1.0, np.max(np.abs(src)))
