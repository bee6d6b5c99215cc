"""Variations of the background field in psi and in (mu, V).

delta_phi solves, for given fields phi_(*) on X_n and a source variation dpsi_(*),

    dphi_* = S^* Q^* fQ^T dpsi_* + mu S^* dphi_* - S^* [V'_*(phi_* + dphi_*, phi + dphi, phi_* + dphi_*) - V'_*(phi_*, phi, phi_*)]
    dphi   = S Q^* fQ dpsi     + mu S dphi     - S [V'(phi + dphi, phi_* + dphi_*, phi + dphi) - V'(phi, phi_*, phi)]

with S = S_n(0).  delta_phi_mu_V solves the analogous system for
Dphi = phi(mu + dmu, V + dV) - phi(mu, V) with St = S_n(mu + dmu).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .background import (BackgroundSolution, QuarticKernel, _cubic_problem, _commutator_T, _sources,
                         derivative_field, solve_background)
from .critical import CriticalSetup, next_ops
from .field import Field, forward_diff
from .fixedpoint import FixedPointProblem, SolveCertificate, linear_part, solve
from .lattice import pullback_dilation, scale_field
from .operator import ModelOperators, ProductOp

log = logging.getLogger(__name__)


class SquareRootError(RuntimeError):
    """The fluctuation covariance has no principal square root."""


@dataclass
class VariationResult:
    """Variation fields with their linear-in-source part and the solve data."""

    d_s: Field
    d: Field
    lin_s: Field
    lin: Field
    certificate: SolveCertificate | None
    residual: float
    kind: str
    info: dict = field(default_factory=dict, repr=False)

    @property
    def plus_s(self) -> Field:
        return self.d_s - self.lin_s

    @property
    def plus(self) -> Field:
        return self.d - self.lin

    def to_dict(self) -> dict:
        return {"kind": self.kind, "residual": self.residual,
                "sup_d_s": self.d_s.sup(), "sup_d": self.d.sup(),
                "sup_plus_s": self.plus_s.sup(), "sup_plus": self.plus.sup(),
                "certificate": self.certificate.to_dict() if self.certificate else None}


# variation in psi

def _dv_residual(lat, V, ps, p, ds, d, rhs_s, rhs, mu, S):
    full_s = V.grad_values(lat, ps + ds, p + d, ps + ds, True) - V.grad_values(lat, ps, p, ps, True)
    full = V.grad_values(lat, p + d, ps + ds, p + d) - V.grad_values(lat, p, ps, p)
    r_s = S.apply_system(ds[:, None], True)[:, 0] - rhs_s - mu * ds + full_s
    r = S.apply_system(d[:, None])[:, 0] - rhs - mu * d + full
    return float(max(np.max(np.abs(r_s)), np.max(np.abs(r))))


def delta_phi(phi_s: Field, phi: Field, dpsi_s: Field, dpsi: Field, mu: float, V: QuarticKernel,
              ops: ModelOperators, tol: float = 1e-12, check: bool = True, contraction: float = 0.5,
              max_iter: int = 200) -> VariationResult:
    """Solve the dphi system by the substitution dphi_(*) = S^(*) gamma_(*).

    gamma = f + L(gamma) + B(gamma) with f = Q^* fQ^(T) dpsi_(*),
    L = mu S gamma minus the part of the V' difference linear in S gamma, and B the rest.
    The linear part reported is S_n(0)^(*) Q^* fQ^(T) dpsi_(*).
    """
    lat = ops.fine
    if phi.lattice != lat or phi_s.lattice != lat:
        raise ValueError(f"phi fields must live on {lat}")
    S = ops.resolvent(0.0)
    f_s, f = _sources(ops, dpsi_s, dpsi)
    lin_s, lin = S.rmatvec(f_s), S.matvec(f)
    mu = float(mu)
    if V.is_zero and mu == 0:
        return VariationResult(Field(lat, lin_s), Field(lat, lin), Field(lat, lin_s), Field(lat, lin), None, 0.0,
                               "delta_phi")
    if not np.any(f_s) and not np.any(f):
        z = Field.zeros(lat)
        return VariationResult(z, z, z, z, None, 0.0, "delta_phi")
    extra = (lambda ds, d: (mu * ds, mu * d))
    prob = _cubic_problem(lat, V, phi_s.values, phi.values, S.rmatvec, S.matvec, [f_s, f],
                          lin_extra=extra, contraction=contraction)
    g, cert = solve(prob, tol=tol, check=check, max_iter=max_iter)
    ds, d = S.rmatvec(g[0]), S.matvec(g[1])
    res = _dv_residual(lat, V, phi_s.values, phi.values, ds, d, f_s, f, mu, S)
    return VariationResult(Field(lat, ds), Field(lat, d), Field(lat, lin_s), Field(lat, lin), cert, res,
                           "delta_phi", {"problem": prob, "phi_s": phi_s, "phi": phi, "mu": mu, "V": V, "ops": ops})


def delta_phi_decompose(res: VariationResult, tol: float = 1e-13):
    """(linear part, dphi^(+), dphi^(>=2)) as pairs of Fields (starred first).

    dphi^(>=2) is dphi minus its degree-one part in dpsi, obtained by solving
    the system with B dropped (L does not depend on dpsi, so that solution is
    exactly the degree-one part).
    """
    lat = res.d.lattice
    lin = (res.lin_s, res.lin)
    plus = (res.plus_s, res.plus)
    prob = res.info.get("problem")
    if prob is None:
        z = Field.zeros(lat)
        return lin, plus, (z, z)
    S = res.info["ops"].resolvent(0.0)
    g1, _ = linear_part(prob, tol=tol, check=False)
    one_s, one = S.rmatvec(g1[0]), S.matvec(g1[1])
    return lin, plus, (res.d_s - one_s, res.d - one)


def delta_phi_third_order(phi_s: Field, phi: Field, dpsi_s: Field, dpsi: Field, mu: float, V: QuarticKernel,
                          ops: ModelOperators):
    """Lambda = S(mu) Q^* fQ dpsi and the explicit term -S(mu)[V'(phi + Lambda) - V'(phi)].

    dphi - Lambda - (this term) is of order at least five in (phi, dpsi) jointly.
    """
    lat = ops.fine
    S = ops.resolvent(mu)
    f_s, f = _sources(ops, dpsi_s, dpsi)
    Ls, L = S.rmatvec(f_s), S.matvec(f)
    ps, p = phi_s.values, phi.values
    ts = -S.rmatvec(V.grad_values(lat, ps + Ls, p + L, ps + Ls, True) - V.grad_values(lat, ps, p, ps, True))
    t = -S.matvec(V.grad_values(lat, p + L, ps + Ls, p + L) - V.grad_values(lat, p, ps, p))
    return (Field(lat, Ls), Field(lat, L)), (Field(lat, ts), Field(lat, t))


# fluctuation fields

class FluctuationSetup:
    """C^(n)(mu) and its principal square root D^(n) on X_0^(n).

    C is not symmetric when D_n is not (the forward time difference), so
    ``symmetry_gap`` reports sup |D - D^T| rather than asserting it vanishes.
    ``positive`` records whether every eigenvalue of C lies in the open right
    half plane (required for the principal root) and ``sym_min_eig`` the least
    eigenvalue of the symmetric part.
    """

    def __init__(self, ops: ModelOperators, mu: float = 0.0, check_tol: float = 1e-9):
        self.ops = ops
        self.critical = CriticalSetup(ops, mu)
        C = self.critical.C
        ev = np.linalg.eigvals(C)
        self.min_real_eig = float(np.min(ev.real))
        self.sym_min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (C + C.T))))
        self.positive = self.min_real_eig > 0
        if not self.positive:
            raise SquareRootError(f"covariance has an eigenvalue with real part {self.min_real_eig:.3e} <= 0")
        D = sla.sqrtm(C)
        if np.max(np.abs(D.imag)) < 1e-12 * np.max(np.abs(D.real)):
            D = D.real
        self.D = D
        self.sqrt_residual = float(np.max(np.abs(D @ D - C)))
        if self.sqrt_residual > check_tol * max(1.0, float(np.max(np.abs(C)))):
            raise SquareRootError(f"square root residual {self.sqrt_residual:.2e}")
        self.symmetry_gap = float(np.max(np.abs(D - D.T)))
        self.C_symmetry_gap = float(np.max(np.abs(C - C.T)))

    @property
    def unit(self):
        return self.ops.unit

    def apply_D(self, x, starred: bool = False):
        return (self.D.T if starred else self.D) @ x

    def to_dict(self) -> dict:
        return {"sqrt_residual": self.sqrt_residual, "symmetry_gap": self.symmetry_gap,
                "C_symmetry_gap": self.C_symmetry_gap, "min_real_eig": self.min_real_eig,
                "sym_min_eig": self.sym_min_eig, "positive": self.positive}


def delta_phi_hat(psi_s: Field, psi: Field, z_s: Field, z: Field, mu: float, V: QuarticKernel,
                  fl: FluctuationSetup, route: str = "direct", tol: float = 1e-12,
                  check: bool = True) -> VariationResult:
    """dphi_hat_(*)n+1(psi_*, psi, z_*, z) on X_{n+1}.

    psi_(*) live on X_0^(n+1) and z_(*) on X_1^(n).  The background at step n+1
    is phi_(*)n+1(psi_*, psi, L^2 mu, S V); its image under S^{-1} is the field
    on X_n at which the dphi system is solved.

    ``route="direct"``: dpsi = D^(n)(*) L_* z, result S[dphi].
    ``route="scaled"``: dPsi = L^{d/2} S D^(n)(*) S^{-1} z, dpsi = S^{-1} dPsi,
    result L^{d/2} L_*^{-1}[dphi].  The two routes agree identically.

    The linear part is L^{d/2} S S_n(0)^(*) Q^* fQ D^(n)(*) S^{-1} z_(*).
    """
    ops = fl.ops
    L = ops.params.L
    c = float(L) ** ops.params.scaling_power
    ops1 = next_ops(ops)
    if psi.lattice != ops1.unit or psi_s.lattice != ops1.unit:
        raise ValueError(f"psi fields must live on {ops1.unit}")
    sol = solve_background(psi_s, psi, L**2 * mu, V.scaled(ops1.fine), ops1, tol=tol, check=check)
    ph_s, ph = scale_field(sol.phi_s, "coarser"), scale_field(sol.phi, "coarser")
    unit = ops.unit

    def dpsi_of(zf, starred):
        if route == "direct":
            return Field(unit, fl.apply_D(pullback_dilation(zf).values, starred))
        if route == "scaled":
            inner = Field(unit, fl.apply_D(scale_field(zf, "coarser").values, starred))
            big = c * scale_field(inner, "finer")
            return scale_field(big, "coarser")
        raise ValueError(f"unknown route {route!r}")

    ds, d = dpsi_of(z_s, True), dpsi_of(z, False)
    res = delta_phi(ph_s, ph, ds, d, mu, V, ops, tol=tol, check=check)
    if route == "direct":
        up = lambda f: scale_field(f, "finer")
    else:
        up = lambda f: c * pullback_dilation(f, inverse=True)
    lin_s, lin = up(res.lin_s), up(res.lin)
    info = {"inner": res, "background": sol}
    return VariationResult(up(res.d_s), up(res.d), lin_s, lin, res.certificate, res.residual, "delta_phi_hat", info)


def delta_phi_hat_higher(psi_s: Field, psi: Field, z_s: Field, z: Field, mu: float, V: QuarticKernel,
                         fl: FluctuationSetup, tol: float = 1e-12, check: bool = True):
    """dphi_hat^(ho)_(*): dphi_hat^(+) minus its explicit degree-one and degree-three pieces.

    With phi_(*) = S^{-1} S_{n+1}(L^2 mu)^(*) Q^* fQ psi_(*) (the linear background) and
    Lambda_(*) = S_n(mu)^(*) Q^* fQ dpsi_(*), dpsi = D^(n) L_* z, this is

        S [ dphi - Lambda + S_n(mu) (V'(phi + Lambda) - V'(phi)) ]

    and is of degree at least five in (psi_(*), z_(*)) jointly.
    """
    full = delta_phi_hat(psi_s, psi, z_s, z, mu, V, fl, tol=tol, check=check)
    inner, sol = full.info["inner"], full.info["background"]
    ph_s, ph = scale_field(sol.lin_s, "coarser"), scale_field(sol.lin, "coarser")
    unit = fl.ops.unit
    ds = Field(unit, fl.apply_D(pullback_dilation(z_s).values, True))
    d = Field(unit, fl.apply_D(pullback_dilation(z).values, False))
    (Ls, L), (ts, t) = delta_phi_third_order(ph_s, ph, ds, d, mu, V, fl.ops)
    return scale_field(inner.d_s - Ls - ts, "finer"), scale_field(inner.d - L - t, "finer")


def delta_phi_hat_linear(z_s: Field, z: Field, fl: FluctuationSetup):
    """L^{d/2} S S_n(0)^(*) Q^* fQ D^(n)(*) S^{-1} z_(*), evaluated from its own display."""
    ops = fl.ops
    c = float(ops.params.L) ** ops.params.scaling_power
    S = ops.resolvent(0.0)
    fine = ops.fine
    out = []
    for zf, starred in ((z_s, True), (z, False)):
        x = fl.apply_D(scale_field(zf, "coarser").values, starred)
        if starred:
            y = S.rmatvec(ProductOp(ops.Qn_adj, ops.fq.T).matvec(x))
        else:
            y = S.matvec(ops.QadjF.matvec(x))
        out.append(c * scale_field(Field(fine, y), "finer"))
    return tuple(out)


# variation in (mu, V)

def _dV_nu(V, lat, a_s, a, as_nu, a_nu, nu, starred):
    """d_nu of V'(a, a_s, a) (or V'_*(a_s, a, a_s)) given the derivative fields, by the product rule."""
    T = lambda x: np.roll(x.reshape(lat.shape), -1, axis=nu).ravel()
    if starred:
        return (V.grad_values(lat, as_nu, T(a), T(a_s), True) + V.grad_values(lat, a_s, a_nu, T(a_s), True)
                + V.grad_values(lat, a_s, a, as_nu, True))
    return (V.grad_values(lat, a_nu, T(a_s), T(a)) + V.grad_values(lat, a, as_nu, T(a))
            + V.grad_values(lat, a, a_s, a_nu))


def delta_phi_mu_V(psi_s: Field, psi: Field, mu: float, dmu: float, V: QuarticKernel, dV: QuarticKernel,
                   ops: ModelOperators, tol: float = 1e-12, check: bool = True, contraction: float = 0.5,
                   base: BackgroundSolution | None = None) -> VariationResult:
    """Dphi_(*) = phi_(*)(mu + dmu, V + dV) - phi_(*)(mu, V) from its own fixed-point system.

    With St = S_n(mu + dmu) and Dphi = St gamma,

        gamma = dmu phi - dV'(phi, phi_*, phi) - [(V + dV)'(phi + Dphi, ...) - (V + dV)'(phi, ...)]

    (and the starred analogue).  The linear part reported is dmu St phi_(*),
    which equals dmu S_n [1 - (mu + dmu) S_n]^{-1} phi_(*).
    """
    lat = ops.fine
    sol = base if base is not None else solve_background(psi_s, psi, mu, V, ops, tol=tol, check=check)
    St = ops.resolvent(mu + dmu)
    ps, p = sol.phi_s.values, sol.phi.values
    lin_s, lin = dmu * St.rmatvec(ps), dmu * St.matvec(p)
    f = [dmu * ps - dV.grad_values(lat, ps, p, ps, True), dmu * p - dV.grad_values(lat, p, ps, p)]
    Vt = V + dV
    info = {"base": sol, "mu": mu, "dmu": dmu, "V": V, "dV": dV, "ops": ops, "problem": None}
    if not np.any(f[0]) and not np.any(f[1]):
        z = Field.zeros(lat)
        return VariationResult(z, z, z, z, None, 0.0, "delta_phi_mu_V", info)
    if Vt.is_zero:
        g, cert = f, None
    else:
        prob = _cubic_problem(lat, Vt, ps, p, St.rmatvec, St.matvec, f, contraction=contraction)
        info["problem"] = prob
        g, cert = solve(prob, tol=tol, check=check)
    Ds, D = St.rmatvec(g[0]), St.matvec(g[1])
    # residual of the full equations at (mu + dmu, V + dV)
    al_s, al = _sources(ops, psi_s, psi)
    Ps, P = ps + Ds, p + D
    r_s = St.apply_system(Ps[:, None], True)[:, 0] + Vt.grad_values(lat, Ps, P, Ps, True) - al_s
    r = St.apply_system(P[:, None])[:, 0] + Vt.grad_values(lat, P, Ps, P) - al
    res = float(max(np.max(np.abs(r_s)), np.max(np.abs(r))))
    return VariationResult(Field(lat, Ds), Field(lat, D), Field(lat, lin_s), Field(lat, lin), cert, res,
                           "delta_phi_mu_V", info)


def resolvent_series_linear(phi: Field, mu: float, dmu: float, ops: ModelOperators, starred: bool = False,
                            tol: float = 1e-14, max_iter: int = 500) -> Field:
    """dmu S_n [1 - (mu + dmu) S_n]^{-1} phi with S_n = S_n(0), by the Neumann series.

    Independent of the resolvent at mu + dmu; converges when |mu + dmu| ||S_n|| < 1.
    """
    S = ops.resolvent(0.0)
    app = S.rmatvec if starred else S.matvec
    c = mu + dmu
    term = phi.values.astype(complex)
    acc = term.copy()
    for _ in range(max_iter):
        term = c * app(term)
        acc = acc + term
        if np.max(np.abs(term)) < tol * max(1.0, np.max(np.abs(acc))):
            break
    else:
        raise RuntimeError("Neumann series did not converge")
    return Field(phi.lattice, dmu * app(acc))


def delta_phi_mu_V_derivative(res: VariationResult, nu: int, tol: float = 1e-13):
    """d_nu Dphi_(*) from the differentiated system; returns (solved_s, solved, direct gap).

    With Phi = phi + Dphi, Vt = V + dV, K_nu = [d_nu, W] and derivative fields
    phi_nu from the differentiated background equations,

        St^{-1} Dphi_nu = -K_nu Dphi + dmu phi_nu - dV'_nu(phi; phi_nu)
                          - Vt'_nu(Phi; phi_nu + Dphi_nu) + Vt'_nu(phi; phi_nu)

    where X'_nu(a; a_nu) is the product-rule derivative of X'(a, a_*, a).
    """
    info = res.info
    sol, ops, V, dV, dmu, mu = info["base"], info["ops"], info["V"], info["dV"], info["dmu"], info["mu"]
    lat = ops.fine
    St = ops.resolvent(mu + dmu)
    Vt = V + dV
    dr = derivative_field(sol, nu, tol=tol)
    ps, p = sol.phi_s.values, sol.phi.values
    pns, pn = dr.solved_s.values, dr.solved.values
    Ds, D = res.d_s.values, res.d.values
    Ps, P = ps + Ds, p + D
    K, Kt = ops.commutator(nu), _commutator_T(ops, nu)
    src_s = (-Kt.matvec(Ds) + dmu * pns - _dV_nu(dV, lat, ps, p, pns, pn, nu, True)
             - _dV_nu(Vt, lat, Ps, P, pns, pn, nu, True) + _dV_nu(Vt, lat, ps, p, pns, pn, nu, True))
    src = (-K.matvec(D) + dmu * pn - _dV_nu(dV, lat, ps, p, pns, pn, nu, False)
           - _dV_nu(Vt, lat, Ps, P, pns, pn, nu, False) + _dV_nu(Vt, lat, ps, p, pns, pn, nu, False))
    zero = np.zeros(lat.size)

    def Lmap(g):
        gs, gu = g
        ls = _dV_nu(Vt, lat, Ps, P, gs, zero, nu, True) + _dV_nu(Vt, lat, Ps, P, zero, gu, nu, True)
        lu = _dV_nu(Vt, lat, Ps, P, gs, zero, nu, False) + _dV_nu(Vt, lat, Ps, P, zero, gu, nu, False)
        return [-St.rmatvec(ls), -St.matvec(lu)]

    f = [St.rmatvec(src_s), St.matvec(src)]
    scale = max(1.0, max(float(np.max(np.abs(x))) for x in f))
    if Vt.is_zero:
        g = f
    else:
        prob = FixedPointProblem(f, Lmap, lambda g: [np.zeros_like(x) for x in g], d_max=3)
        g, _ = linear_part(prob, tol=tol * scale)
    direct_s, direct = forward_diff(res.d_s, nu).values, forward_diff(res.d, nu).values
    gap = float(max(np.max(np.abs(g[0] - direct_s)), np.max(np.abs(g[1] - direct))))
    return Field(lat, g[0]), Field(lat, g[1]), gap
