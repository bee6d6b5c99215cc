"""Fluctuation covariance, critical field maps and the covariance resolvent identity.

On the unit lattice X_0^(n), with the single-step average Q : X_0^(n) -> X_{-1}^(n+1),

    Delta(mu) = fQ_n - fQ_n Q_n S_n(mu) Q_n^* fQ_n      (n >= 1),   D_0 - mu  (n = 0)
    C(mu)     = (a/L^2 Q^* Q + Delta(mu))^{-1}
    A         = (a/L^2 Q^* Q + fQ_n)^{-1} fQ_n Q_n

The critical field is

    psi_n(theta) = (a/L^2 Q^*Q + fQ_n)^{-1} {a/L^2 Q^* theta + fQ_n Q_n S^{-1} phi_{n+1}(S theta, L^2 mu, S V)}
                 = a/L^2 C(mu) Q^* theta + A S^{-1} phi_{n+1}^(>=3)(S theta, L^2 mu, S V)

and psi_hat_n(psi) = S psi_n(S^{-1} psi), with S the scaling map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .background import BackgroundSolution, QuarticKernel, solve_background
from .field import Field
from .lattice import ConfigError, Lattice, make_lattice, scale_field
from .operator import ModelOperators, ProductOp, SingularOperatorError, averaging_Q, model_operators

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096


def next_ops(ops: ModelOperators) -> ModelOperators:
    """Operators at step n+1 with the same a, p and h0 (default fQ)."""
    if ops.n + 1 > ops.params.n_steps:
        raise ConfigError(f"step {ops.n + 1} exceeds the step budget {ops.params.n_steps}")
    return model_operators(ops.params, ops.n + 1, ops.a, ops.p, ops.h0)


def _grid_roll_columns(col0: np.ndarray, lat: Lattice) -> np.ndarray:
    """Dense matrix of a translation-invariant operator on ``lat`` from its first column."""
    g = col0.reshape(lat.shape)
    out = np.empty((lat.size, lat.size), dtype=col0.dtype)
    for i, q in enumerate(np.indices(lat.shape).reshape(4, -1).T):
        out[:, i] = np.roll(g, tuple(q), axis=(0, 1, 2, 3)).ravel()
    return out


def qsq_dense(ops: ModelOperators, mu: float, transpose: bool = False) -> np.ndarray:
    """Q_n S_n(mu) Q_n^* (or with S^T) as a dense matrix on X_0^(n).

    Uses translation invariance under unit-lattice shifts when a probe column
    confirms it, otherwise solves for every column.
    """
    S = ops.resolvent(mu)
    unit = ops.unit
    N = unit.size

    def cols(E):
        X = ops.Qn_adj.matvec(E)
        Y = S.rmatvec(X) if transpose else S.matvec(X)
        return ops.Qn.matvec(Y)

    probe = [0, N // 2] if N > 1 else [0]
    E = np.zeros((N, len(probe)))
    E[probe, range(len(probe))] = 1.0
    c = cols(E)
    M = _grid_roll_columns(c[:, 0], unit)
    if N > 1 and np.max(np.abs(M[:, probe[1]] - c[:, 1])) <= 1e-13 * max(1.0, np.max(np.abs(c))):
        return M
    return cols(np.eye(N))


class CriticalSetup:
    """Dense assembly of Delta(mu), C(mu) and A on X_0^(n).

    :param ops: operators at step n
    :param mu: mass parameter of the covariance
    """

    def __init__(self, ops: ModelOperators, mu: float = 0.0, cond_limit: float = 1e12):
        self.ops, self.mu, self.n = ops, float(mu), ops.n
        params = ops.params
        self.unit = ops.unit
        if self.unit.size > DENSE_LIMIT:
            raise ConfigError(f"dense covariance limited to {DENSE_LIMIT} unit points, got {self.unit.size}")
        self.coarse = make_lattice(params, -1, ops.n + 1)
        self.Q = averaging_Q(self.unit, self.coarse, ops.p)
        self.Qadj = self.Q.adjoint
        self.weight = ops.a / params.L**2
        Qd, Qa = self.Q.dense(), self.Qadj.dense()
        self.Qd, self.Qa = Qd, Qa
        self.QQ = Qa @ Qd
        N = self.unit.size
        if ops.n == 0:
            self.F = ops.fq.dense()
            self.Delta = ops.Dn.dense() - self.mu * np.eye(N)
        else:
            F = ops.fq.dense()
            self.F = F
            self.Delta = F - F @ qsq_dense(ops, self.mu) @ F
        Cinv = self.weight * self.QQ + self.Delta
        self.condition = float(np.linalg.cond(Cinv))
        if not np.isfinite(self.condition) or self.condition > cond_limit:
            raise SingularOperatorError(f"covariance inverse ill-conditioned (cond {self.condition:.2e})", mu=mu)
        self.C = np.linalg.inv(Cinv)
        self._G = sla.lu_factor(self.weight * self.QQ + self.F)
        self._Gt = sla.lu_factor((self.weight * self.QQ + self.F).T)

    def constant_eigenvalue(self) -> float:
        """Delta(mu) applied to the constant field, divided by it (mean over points)."""
        return float(np.mean(self.Delta @ np.ones(self.unit.size)).real)

    def apply_C(self, x, starred: bool = False):
        return (self.C.T if starred else self.C) @ x

    def solve_G(self, x, starred: bool = False):
        """(a/L^2 Q^*Q + fQ_n)^{-1} x, or with fQ_n^T."""
        return sla.lu_solve(self._Gt if starred else self._G, x)

    def apply_A(self, x_fine, starred: bool = False):
        """A_{psi,phi} = (a/L^2 Q^*Q + fQ_n)^{-1} fQ_n Q_n on fine-lattice values."""
        y = self.ops.Qn.matvec(x_fine)
        y = (self.F.T if starred else self.F) @ y
        return self.solve_G(y, starred)

    def linear_map(self, starred: bool = False) -> np.ndarray:
        """a/L^2 C(mu)^(*) Q^* as a dense matrix X_{-1}^(n+1) -> X_0^(n)."""
        return self.weight * ((self.C.T if starred else self.C) @ self.Qa)


def build_covariance(ops: ModelOperators, mu: float = 0.0) -> CriticalSetup:
    return CriticalSetup(ops, mu)


def _identity_rhs(setup: CriticalSetup, starred: bool) -> np.ndarray:
    """(a/L^2 Q^*Q + fQ_n)^{-1} {a/L^2 Q^* + fQ_n Q_n Sc Qc^* fQc}.

    With the scaling maps acting index by index, Sc = L^2 S^{-1} S_{n+1}(L^2 mu) S
    has the matrix L^2 S_{n+1}(L^2 mu), Qc^* that of Q_{n+1}^* and fQc that of
    fQ_{n+1} / L^2; the two powers of L^2 cancel.
    """
    ops = setup.ops
    L = ops.params.L
    ops1 = next_ops(ops)
    S1 = ops1.resolvent(L**2 * setup.mu)
    if ops1.unit.shape != setup.coarse.shape or ops1.fine.shape != ops.fine.shape:
        raise ConfigError("scaled lattices do not match index by index")
    E = np.eye(setup.coarse.size)
    F1 = ops1.fq.dense()
    X = ops1.Qn_adj.matvec((F1.T if starred else F1) @ E)
    Y = S1.rmatvec(X) if starred else S1.matvec(X)
    inner = (setup.F.T if starred else setup.F) @ ops.Qn.matvec(Y)
    return setup.solve_G(setup.weight * setup.Qa + inner, starred)


def verify_resolvent_identity(ops: ModelOperators, mu: float = 0.0, starred: bool = False,
                              setup: CriticalSetup | None = None) -> float:
    """Entrywise sup gap between the two sides of the covariance identity.

    Requires n >= 1 and budget for step n+1.  Columns are indexed by X_{-1}^(n+1).
    """
    if ops.n == 0:
        raise ConfigError("the covariance identity applies for n >= 1")
    setup = setup or CriticalSetup(ops, mu)
    lhs = setup.linear_map(starred)
    rhs = _identity_rhs(setup, starred)
    return float(np.max(np.abs(lhs - rhs)))


@dataclass
class CriticalField:
    hat_s: Field
    hat: Field
    lin_s: Field
    lin: Field
    higher_s: Field
    higher: Field
    route_gap: float
    background: BackgroundSolution = field(repr=False)
    smallness: float = 0.0

    def to_dict(self) -> dict:
        return {"sup_hat_s": self.hat_s.sup(), "sup_hat": self.hat.sup(),
                "sup_higher_s": self.higher_s.sup(), "sup_higher": self.higher.sup(),
                "route_gap": self.route_gap, "smallness": self.smallness}


def _down(values, lat_from: Lattice) -> Field:
    return scale_field(Field(lat_from, values), "coarser")


def critical_field(psi_s: Field, psi: Field, mu: float, V: QuarticKernel, setup: CriticalSetup | ModelOperators,
                   tol: float = 1e-12, check: bool = True, m: float = 0.0, wf: float = 1.0) -> CriticalField:
    """psi_hat_(*)n(psi_*, psi, mu, V) for psi_(*) on X_0^(n+1), with its linear / higher split.

    For n = 0 the map is the background field phi_(*)1(psi_*, psi, L^2 mu, S V)
    itself.  For n >= 1 the formula route (through C(mu)) and the direct route
    (through (a/L^2 Q^*Q + fQ_n)^{-1} and the full background field) are both
    evaluated and their sup gap is returned as ``route_gap``.

    :param m, wf: mass and weight factor of the smallness report
        ``||V||_m wf^2 / L + L^2 |mu|``
    """
    ops = setup.ops if isinstance(setup, CriticalSetup) else setup
    L = ops.params.L
    ops1 = next_ops(ops)
    V1 = V.scaled(ops1.fine)
    small = V1.norm(ops1.fine, m) * wf**2 + L**2 * abs(mu)
    sol = solve_background(psi_s, psi, L**2 * mu, V1, ops1, tol=tol, check=check)
    if ops.n == 0:
        return CriticalField(sol.phi_s, sol.phi, sol.lin_s, sol.lin, sol.higher_s, sol.higher, 0.0, sol, small)
    if not isinstance(setup, CriticalSetup):
        setup = CriticalSetup(ops, mu)
    out = {}
    for starred, ps, phi, hi in ((True, psi_s, sol.phi_s, sol.higher_s), (False, psi, sol.phi, sol.higher)):
        theta = scale_field(ps, "coarser").values
        lin = setup.weight * setup.apply_C(setup.Qa @ theta, starred)
        higher = setup.apply_A(_down(hi.values, ops1.fine).values, starred)
        F = setup.F.T if starred else setup.F
        direct = setup.solve_G(setup.weight * (setup.Qa @ theta)
                               + F @ ops.Qn.matvec(_down(phi.values, ops1.fine).values), starred)
        up = lambda v: scale_field(Field(setup.unit, v), "finer")
        out[starred] = (up(lin), up(higher), float(np.max(np.abs(direct - lin - higher))))
    (ls, hs, gs), (lu, hu, gu) = out[True], out[False]
    return CriticalField(ls + hs, lu + hu, ls, lu, hs, hu, max(gs, gu) * float(L) ** ops.params.scaling_power,
                         sol, small)


def critical_conjugation_gap(theta: Field, mu: float, V: QuarticKernel, setup: CriticalSetup,
                             tol: float = 1e-12, details: bool = False):
    """sup |psi_*n(theta^*, theta)^* - psi_n(theta^*, theta)| for theta on X_{-1}^(n+1).

    Computed as A S^{-1}[phi_*{n+1}^* - phi_{n+1}] at (S theta^*, S theta, L^2 mu, S V),
    which equals the gap because every operator involved is real.  With
    ``details`` the direct difference of the two critical fields is returned too.
    """
    ops = setup.ops
    L = ops.params.L
    if theta.lattice != setup.coarse:
        raise ValueError(f"theta must live on {setup.coarse}")
    psi = scale_field(theta, "finer")
    ops1 = next_ops(ops)
    sol = solve_background(psi.conj(), psi, L**2 * mu, V.scaled(ops1.fine), ops1, tol=tol)
    diff = _down(np.conj(sol.phi_s.values) - sol.phi.values, ops1.fine).values
    gap = float(np.max(np.abs(setup.apply_A(diff))))
    if not details:
        return gap
    cf = critical_field(psi.conj(), psi, mu, V, setup, tol=tol)
    direct = float(np.max(np.abs(np.conj(scale_field(cf.hat_s, "coarser").values)
                                 - scale_field(cf.hat, "coarser").values)))
    return gap, direct


def critical_map(setup: CriticalSetup, mu: float, V: QuarticKernel, part: str = "full", tol: float = 1e-14):
    """Batched psi_(*) -> psi_hat_(*)n (``part="full"``) or psi_hat^(>=3) (``part="higher"``).

    Inputs are value arrays on X_0^(n+1) of shape (size, batch).  The scaling
    factors of S and S^{-1} cancel index by index, so only the operator
    matrices enter.
    """
    from .background import background_map

    ops = setup.ops
    L = ops.params.L
    ops1 = next_ops(ops)
    fm = background_map(ops1, L**2 * mu, V.scaled(ops1.fine), tol=tol)
    S1 = ops1.resolvent(L**2 * mu)
    QFt = ProductOp(ops1.Qn_adj, ops1.fq.T)

    def fmap(inputs):
        ps, p = (np.asarray(x, dtype=np.complex128) for x in inputs)
        phs, ph = fm([ps, p])
        his = phs - S1.rmatvec(QFt.matvec(ps))
        hi = ph - S1.matvec(ops1.QadjF.matvec(p))
        out = [setup.apply_A(his, True), setup.apply_A(hi, False)]
        if part == "full":
            out[0] = out[0] + setup.weight * setup.apply_C(setup.Qa @ ps, True)
            out[1] = out[1] + setup.weight * setup.apply_C(setup.Qa @ p, False)
        return out

    return fmap
