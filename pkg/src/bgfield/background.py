"""Background field equations: quartic kernel, solver, decompositions and diagnostics.

The equations solved on X_n are

    S(mu)^{*-1} phi_* + V'_*(phi_*, phi, phi_*) = Q_n^* fQ_n^T psi_*
    S(mu)^{-1}  phi   + V'(phi, phi_*, phi)     = Q_n^* fQ_n psi

where ``*`` on operators is the transpose with respect to the bilinear
pairing.  They come from the action

    A = -<psi_* - Q phi_*, fQ (psi - Q phi)>_0 - <phi_*, D phi>_n - V(phi_*, phi) + mu <phi_*, phi>_n
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .field import Field, forward_diff, inner_product, translate
from .fixedpoint import FixedPointProblem, SolveCertificate, linear_part, solve
from .lattice import ConfigError, Lattice, nearest_unit_indices
from .operator import ModelOperators, ProductOp

log = logging.getLogger(__name__)


def _others(key):
    a, b, c = (np.asarray(k) for k in key)
    imgs = [(a, b, c), (a - b, -b, c - b), (c, b, a), (c - b, -b, a - b)]
    return [tuple(tuple(int(x) for x in v) for v in img) for img in imgs]


class QuarticKernel:
    """Translation-invariant quartic kernel V(u1, u2, u3, u4) on a fine lattice.

    The kernel is stored as a table of weights ``w(a, b, c) = vol^3 V(0, a, b, c)``
    indexed by integer lattice-index offsets of u2, u3, u4 relative to u1.  The
    table is averaged over the symmetry group generated by u1 <-> u3 and
    u2 <-> u4, so the required symmetries hold exactly.  The default on-site
    kernel has the single entry ``w(0, 0, 0) = r_v``.

    With this table

        V'(u; z1, zs, z2)   = sum w(a,b,c) z1(u+a) zs(u+b) z2(u+c)
        V'_*(u; zs1, z, zs2) = sum w(a,b,c) zs1(u-c) z(u-c+a) zs2(u-c+b)
    """

    def __init__(self, table: dict | None = None, r_v: float | None = None):
        if table is None:
            table = {((0, 0, 0, 0),) * 3: 0.0 if r_v is None else float(r_v)}
        elif r_v is not None:
            raise ConfigError("give either a kernel table or r_v, not both")
        sym: dict = {}
        for key, w in table.items():
            key = tuple(tuple(int(x) for x in (tuple(v) + (0,) * (4 - len(v)))) for v in key)
            if len(key) != 3:
                raise ConfigError("kernel table keys are triples of offsets")
            for img in _others(key):
                sym[img] = sym.get(img, 0.0) + complex(w) / 4.0
        self.table = {k: (v.real if v.imag == 0 else v) for k, v in sym.items() if v != 0}

    @classmethod
    def on_site(cls, r_v: float) -> "QuarticKernel":
        return cls(r_v=r_v)

    @classmethod
    def pair(cls, weights: dict) -> "QuarticKernel":
        """Density-density kernel from a pair profile ``{offset r: w(r)}``.

        V = (1/2) v(u1 - u3) [d(u1,u2) d(u3,u4) + d(u1,u4) d(u3,u2)] with w = vol v.
        The profile is symmetrized in r -> -r.
        """
        table = {}
        for r, w in weights.items():
            r = tuple(int(x) for x in (tuple(r) + (0,) * (4 - len(r))))
            nr = tuple(-x for x in r)
            z = (0, 0, 0, 0)
            for rr in (r, nr):
                table[(z, rr, rr)] = table.get((z, rr, rr), 0.0) + w / 4.0
                table[(rr, rr, z)] = table.get((rr, rr, z), 0.0) + w / 4.0
        return cls(table)

    @property
    def r_v(self) -> complex:
        """Sum of the table, the average value of the kernel."""
        return sum(self.table.values()) if self.table else 0.0

    @property
    def is_zero(self) -> bool:
        return not self.table

    @property
    def is_on_site(self) -> bool:
        return all(k == ((0, 0, 0, 0),) * 3 for k in self.table)

    def __add__(self, other: "QuarticKernel") -> "QuarticKernel":
        t = dict(self.table)
        for k, v in other.table.items():
            t[k] = t.get(k, 0.0) + v
        return QuarticKernel(t)

    def __mul__(self, c) -> "QuarticKernel":
        return QuarticKernel({k: c * v for k, v in self.table.items()})

    __rmul__ = __mul__

    def scaled(self, lattice: Lattice) -> "QuarticKernel":
        """Kernel of the scaled interaction, V(S^{-1} phi_*, S^{-1} phi) on the finer lattice."""
        d = lattice.params.spatial_dims
        return self * float(lattice.params.L) ** (2 - d)

    def norm(self, lattice: Lattice, m: float = 0.0) -> float:
        """||V||_m = sum |w| exp(m tau(u1..u4)), with tau the tree length on ``lattice``."""
        from .normkit import tree_length

        tot = 0.0
        stride = np.asarray(lattice.stride)
        for (a, b, c), w in self.table.items():
            wt = 1.0
            if m:
                pts = np.array([(0, 0, 0, 0), a, b, c]) * stride
                wt = np.exp(m * tree_length(pts, lattice.metric))
            tot += abs(w) * wt
        return float(tot)

    def _shift(self, grid, off):
        return np.roll(grid, tuple(-x for x in off), axis=(0, 1, 2, 3)) if any(off) else grid

    def grad(self, z1: Field, zs: Field, z2: Field, starred: bool = False) -> Field:
        """V'(z1, zs, z2), or V'_*(z1, zs, z2) when ``starred``."""
        lat = z1.lattice
        if zs.lattice != lat or z2.lattice != lat:
            raise ValueError("lattice mismatch in grad_V")
        return Field(lat, self.grad_values(lat, z1.values, zs.values, z2.values, starred))

    def grad_values(self, lat: Lattice, x1, xs, x2, starred=False):
        if self.is_zero:
            return np.zeros(np.broadcast(x1, xs, x2).shape, dtype=np.complex128)
        if self.is_on_site:
            return self.r_v * x1 * xs * x2
        x1, xs, x2 = np.broadcast_arrays(*(np.asarray(x) for x in (x1, xs, x2)))
        shp = lat.shape + x1.shape[1:]
        g1, gs, g2 = (x.reshape(shp) for x in (x1, xs, x2))
        out = np.zeros(shp, dtype=np.complex128)
        for (a, b, c), w in self.table.items():
            if starred:
                # zs1(u-c) z(u-c+a) zs2(u-c+b)
                a2 = tuple(x - y for x, y in zip(a, c))
                b2 = tuple(x - y for x, y in zip(b, c))
                mc = tuple(-y for y in c)
                out += w * self._shift(g1, mc) * self._shift(gs, a2) * self._shift(g2, b2)
            else:
                out += w * self._shift(g1, a) * self._shift(gs, b) * self._shift(g2, c)
        return out.reshape(x1.shape)

    def energy(self, phi_s: Field, phi: Field) -> complex:
        """V(phi_*, phi) = (1/2) <phi_*, V'(phi, phi_*, phi)>_n."""
        return 0.5 * inner_product(phi_s, self.grad(phi, phi_s, phi))

    def to_dict(self) -> dict:
        return {"table": [[list(map(list, k)), [float(np.real(v)), float(np.imag(v))]]
                          for k, v in sorted(self.table.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "QuarticKernel":
        if "r_v" in d:
            return cls.on_site(float(d["r_v"]))
        if "pair" in d:
            return cls.pair({tuple(r): float(w) for r, w in d["pair"]})
        return cls({tuple(map(tuple, k)): complex(v[0], v[1]) for k, v in d["table"]})

    def __repr__(self):
        if self.is_on_site:
            return f"QuarticKernel(r_v={self.r_v})"
        return f"QuarticKernel({len(self.table)} entries, r_v={self.r_v})"


def grad_V(z1: Field, z2: Field, z3: Field, V: QuarticKernel, starred: bool = False) -> Field:
    """V'(z1, z2, z3) or V'_*(z1, z2, z3)."""
    return V.grad(z1, z2, z3, starred)


@dataclass
class BackgroundSolution:
    phi_s: Field
    phi: Field
    lin_s: Field
    lin: Field
    certificate: SolveCertificate | None
    mu: float
    V: QuarticKernel
    psi_s: Field
    psi: Field
    ops: ModelOperators = field(repr=False)
    smallness: float = 0.0

    @property
    def n(self) -> int:
        return self.ops.n

    @property
    def higher_s(self) -> Field:
        """phi_*^(>=3) = phi_* - S(mu)^* Q^* fQ psi_*."""
        return self.phi_s - self.lin_s

    @property
    def higher(self) -> Field:
        return self.phi - self.lin

    def to_dict(self) -> dict:
        return {
            "n": self.n, "mu": self.mu, "V": repr(self.V), "smallness": self.smallness,
            "sup_phi_s": self.phi_s.sup(), "sup_phi": self.phi.sup(),
            "sup_higher_s": self.higher_s.sup(), "sup_higher": self.higher.sup(),
            "certificate": self.certificate.to_dict() if self.certificate else None,
        }


def _sources(ops: ModelOperators, psi_s: Field, psi: Field):
    if psi.lattice != ops.unit or psi_s.lattice != ops.unit:
        raise ValueError(f"psi fields must live on the unit lattice {ops.unit}")
    QFt = ProductOp(ops.Qn_adj, ops.fq.T)
    return QFt.matvec(psi_s.values), ops.QadjF.matvec(psi.values)


def _cubic_problem(lat, V, base_s, base, solve_s, solve_u, f, lin_extra=None, contraction=0.5, lam=None):
    """Fixed-point problem for gamma with phi_(*) = base_(*) + solve_(*)(gamma_(*)).

    The right side is f - V'(phi) + V'(base) plus an optional extra linear
    piece ``lin_extra(solve_s(gamma_*), solve_u(gamma))``.  L collects every
    term linear in gamma and B the rest.
    """
    As, A = base_s, base
    g0s = V.grad_values(lat, As, A, As, True)
    g0 = V.grad_values(lat, A, As, A)

    def LB(g):
        ds, d = solve_s(g[0]), solve_u(g[1])
        lin_s = -(V.grad_values(lat, As, d, As, True) + 2 * V.grad_values(lat, As, A, ds, True))
        lin = -(V.grad_values(lat, A, ds, A) + 2 * V.grad_values(lat, A, As, d))
        full_s = -V.grad_values(lat, As + ds, A + d, As + ds, True) + g0s
        full = -V.grad_values(lat, A + d, As + ds, A + d) + g0
        if lin_extra is not None:
            es, e = lin_extra(ds, d)
            lin_s, lin = lin_s + es, lin + e
        else:
            es = e = 0.0
        return [lin_s, lin], [full_s - lin_s + es, full - lin + e]

    return FixedPointProblem(f, None, None, d_max=3, contraction=contraction, lam=lam, LB=LB)


def solve_background(psi_s: Field, psi: Field, mu: float, V: QuarticKernel, ops: ModelOperators,
                     tol: float = 1e-12, check: bool = True, contraction: float = 0.5, lam=None,
                     m: float = 0.0, wf: float = 1.0) -> BackgroundSolution:
    """Solve the background field equations by the substitution phi = S(mu)(alpha + gamma).

    With alpha_(*) = Q^* fQ psi_(*), the unknowns gamma_(*) solve
    gamma = f + L(gamma) + B(gamma) with f = -V'(S alpha, S^* alpha_*, S alpha),
    L the part linear in gamma and B the rest.

    :param m, wf: mass and weight factor entering the reported smallness
        ``||V||_m wf^2 + |mu|``
    """
    S = ops.resolvent(mu)
    lat = ops.fine
    al_s, al = _sources(ops, psi_s, psi)
    lin_s = S.rmatvec(al_s)
    lin = S.matvec(al)
    small = V.norm(lat, m) * wf**2 + abs(mu)
    if V.is_zero:
        cert = None
        phi_s, phi = lin_s, lin
    else:
        f = [-V.grad_values(lat, lin_s, lin, lin_s, True), -V.grad_values(lat, lin, lin_s, lin)]
        prob = _cubic_problem(lat, V, lin_s, lin, S.rmatvec, S.matvec, f, contraction=contraction, lam=lam)
        g, cert = solve(prob, tol=tol, check=check)
        phi_s = lin_s + S.rmatvec(g[0])
        phi = lin + S.matvec(g[1])
    return BackgroundSolution(Field(lat, phi_s), Field(lat, phi), Field(lat, lin_s), Field(lat, lin),
                              cert, float(mu), V, psi_s, psi, ops, small)


def background_residual(sol: BackgroundSolution):
    """Sup norms of the residuals of both equations."""
    r_s, r = action_gradient(sol.psi_s, sol.psi, sol.phi_s, sol.phi, sol.mu, sol.V, sol.ops)
    return r_s.sup(), r.sup()


def third_order_part(sol: BackgroundSolution):
    """-S(mu)^* V'_*(Phi_*, Phi, Phi_*) and -S(mu) V'(Phi, Phi_*, Phi) at the linear parts."""
    S = sol.ops.resolvent(sol.mu)
    lat = sol.ops.fine
    Ls, L = sol.lin_s.values, sol.lin.values
    ts = -S.rmatvec(sol.V.grad_values(lat, Ls, L, Ls, True))
    t = -S.matvec(sol.V.grad_values(lat, L, Ls, L))
    return Field(lat, ts), Field(lat, t)


@dataclass
class DerivativeResult:
    nu: int
    direct_s: Field
    direct: Field
    solved_s: Field
    solved: Field
    certificate: SolveCertificate | None

    @property
    def gap(self) -> float:
        return max((self.direct_s - self.solved_s).sup(), (self.direct - self.solved).sup())


def derivative_field(sol: BackgroundSolution, nu: int, tol: float = 1e-13) -> DerivativeResult:
    """d_nu phi_(*) by direct differencing and by solving the differentiated equations.

    Applying d_nu to the background equations with the exact product rules gives,
    with W = Q^* fQ Q and K_nu = [d_nu, W],

        S^{-1} phi_nu + V'(phi_nu, T^{-1} phi_*, T^{-1} phi) + V'(phi, phi_*nu, T^{-1} phi)
            + V'(phi, phi_*, phi_nu) = d_nu(Q^* fQ psi) - K_nu phi

    and the transposed analogue.  This linear system is solved by the
    fixed-point engine (its B part vanishes).
    """
    ops, V, lat = sol.ops, sol.V, sol.ops.fine
    S = ops.resolvent(sol.mu)
    d = lambda f: forward_diff(f, nu).values
    Tinv = lambda f: translate(f, nu, -1).values
    al_s, al = _sources(ops, sol.psi_s, sol.psi)
    Kt = _commutator_T(ops, nu)
    K = ops.commutator(nu)
    src_s = d(Field(lat, al_s)) - Kt.matvec(sol.phi_s.values)
    src = d(Field(lat, al)) - K.matvec(sol.phi.values)
    direct_s, direct = forward_diff(sol.phi_s, nu), forward_diff(sol.phi, nu)
    if V.is_zero:
        return DerivativeResult(nu, direct_s, direct, Field(lat, S.rmatvec(src_s)), Field(lat, S.matvec(src)), None)
    ps, p = sol.phi_s.values, sol.phi.values
    Tps, Tp = Tinv(sol.phi_s), Tinv(sol.phi)

    def L(g):
        gs, gu = g
        ls = (V.grad_values(lat, gs, Tp, Tps, True) + V.grad_values(lat, ps, gu, Tps, True)
              + V.grad_values(lat, ps, p, gs, True))
        lu = (V.grad_values(lat, gu, Tps, Tp) + V.grad_values(lat, p, gs, Tp)
              + V.grad_values(lat, p, ps, gu))
        return [-S.rmatvec(ls), -S.matvec(lu)]

    f = [S.rmatvec(src_s), S.matvec(src)]
    prob = FixedPointProblem(f, L, lambda g: [np.zeros_like(x) for x in g], d_max=3)
    g, cert = linear_part(prob, tol=tol * max(1.0, max(np.max(np.abs(x)) for x in f)))
    return DerivativeResult(nu, direct_s, direct, Field(lat, g[0]), Field(lat, g[1]), cert)


def _commutator_T(ops: ModelOperators, nu: int):
    from .operator import CommutatorOp

    return CommutatorOp(ops.W.T, nu)


def dn_image(sol: BackgroundSolution):
    """D_n^T phi_* and D_n phi from the equations, without applying D_n.

    Returns ``(Ds, D, gap)`` with the sup gap to the direct kernel application.
    """
    ops, lat, mu, V = sol.ops, sol.ops.fine, sol.mu, sol.V
    al_s, al = _sources(ops, sol.psi_s, sol.psi)
    ps, p = sol.phi_s.values, sol.phi.values
    Ds = al_s - ops.W.rmatvec(ps) + mu * ps - V.grad_values(lat, ps, p, ps, True)
    D = al - ops.W.matvec(p) + mu * p - V.grad_values(lat, p, ps, p)
    gap = max(np.max(np.abs(Ds - ops.Dn.matrix.T @ ps)), np.max(np.abs(D - ops.Dn.matrix @ p)))
    return Field(lat, Ds), Field(lat, D), float(gap)


def local_expansion(sol: BackgroundSolution):
    """Residues phi_(*)(u) - a_n/(a_n - mu) psi_(*)(X(u)); returns (res_s, res, coefficient)."""
    ops = sol.ops
    idx = nearest_unit_indices(ops.fine, ops.unit)
    c = ops.an / (ops.an - sol.mu)
    res_s = sol.phi_s - c * sol.psi_s.values[idx]
    res = sol.phi - c * sol.psi.values[idx]
    return res_s, res, c


def conjugation_gap(psi: Field, mu: float, V: QuarticKernel, ops: ModelOperators, **kw) -> float:
    """sup |phi_*^* - phi| for the solution with psi_* = conj(psi)."""
    sol = solve_background(psi.conj(), psi, mu, V, ops, **kw)
    return (sol.phi_s.conj() - sol.phi).sup()


def action_value(psi_s, psi, phi_s, phi, mu, V: QuarticKernel, ops: ModelOperators) -> complex:
    r_s = psi_s.values - ops.Qn.matvec(phi_s.values)
    r = psi.values - ops.Qn.matvec(phi.values)
    unit = ops.unit
    quad = inner_product(Field(unit, r_s), Field(unit, ops.fq.matvec(r)))
    kin = inner_product(phi_s, Field(ops.fine, ops.Dn.matvec(phi.values)))
    return complex(-quad - kin - V.energy(phi_s, phi) + mu * inner_product(phi_s, phi))


def action_gradient(psi_s, psi, phi_s, phi, mu, V: QuarticKernel, ops: ModelOperators):
    """Residuals (R_*, R) of the two background equations (left minus right side).

    The first variation of the action is dA = -<R, eta_*> - <R_*, eta>, so
    R = -dA/dphi_* and R_* = -dA/dphi, and both vanish at a solution.
    """
    lat = ops.fine
    S = ops.resolvent(mu)
    al_s, al = _sources(ops, psi_s, psi)
    ps, p = phi_s.values, phi.values
    Rs = S.apply_system(ps[:, None], transpose=True)[:, 0] + V.grad_values(lat, ps, p, ps, True) - al_s
    R = S.apply_system(p[:, None])[:, 0] + V.grad_values(lat, p, ps, p) - al
    return Field(lat, Rs), Field(lat, R)


def background_map(ops: ModelOperators, mu: float, V: QuarticKernel, tol: float = 1e-14, max_iter: int = 200):
    """Batched (psi_*, psi) -> (phi_*, phi) on value arrays of shape (|X_0^(n)|, batch).

    No hypothesis probes or certificates; meant for kernel extraction on tiny lattices.
    """
    S = ops.resolvent(mu)
    lat = ops.fine
    QFt = ProductOp(ops.Qn_adj, ops.fq.T)

    def fmap(inputs):
        ps, p = (np.asarray(x, dtype=np.complex128) for x in inputs)
        lin_s, lin = S.rmatvec(QFt.matvec(ps)), S.matvec(ops.QadjF.matvec(p))
        if V.is_zero:
            return [lin_s, lin]
        f = [-V.grad_values(lat, lin_s, lin, lin_s, True), -V.grad_values(lat, lin, lin_s, lin)]
        prob = _cubic_problem(lat, V, lin_s, lin, S.rmatvec, S.matvec, f)
        g, _ = solve(prob, tol=tol, check=False, uniqueness=False, max_iter=max_iter)
        return [lin_s + S.rmatvec(g[0]), lin + S.matvec(g[1])]

    return fmap
