"""Kernel-represented linear operators and the model operators Q, Q_n, fQ_n, D_n, S_n(mu).

Convention: an operator A from fields on X to fields on Y has kernel A(y, x)
and acts as (A f)(y) = sum_x vol_X A(y, x) f(x).  Internally every operator
stores the matrix M = vol_X * A acting on value vectors.  The adjoint A^*
is taken with respect to the bilinear pairings <.,.>_X, <.,.>_Y, which
gives the kernel A^*(x, y) = A(y, x) and the matrix (vol_Y/vol_X) M^T.
"""

from __future__ import annotations

import csv
import logging
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import Field
from .lattice import ConfigError, Lattice, fine_lattice, make_lattice, unit_lattice

log = logging.getLogger(__name__)


class SingularOperatorError(RuntimeError):
    """The resolvent system is singular or too close to singular."""

    def __init__(self, msg, mu=None, margin=None):
        super().__init__(msg)
        self.mu = mu
        self.margin = margin


def _as_2d(v):
    v = np.asarray(v)
    return (v[:, None], True) if v.ndim == 1 else (v, False)


class Operator:
    """Linear map between field spaces; subclasses provide ``_mv`` and ``_rmv``.

    ``_mv`` and ``_rmv`` act on (size, m) arrays of column vectors.
    ``_rmv`` is the adjoint with respect to the lattice pairings.
    """

    domain: Lattice
    codomain: Lattice

    def matvec(self, v):
        x, flat = _as_2d(v)
        y = self._mv(x)
        return y[:, 0] if flat else y

    def rmatvec(self, v):
        x, flat = _as_2d(v)
        y = self._rmv(x)
        return y[:, 0] if flat else y

    def apply(self, f: Field) -> Field:
        if f.lattice != self.domain:
            raise ValueError(f"operator domain {self.domain} does not match field on {f.lattice}")
        return Field(self.codomain, self.matvec(f.values))

    def apply_adjoint(self, f: Field) -> Field:
        if f.lattice != self.codomain:
            raise ValueError("field is not on the codomain")
        return Field(self.domain, self.rmatvec(f.values))

    @property
    def T(self) -> "Operator":
        """The adjoint A^* with respect to the lattice inner products."""
        return AdjointOp(self)

    def __matmul__(self, other):
        if isinstance(other, Field):
            return self.apply(other)
        return ProductOp(self, other)

    def __add__(self, other):
        return SumOp(self, other, 1.0)

    def __sub__(self, other):
        return SumOp(self, other, -1.0)

    def __rmul__(self, c):
        return ScaledOp(self, c)

    def __mul__(self, c):
        return ScaledOp(self, c)

    def __neg__(self):
        return ScaledOp(self, -1.0)

    def dense(self) -> np.ndarray:
        """Matrix M acting on values (columns by applying to unit vectors)."""
        return self.matvec(np.eye(self.domain.size))

    def materialize(self, drop: float = 0.0) -> "KernelOperator":
        M = self.dense()
        if drop > 0:
            M = np.where(np.abs(M) > drop, M, 0.0)
        if np.all(np.isreal(M)):
            M = M.real
        return KernelOperator(self.domain, self.codomain, sp.csr_matrix(M))


class KernelOperator(Operator):
    """Operator stored as a sparse matrix M = vol_X * kernel."""

    def __init__(self, domain: Lattice, codomain: Lattice, matrix):
        M = sp.csr_matrix(matrix)
        if M.shape != (codomain.size, domain.size):
            raise ValueError(f"matrix shape {M.shape} does not match lattices")
        self.domain = domain
        self.codomain = codomain
        self.matrix = M

    @classmethod
    def from_kernel(cls, domain, codomain, kernel):
        return cls(domain, codomain, sp.csr_matrix(kernel) * domain.vol)

    @classmethod
    def identity(cls, lat: Lattice, c: float = 1.0):
        return cls(lat, lat, sp.identity(lat.size, format="csr") * c)

    @property
    def kernel(self):
        return self.matrix / self.domain.vol

    def _mv(self, x):
        return self.matrix @ x

    def _mt(self, x):
        """M^T x (plain transpose of the value matrix)."""
        return self.matrix.T @ x

    def _rmv(self, x):
        return (self.codomain.vol / self.domain.vol) * self._mt(x)

    @cached_property
    def adjoint(self) -> "KernelOperator":
        M = self.matrix.T.tocsr() * (self.codomain.vol / self.domain.vol)
        return KernelOperator(self.codomain, self.domain, M)

    def dense(self):
        return self.matrix.toarray()

    def materialize(self, drop=0.0):
        return self

    def compose(self, other: "KernelOperator") -> "KernelOperator":
        if other.codomain != self.domain:
            raise ValueError("composition lattice mismatch")
        return KernelOperator(other.domain, self.codomain, self.matrix @ other.matrix)

    def to_csv(self, path) -> None:
        """Coordinate list (y_index, x_index, re, im) of the kernel."""
        K = self.kernel.tocoo()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y_index", "x_index", "re", "im"])
            for y, x, v in zip(K.row, K.col, K.data):
                v = complex(v)
                w.writerow([int(y), int(x), repr(v.real), repr(v.imag)])

    @classmethod
    def from_csv(cls, domain, codomain, path):
        rows, cols, vals = [], [], []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for y, x, re, im in r:
                rows.append(int(y))
                cols.append(int(x))
                vals.append(float(re) + 1j * float(im))
        vals = np.array(vals)
        if np.all(vals.imag == 0):
            vals = vals.real
        K = sp.coo_matrix((vals, (rows, cols)), shape=(codomain.size, domain.size))
        return cls.from_kernel(domain, codomain, K)


def _block_geometry(fine_shape, block):
    block = tuple(int(b) for b in block)
    coarse = tuple(f // b for f, b in zip(fine_shape, block))
    half = tuple((b - 1) // 2 for b in block)
    return block, coarse, half


def block_mean(x, fine_shape, block):
    """Mean over centred blocks; x has shape (N, m)."""
    block, coarse, half = _block_geometry(fine_shape, block)
    m = x.shape[1]
    g = np.roll(x.reshape(tuple(fine_shape) + (m,)), half, axis=(0, 1, 2, 3))
    g = g.reshape(coarse[0], block[0], coarse[1], block[1], coarse[2], block[2], coarse[3], block[3], m)
    return g.mean(axis=(1, 3, 5, 7)).reshape(-1, m)


def block_spread(c, fine_shape, block):
    """Copy each coarse value onto its centred block; c has shape (r, m)."""
    block, coarse, half = _block_geometry(fine_shape, block)
    m = c.shape[1]
    g = c.reshape(coarse + (m,))
    for a in range(4):
        g = np.repeat(g, block[a], axis=a)
    g = np.roll(g, tuple(-h for h in half), axis=(0, 1, 2, 3))
    return g.reshape(-1, m)


class BlockAverageOperator(KernelOperator):
    """Plain block average with exact (pairwise-summed) application."""

    def __init__(self, domain, codomain, matrix, block):
        super().__init__(domain, codomain, matrix)
        self.block = tuple(block)
        self._b = int(np.prod(self.block))

    def _mv(self, x):
        return block_mean(x, self.domain.shape, self.block)

    def _mt(self, x):
        return block_spread(x, self.domain.shape, self.block) / self._b

    def _rmv(self, x):
        return block_spread(x, self.domain.shape, self.block)

    @cached_property
    def adjoint(self):
        M = self.matrix.T.tocsr() * (self.codomain.vol / self.domain.vol)
        return BlockSpreadOperator(self.codomain, self.domain, M, self.block)

    def compose(self, other):
        if isinstance(other, BlockAverageOperator) and other.codomain == self.domain:
            block = tuple(a * b for a, b in zip(self.block, other.block))
            return BlockAverageOperator(other.domain, self.codomain, self.matrix @ other.matrix, block)
        return super().compose(other)


class BlockSpreadOperator(KernelOperator):
    """Adjoint of a block average: (Q^* psi)(x) = psi(block of x)."""

    def __init__(self, domain, codomain, matrix, block):
        super().__init__(domain, codomain, matrix)
        self.block = tuple(block)
        self._b = int(np.prod(self.block))

    def _mv(self, x):
        return block_spread(x, self.codomain.shape, self.block)

    def _mt(self, x):
        return block_mean(x, self.codomain.shape, self.block) * self._b

    def _rmv(self, x):
        return block_mean(x, self.codomain.shape, self.block)


class Chain:
    """Product of value matrices M_1 M_2 ... given as KernelOperators."""

    def __init__(self, *ops):
        self.ops = ops
        self.shape = (ops[0].codomain.size, ops[-1].domain.size)

    def dot(self, x):
        for op in reversed(self.ops):
            x = op._mv(x)
        return x

    def tdot(self, x):
        for op in self.ops:
            x = op._mt(x)
        return x



class AdjointOp(Operator):
    def __init__(self, op):
        self.op = op
        self.domain, self.codomain = op.codomain, op.domain

    def _mv(self, x):
        return self.op._rmv(x)

    def _rmv(self, x):
        return self.op._mv(x)

    @property
    def T(self):
        return self.op


class ProductOp(Operator):
    def __init__(self, a, b):
        if b.codomain != a.domain:
            raise ValueError(f"composition mismatch: {b.codomain} vs {a.domain}")
        self.a, self.b = a, b
        self.domain, self.codomain = b.domain, a.codomain

    def _mv(self, x):
        return self.a._mv(self.b._mv(x))

    def _rmv(self, x):
        return self.b._rmv(self.a._rmv(x))


class SumOp(Operator):
    def __init__(self, a, b, sign):
        if a.domain != b.domain or a.codomain != b.codomain:
            raise ValueError("sum of operators with different lattices")
        self.a, self.b, self.sign = a, b, sign
        self.domain, self.codomain = a.domain, a.codomain

    def _mv(self, x):
        return self.a._mv(x) + self.sign * self.b._mv(x)

    def _rmv(self, x):
        return self.a._rmv(x) + self.sign * self.b._rmv(x)


class ScaledOp(Operator):
    def __init__(self, op, c):
        self.op, self.c = op, c
        self.domain, self.codomain = op.domain, op.codomain

    def _mv(self, x):
        return self.c * self.op._mv(x)

    def _rmv(self, x):
        return self.c * self.op._rmv(x)


class IdentityOp(Operator):
    def __init__(self, lat):
        self.domain = self.codomain = lat

    def _mv(self, x):
        return x

    def _rmv(self, x):
        return x


# norms

def kernel_norm(A: Operator, m: float = 0.0) -> float:
    """||A||_m: max of the exponentially weighted row and column sums."""
    if m < 0:
        raise ValueError("mass must be >= 0")
    K = A.materialize()
    if not K.domain.same_torus(K.codomain):
        raise ValueError("domain and codomain must share a torus")
    C = K.matrix.tocoo()
    if C.nnz == 0:
        return 0.0
    ypts = K.codomain.points[C.row]
    xpts = K.domain.points[C.col]
    w = np.abs(C.data) / K.domain.vol
    if m:
        w = w * np.exp(m * K.domain.metric(ypts, xpts))
    rows = np.bincount(C.row, weights=w, minlength=K.codomain.size) * K.domain.vol
    cols = np.bincount(C.col, weights=w, minlength=K.domain.size) * K.codomain.vol
    return float(max(rows.max(), cols.max()))


# averaging

def _axis_profile(s: int, p: int) -> np.ndarray:
    """p-fold convolution power of the normalized indicator of s points."""
    base = np.full(s, 1.0 / s)
    h = base
    for _ in range(p - 1):
        h = np.convolve(h, base)
    return h


def averaging_Q(fine: Lattice, coarse: Lattice, p: int = 1) -> KernelOperator:
    """Single block-spin averaging from X_j^(k) to X_{j-1}^(k+1).

    Blocks have L^2 x L x L x L fine points centred at the coarse point.
    ``p = 1`` is the plain block average; larger ``p`` uses the p-fold
    self-convolution of the block profile.  Q 1 = 1 for every ``p``.
    """
    if not fine.same_torus(coarse):
        raise ConfigError("fine and coarse lattices are on different tori")
    if coarse.steps_remaining != fine.steps_remaining + 1:
        raise ConfigError("coarse lattice must be one averaging level above the fine one")
    if p < 1:
        raise ConfigError("profile order p must be >= 1")
    ratios = [c // f for c, f in zip(coarse.stride, fine.stride)]
    if any(c % f for c, f in zip(coarse.stride, fine.stride)):
        raise ConfigError("blocks do not tile the fine lattice")
    profiles = [_axis_profile(r, p) for r in ratios]
    offsets = [np.arange(len(h)) - (len(h) - 1) // 2 for h in profiles]
    wgrid = profiles[0]
    for h in profiles[1:]:
        wgrid = np.multiply.outer(wgrid, h)
    off = np.stack(np.meshgrid(*offsets, indexing="ij"), axis=-1).reshape(-1, 4)
    wts = wgrid.reshape(-1)
    cidx = np.indices(coarse.shape).reshape(4, -1).T
    base = cidx * np.asarray(ratios)
    fidx = (base[:, None, :] + off[None, :, :]) % np.asarray(fine.shape)
    cols = np.ravel_multi_index(tuple(fidx.reshape(-1, 4).T), fine.shape)
    rows = np.repeat(np.arange(coarse.size), len(wts))
    data = np.tile(wts, coarse.size)
    M = sp.coo_matrix((data, (rows, cols)), shape=(coarse.size, fine.size)).tocsr()
    if p == 1:
        return BlockAverageOperator(fine, coarse, M, ratios)
    return KernelOperator(fine, coarse, M)


def compose_Qn(params, n: int, p: int = 1) -> KernelOperator:
    """Q_n : X_n -> X_0^(n), the composition of the n single-step averages."""
    if n < 0 or n > params.n_steps:
        raise ConfigError(f"scale {n} exceeds the step budget {params.n_steps}")
    cur = fine_lattice(params, n)
    if n == 0:
        return KernelOperator.identity(cur)
    op = None
    for k in range(n):
        nxt = make_lattice(params, n - k - 1, k + 1)
        q = averaging_Q(cur, nxt, p)
        op = q if op is None else q.compose(op)
        cur = nxt
    return op


def a_n(a: float, L: int, n: int) -> float:
    """a_n = a (1 + sum_{j=1}^{n-1} L^{-2j})^{-1}."""
    return a / (1.0 + sum(float(L) ** (-2 * j) for j in range(1, n)))


def make_fqn(params, n: int, a: float, kernel: KernelOperator | None = None, tol: float = 1e-12) -> KernelOperator:
    """fQ_n on X_0^(n).  Default a_n * identity; a supplied kernel must satisfy fQ 1 = a_n 1."""
    unit = unit_lattice(params, n)
    an = a_n(a, params.L, n)
    if kernel is None:
        return KernelOperator.identity(unit, an)
    if kernel.domain != unit or kernel.codomain != unit:
        raise ConfigError("fQ_n kernel must act on the unit lattice X_0^(n)")
    gap = np.max(np.abs(kernel.matvec(np.ones(unit.size)) - an))
    if gap > tol:
        raise ConfigError(f"fQ_n 1 != a_n 1 (gap {gap:.3e}, a_n = {an})")
    return kernel


def _circ_forward(N, eps):
    if N == 1:
        return sp.csr_matrix((1, 1))
    I = sp.identity(N, format="csr")
    S = sp.csr_matrix((np.ones(N), (np.arange(N), (np.arange(N) + 1) % N)), shape=(N, N))
    return (S - I) / eps


def _kron_axis(mats1d, shape, axis):
    out = None
    for a, N in enumerate(shape):
        m = mats1d if a == axis else sp.identity(N, format="csr")
        out = m if out is None else sp.kron(out, m, format="csr")
    return out


def diff_matrix(lat: Lattice, nu: int) -> sp.csr_matrix:
    """Forward divided difference along ``nu`` as a sparse matrix."""
    return _kron_axis(_circ_forward(lat.shape[nu], lat.spacing[nu]), lat.shape, nu)


def dn_symbol(lat: Lattice, h0: float = 0.0) -> np.ndarray:
    """Fourier multiplier of D_n on numpy's fftn grid."""
    grids = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(N) for N in lat.shape], indexing="ij")
    eps = lat.spacing
    sym = -np.exp(-h0) * (np.exp(1j * grids[0]) - 1.0) / eps[0]
    for a in range(1, 4):
        if lat.shape[a] > 1:
            sym = sym + (2.0 - 2.0 * np.cos(grids[a])) / eps[a] ** 2
    return sym


def make_Dn(params, n: int, h0: float = 0.0) -> KernelOperator:
    """D_n = -e^{-h0} d_0 - (spatial Laplacian) on X_n, periodic, forward time difference."""
    lat = fine_lattice(params, n)
    M = -np.exp(-h0) * diff_matrix(lat, 0)
    for a in range(1, 4):
        if lat.shape[a] > 1:
            d = diff_matrix(lat, a)
            M = M + d.T @ d  # minus the 1-D Laplacian
    return KernelOperator(lat, lat, M.tocsr())


class LowRankOp(Operator):
    """W = U V^T on one lattice, with U and V^T given as value-matrix chains."""

    def __init__(self, lat, U: Chain, Vt: Chain):
        self.domain = self.codomain = lat
        self.U, self.Vt = U, Vt

    def _mv(self, x):
        return self.U.dot(self.Vt.dot(x))

    def _rmv(self, x):
        return self.Vt.tdot(self.U.tdot(x))


class Resolvent(Operator):
    """(D_n + U Vt - mu)^{-1} for a low-rank U Vt that preserves constants.

    The default solve inverts the circulant part D_n - mu + c P_0 by FFT
    (P_0 the projection on constants, c > 0 lifting the zero mode) and
    corrects for U Vt - c P_0 with the Woodbury formula.  Since U 1 = a_n 1
    and 1^T Vt = (r/N) 1^T, the shift folds into the capacitance matrix
    without raising the rank.  ``method="direct"`` assembles the full sparse
    matrix and factors it with SuperLU instead (small lattices only).
    """

    def __init__(self, fine, Dn: KernelOperator, U: Chain, Vt: Chain, mu, h0=0.0, method="woodbury",
                 shift=None, check_tol=1e-11, block=None):
        self.domain = self.codomain = fine
        self.mu = float(mu)
        self.Dn = Dn
        self.U, self.Vt = U, Vt
        self.method = method
        self.refine = 0
        self._block = block
        self.margin = None
        self.condition = None
        N = fine.size
        if method == "direct":
            W = U.dot(Vt.dot(np.eye(N))) if N <= 4096 else None
            if W is None:
                raise ConfigError("direct resolvent is limited to lattices of at most 4096 points")
            A = (Dn.matrix + sp.csr_matrix(W) - self.mu * sp.identity(N)).tocsc()
            try:
                self._lu = spla.splu(A)
            except RuntimeError as e:
                raise SingularOperatorError(f"singular resolvent at mu={mu}: {e}", mu=mu) from e
        elif method == "woodbury":
            self._setup_woodbury(fine, h0, shift)
        else:
            raise ValueError(f"unknown resolvent method {method!r}")
        self.residual = self._probe_residual()
        if not self.residual < 0.1 * check_tol:
            # one step of iterative refinement; kept only if it helps
            first = self.residual
            self.refine = 1
            self.residual = self._probe_residual()
            if self.residual > 0.5 * first:
                self.refine, self.residual = 0, first
        if not self.residual < check_tol:
            raise SingularOperatorError(
                f"resolvent residual {self.residual:.2e} >= {check_tol:.0e} at mu={mu}", mu=mu,
                margin=self.margin)

    def _setup_woodbury(self, fine, h0, shift):
        N = fine.size
        c = 0.5 if shift is None else shift
        self._shape = fine.shape
        sym = dn_symbol(fine, h0) - self.mu
        sym.flat[0] += c
        self.margin = float(np.min(np.abs(sym)))
        if self.margin < 1e-10:
            raise SingularOperatorError(f"circulant part singular at mu={self.mu}", mu=self.mu, margin=self.margin)
        self._sym = sym
        r = self.U.shape[1]
        u1 = self.U.dot(np.ones((r, 1)))[:, 0]
        an = float(np.mean(u1))
        v1 = self.Vt.tdot(np.ones((r, 1)))[:, 0]
        if np.max(np.abs(u1 - an)) > 1e-12 * abs(an) or np.max(np.abs(v1 - r / N)) > 1e-12 * r / N:
            raise ValueError("low-rank factors do not preserve constants")
        self._C = np.eye(r) - (c / (an * r)) * np.ones((r, r))
        Yt = self._binv_rows_T().T            # Vt B^{-1}, shape (r, N)
        YU = self.U.tdot(Yt.T).T              # Vt B^{-1} U
        G = np.eye(r) + self._C @ YU
        Gt = np.eye(r) + self._C.T @ YU.T
        self.condition = float(np.linalg.cond(G))
        if not np.isfinite(self.condition) or self.condition > 1e12:
            raise SingularOperatorError(f"capacitance matrix ill-conditioned (cond {self.condition:.2e}) at mu={self.mu}",
                                        mu=self.mu, margin=self.margin)
        self._G, self._Gt = sla.lu_factor(G), sla.lu_factor(Gt)

    def _row(self, i):
        e = np.zeros((self.Vt.shape[0], 1))
        e[i] = 1.0
        return self.Vt.tdot(e)[:, 0]

    def _binv_rows_T(self):
        """B^{-T} applied to every row of Vt, returned as columns.

        Rows of the averaging matrix are translates of one another by the block
        stride, so one Fourier solve plus rolls suffices when that structure is
        present; otherwise every row is solved.
        """
        r = self.Vt.shape[0]
        shape = self._shape
        if self._block is not None:
            coarse_shape = tuple(s // b for s, b in zip(shape, self._block))
            if int(np.prod(coarse_shape)) == r:
                q = np.indices(coarse_shape).reshape(4, -1).T * np.asarray(self._block)
                g0 = self._row(0).reshape(shape)
                structured = all(
                    np.max(np.abs(np.roll(g0, tuple(q[i]), axis=(0, 1, 2, 3)).ravel() - self._row(i))) <= 1e-15
                    for i in sorted({0, r // 2, r - 1}))
                if structured:
                    z0 = self._binv(g0.reshape(-1, 1), True)[:, 0].reshape(shape)
                    out = np.empty((z0.size, r), dtype=z0.dtype)
                    for i in range(r):
                        out[:, i] = np.roll(z0, tuple(q[i]), axis=(0, 1, 2, 3)).ravel()
                    return out
        return self._binv(self.Vt.tdot(np.eye(r)), True)

    def _binv(self, x, transpose, chunk=32):
        m = x.shape[1]
        real = np.isrealobj(x)
        sym = (np.conj(self._sym) if transpose else self._sym)[..., None]
        out = np.empty(x.shape, dtype=float if real else complex)
        for s in range(0, m, chunk):
            blk = x[:, s:s + chunk]
            if blk.shape[1] == 1:
                X = sfft.fftn(blk.reshape(self._shape))
                y = sfft.ifftn(X / sym[..., 0]).reshape(-1, 1)
            else:
                X = sfft.fftn(blk.reshape(self._shape + (blk.shape[1],)), axes=(0, 1, 2, 3))
                y = sfft.ifftn(X / sym, axes=(0, 1, 2, 3)).reshape(-1, blk.shape[1])
            out[:, s:s + chunk] = y.real if real else y
        return out

    def _solve_once(self, b, transpose=False):
        if self.method == "direct":
            if not np.isrealobj(b):
                return self._solve_once(b.real, transpose) + 1j * self._solve_once(b.imag, transpose)
            return self._lu.solve(np.ascontiguousarray(b), trans="T" if transpose else "N")
        y = self._binv(b, transpose)
        if transpose:
            t = self._C.T @ self.U.tdot(y)
            return y - self._binv(self.Vt.tdot(sla.lu_solve(self._Gt, t)), True)
        t = self._C @ self.Vt.dot(y)
        return y - self._binv(self.U.dot(sla.lu_solve(self._G, t)), False)

    def apply_system(self, x, transpose=False):
        """(D_n + U Vt - mu) x, or its transpose."""
        if transpose:
            return self.Dn.matrix.T @ x + self.Vt.tdot(self.U.tdot(x)) - self.mu * x
        return self.Dn.matrix @ x + self.U.dot(self.Vt.dot(x)) - self.mu * x

    def _solve(self, b, transpose=False, refine=None):
        b = np.asarray(b)
        refine = self.refine if refine is None else refine
        x = self._solve_once(b, transpose)
        for _ in range(refine):
            x = x + self._solve_once(b - self.apply_system(x, transpose), transpose)
        return x

    def _mv(self, x):
        return self._solve(x, False)

    def _rmv(self, x):
        return self._solve(x, True)

    def _probe_residual(self) -> float:
        g = np.random.Generator(np.random.Philox(key=[7, 11]))
        b = np.hstack([g.uniform(-1, 1, (self.domain.size, 2)), np.ones((self.domain.size, 1))])
        r1 = np.max(np.abs(self.apply_system(self._solve(b)) - b))
        r2 = np.max(np.abs(self.apply_system(self._solve(b, True), True) - b))
        return float(max(r1, r2))


class CommutatorOp(Operator):
    """K_nu = [d_nu, W] on the fine lattice."""

    def __init__(self, W: Operator, nu: int):
        self.W = W
        self.nu = nu
        self.domain = self.codomain = W.domain
        self.d = diff_matrix(W.domain, nu)

    def _mv(self, x):
        return self.d @ self.W._mv(x) - self.W._mv(self.d @ x)

    def _rmv(self, x):
        # the adjoint of d is d^T on a single lattice
        return self.W._rmv(self.d.T @ x) - self.d.T @ self.W._rmv(x)


class ModelOperators:
    """The operator web at step n: Q_n, Q_n^*, fQ_n, D_n, W = Q_n^* fQ_n Q_n and resolvents.

    :param params: lattice parameters
    :param n: step index (fine lattice X_n, unit lattice X_0^(n))
    :param a: Gaussian averaging constant
    :param p: profile order of the block average
    :param h0: scalar exponent in the time-derivative prefactor (0 by default)
    :param fq: optional user kernel for fQ_n
    :param method: resolvent method, ``"woodbury"`` or ``"direct"``
    """

    def __init__(self, params, n: int, a: float = 1.0, p: int = 1, h0: float = 0.0,
                 fq: KernelOperator | None = None, method: str = "woodbury"):
        if a <= 0:
            raise ConfigError("a must be positive")
        self.params, self.n, self.a, self.p, self.h0 = params, n, float(a), p, float(h0)
        self.method = method
        self.fine = fine_lattice(params, n)
        self.unit = unit_lattice(params, n)
        self.an = a_n(a, params.L, n)
        self.Qn = compose_Qn(params, n, p)
        self.Qn_adj = self.Qn.adjoint
        self.fq = make_fqn(params, n, a, fq)
        self.Dn = make_Dn(params, n, h0)
        self.QadjF = ProductOp(self.Qn_adj, self.fq)
        self._U = Chain(self.Qn_adj, self.fq)
        self._Vt = Chain(self.Qn)
        self.W = LowRankOp(self.fine, self._U, self._Vt)
        self._resolvents = {}

    @property
    def block(self):
        return tuple(u // f for u, f in zip(self.unit.stride, self.fine.stride))

    def resolvent(self, mu: float = 0.0) -> Resolvent:
        mu = float(mu)
        if mu not in self._resolvents:
            self._resolvents[mu] = Resolvent(self.fine, self.Dn, self._U, self._Vt, mu,
                                             h0=self.h0, method=self.method, block=self.block)
        return self._resolvents[mu]

    def commutator(self, nu: int) -> CommutatorOp:
        return CommutatorOp(self.W, nu)

    def b_operator_D(self, mu: float, sign: str = "-") -> Operator:
        """B_{n,mu,D}^(-) = [1 - (W - mu) S(mu)] Q^* fQ, and (+) with S(mu)^*."""
        S = self.resolvent(mu)
        S = S if sign == "-" else S.T
        W = self.W if sign == "-" else self.W.T
        QF = self.QadjF if sign == "-" else ProductOp(self.Qn_adj, self.fq.T)
        I = IdentityOp(self.fine)
        return (I - (W - mu * I) @ S) @ QF

    def sn_norm_threshold(self, m: float, mus) -> dict:
        """||S(mu)||_m for each mu and the largest |mu| below which ||S(mu)||_m <= 2 ||S(0)||_m."""
        base = kernel_norm(self.resolvent(0.0), m)
        norms = {float(mu): kernel_norm(self.resolvent(mu), m) for mu in mus}
        bad = [abs(mu) for mu, v in norms.items() if v > 2 * base]
        ok = [abs(mu) for mu, v in norms.items() if v <= 2 * base and (not bad or abs(mu) < min(bad))]
        return {"norm_S0": base, "norms": norms, "threshold": max(ok, default=0.0)}


@lru_cache(maxsize=8)
def model_operators(params, n: int, a: float = 1.0, p: int = 1, h0: float = 0.0) -> ModelOperators:
    """Shared ModelOperators for the default fQ_n; resolvents are cached inside."""
    return ModelOperators(params, n, a=a, p=p, h0=h0)
