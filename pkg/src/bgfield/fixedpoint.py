"""Certified Picard solver for gamma = f(alpha) + L(alpha, gamma) + B(alpha, gamma).

The unknown is a tuple of arrays (one per slot).  Hypotheses of the
contraction argument are probed in sup norm on the concrete inputs:

    ||f_j|| + ||L_j|| + ||B_j|| <= lambda_j
    ||L_j|| + d_max ||B_j||      <= c lambda_j

where ||L_j||, ||B_j|| are sup-norm estimates of the maps on the ball
{ ||gamma_i||_inf <= lambda_i }.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

class HypothesisError(RuntimeError):
    """A contraction hypothesis probe failed."""


class ConvergenceError(RuntimeError):
    """Picard iteration did not reach the tolerance within the cap."""


def _sup(xs) -> list:
    return [float(np.max(np.abs(x))) if np.size(x) else 0.0 for x in xs]


@dataclass
class FixedPointProblem:
    """Evaluators for the three parts, each mapping a list of slot arrays to a list.

    :param f: constant part (already evaluated at the sources), list of arrays
    :param L: linear map gamma -> L(alpha, gamma)
    :param B: map gamma -> B(alpha, gamma), of degree 2..d_max in gamma
    :param d_max: largest degree of B
    :param contraction: declared contraction budget c in (0, 1)
    :param lam: weights lambda_j; default max_j sup|f_j| / (1 - c) for every slot
    :param LB: optional callable returning ``(L(g), B(g))`` in one pass, used
        instead of ``L`` and ``B`` when the two share expensive work
    """

    f: Sequence[np.ndarray]
    L: Callable
    B: Callable
    d_max: int = 3
    contraction: float = 0.5
    lam: Sequence[float] | None = None
    LB: Callable | None = None

    def __post_init__(self):
        self.f = [np.asarray(x) for x in self.f]
        if not 0 < self.contraction < 1:
            raise ValueError("contraction budget must lie in (0, 1)")

    @property
    def slots(self) -> int:
        return len(self.f)

    def weights(self) -> list:
        if self.lam is not None:
            return [float(x) for x in self.lam]
        top = max(max(_sup(self.f), default=0.0), 1e-300)
        return [top / (1.0 - self.contraction)] * self.slots

    def parts(self, g):
        if self.LB is not None:
            return self.LB(g)
        return self.L(g), self.B(g)

    def rhs(self, g):
        Lg, Bg = self.parts(g)
        return [fj + lj + bj for fj, lj, bj in zip(self.f, Lg, Bg)]


@dataclass
class SolveCertificate:
    iterations: int
    residual: list
    contraction_measured: float
    contraction_declared: float
    a_priori_bound: float
    solution_ratio: float
    probe_f: list = field(default_factory=list)
    probe_L: list = field(default_factory=list)
    probe_B: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    uniqueness_gap: float | None = None
    tol: float = 1e-12

    @property
    def ok(self) -> bool:
        return (max(self.residual, default=0.0) < self.tol
                and self.contraction_measured <= self.contraction_declared * (1 + 1e-9)
                and (self.uniqueness_gap is None or self.uniqueness_gap < 10 * self.tol))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def _probe_directions(shapes, dtypes, seed=0, count=3):
    g = np.random.Generator(np.random.Philox(key=[seed, 99]))
    dirs = []
    for k in range(count):
        d = []
        for shp, dt in zip(shapes, dtypes):
            if k == 0:
                v = np.ones(shp)
            elif k == 1:
                v = np.where(np.arange(int(np.prod(shp))).reshape(shp) % 2 == 0, 1.0, -1.0)
            else:
                v = g.uniform(-1, 1, shp)
                if np.issubdtype(dt, np.complexfloating):
                    v = v + 1j * g.uniform(-1, 1, shp)
                v = v / np.max(np.abs(v))
            d.append(v.astype(dt) if np.issubdtype(dt, np.complexfloating) else v)
        dirs.append(d)
    return dirs


def probe_hypotheses(p: FixedPointProblem, seed: int = 0, per_slot: bool = False) -> dict:
    """Sup-norm estimates of ||f_j||, ||L_j||, ||B_j|| on the lambda-ball.

    Probes use constant, alternating and random directions scaled to the
    boundary of the ball, jointly in all slots (and slot by slot if ``per_slot``).
    """
    lam = p.weights()
    shapes = [x.shape for x in p.f]
    dtypes = [np.result_type(x.dtype, np.complex128) for x in p.f]
    dirs = _probe_directions(shapes, dtypes, seed)
    Ln = [0.0] * p.slots
    Bn = [0.0] * p.slots
    for d in dirs:
        cand = [[lam[i] * d[i] for i in range(p.slots)]]
        if per_slot:
            for i in range(p.slots):
                cand.append([lam[k] * d[k] if k == i else np.zeros(shapes[k], dtype=dtypes[k])
                             for k in range(p.slots)])
        for g in cand:
            Lg, Bg = p.parts(g)
            Ln = [max(a, b) for a, b in zip(Ln, _sup(Lg))]
            Bn = [max(a, b) for a, b in zip(Bn, _sup(Bg))]
    fn = _sup(p.f)
    first = [fn[j] + Ln[j] + Bn[j] - lam[j] for j in range(p.slots)]
    second = [Ln[j] + p.d_max * Bn[j] - p.contraction * lam[j] for j in range(p.slots)]
    slack = 1e-12
    return {
        "f": fn, "L": Ln, "B": Bn, "lam": lam,
        "excess_first": first, "excess_second": second,
        "ok": all(e <= slack * l for e, l in zip(first, lam)) and all(e <= slack * l for e, l in zip(second, lam)),
    }


def _picard(p, start, tol, max_iter):
    """Iterate until the sup-norm step falls below ``tol``; returns (g, its, weighted steps)."""
    g = [np.array(x, dtype=np.result_type(x, np.complex128)) for x in start]
    lam = p.weights()
    diffs = []
    for it in range(1, max_iter + 1):
        new = p.rhs(g)
        steps = _sup([a - b for a, b in zip(new, g)])
        diffs.append(max(s / l for s, l in zip(steps, lam)))
        g = new
        if max(steps) < tol:
            return g, it, diffs
    raise ConvergenceError(f"no convergence in {max_iter} iterations (last step {diffs[-1]:.3e})")


def _measured_contraction(diffs, lam_max, tol):
    """Largest ratio of successive weighted steps above the rounding floor."""
    ratios = []
    for a, b in zip(diffs[:-1], diffs[1:]):
        if a * lam_max > 1e3 * tol and b * lam_max > 10 * tol:
            ratios.append(b / a)
    return max(ratios, default=0.0)


def solve(p: FixedPointProblem, tol: float = 1e-12, max_iter: int = 200, check: bool = True,
          uniqueness: bool = True, seed: int = 0):
    """Picard iteration from gamma = 0; returns (gamma, SolveCertificate).

    :raises HypothesisError: if ``check`` and a hypothesis probe fails
    :raises ConvergenceError: if the residual stays above ``tol``
    """
    probes = probe_hypotheses(p, seed) if check else None
    if check and not probes["ok"]:
        raise HypothesisError(
            "contraction hypotheses failed: "
            f"excess(f+L+B-lam)={probes['excess_first']}, excess(L+dB-c lam)={probes['excess_second']}")
    zero = [np.zeros_like(x, dtype=np.result_type(x, np.complex128)) for x in p.f]
    g, its, diffs = _picard(p, zero, tol, max_iter)
    lam = p.weights()
    resid = _sup([a - b for a, b in zip(p.rhs(g), g)])
    fz = _sup(p.f)
    bound = max(fj / lj for fj, lj in zip(fz, lam)) / (1 - p.contraction)
    ratio = max(gj / lj for gj, lj in zip(_sup(g), lam))
    gap = None
    if uniqueness:
        g2, _, _ = _picard(p, p.f, tol, max_iter)
        gap = max(_sup([a - b for a, b in zip(g, g2)]))
    cert = SolveCertificate(
        iterations=its, residual=resid,
        contraction_measured=_measured_contraction(diffs, max(lam), tol),
        contraction_declared=p.contraction, a_priori_bound=bound, solution_ratio=ratio,
        probe_f=probes["f"] if probes else [], probe_L=probes["L"] if probes else [],
        probe_B=probes["B"] if probes else [], weights=lam, uniqueness_gap=gap, tol=tol)
    log.debug("fixed point: %d iterations, residual %.2e", its, max(resid))
    return g, cert


def linear_part(p: FixedPointProblem, tol: float = 1e-12, max_iter: int = 200, check: bool = True):
    """Solve gamma = f + L(gamma) with B dropped."""

    def zero_B(g):
        return [np.zeros_like(x) for x in g]

    if p.LB is not None:
        def lin(g):
            return p.LB(g)[0]
    else:
        lin = p.L
    q = FixedPointProblem(p.f, lin, zero_B, d_max=p.d_max, contraction=p.contraction, lam=p.lam)
    return solve(q, tol, max_iter, check=check)


def structure_probes(p: FixedPointProblem, seed: int = 0, eps: float = 1e-4) -> dict:
    """Relative gaps certifying that L is linear and B has no constant or linear part.

    ``linearity``: sup |L(g + h) - L(g) - L(h)| + sup |L(2g) - 2 L(g)| relative to sup |L(g)|.
    ``B_zero``: sup |B(0)|.  ``B_linear``: sup |B(eps g)| / (eps sup |B(g)|), which is O(eps)
    when B starts at degree two.
    """
    lam = p.weights()
    shapes = [x.shape for x in p.f]
    dtypes = [np.result_type(x.dtype, np.complex128) for x in p.f]
    d = _probe_directions(shapes, dtypes, seed)
    g = [lam[i] * d[2][i] for i in range(p.slots)]
    h = [lam[i] * d[1][i] for i in range(p.slots)]
    Lg, Bg = p.parts(g)
    Lh, _ = p.parts(h)
    Lgh, _ = p.parts([a + b for a, b in zip(g, h)])
    L2g, _ = p.parts([2 * a for a in g])
    ref = max(max(_sup(Lg), default=0.0), 1e-300)
    lin = max(_sup([a - b - c for a, b, c in zip(Lgh, Lg, Lh)])) + max(_sup([a - 2 * b for a, b in zip(L2g, Lg)]))
    _, B0 = p.parts([np.zeros(s, dtype=t) for s, t in zip(shapes, dtypes)])
    _, Be = p.parts([eps * a for a in g])
    bref = max(max(_sup(Bg), default=0.0), 1e-300)
    return {"linearity": lin / ref, "B_zero": max(_sup(B0), default=0.0),
            "B_linear": max(_sup(Be), default=0.0) / (eps * bref)}
