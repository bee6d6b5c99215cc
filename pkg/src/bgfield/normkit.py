"""Tree-length weighted kernel norms and power-series field maps on tiny lattices.

A field map F(psi_1, ..., psi_s)(y) is represented by the coefficients of its
monomials.  For a multi-degree r = (r_1, ..., r_s) and a monomial given by
multisets of points per slot, the monomial coefficient c relates to the
symmetric kernel of the power series by

    c(y) = (prod_i vol_i^{r_i}) * (number of orderings) * phi_r(y; x_1, ..., x_s)
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations_with_replacement, product
from math import factorial, prod
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree

from .lattice import ConfigError, Lattice, TorusMetric


class IllConditionedError(RuntimeError):
    """Sampling matrix for coefficient extraction is too ill-conditioned."""


# tree length

def _dedupe(pts):
    pts = np.asarray(pts)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("tree_length needs at least one point")
    return np.unique(pts, axis=0)


def _prim_length(D: np.ndarray) -> float:
    """MST length of a small dense distance matrix (Prim, O(k^2))."""
    k = len(D)
    best = D[0].astype(float).copy()
    used = np.zeros(k, dtype=bool)
    used[0] = True
    tot = 0.0
    for _ in range(k - 1):
        i = int(np.argmin(np.where(used, np.inf, best)))
        tot += best[i]
        used[i] = True
        best = np.minimum(best, D[i])
    return float(tot)


def tree_length(points, metric: TorusMetric, steiner_lattice: Lattice | None = None,
                steiner_budget: int = 20000) -> float:
    """Length of a short tree containing ``points`` (integer coordinates).

    Minimum spanning tree length under the torus metric.  For three distinct
    points and a ``steiner_lattice`` of at most ``steiner_budget`` points the
    exact optimum over one extra Steiner vertex on that lattice is returned
    (a three-terminal Steiner tree has at most one Steiner vertex).
    """
    pts = _dedupe(points)
    k = len(pts)
    if k == 1:
        return 0.0
    if k == 2:
        return float(metric(pts[0], pts[1]))
    D = metric.pairwise(pts)
    mst = _prim_length(D)
    if k == 3 and steiner_lattice is not None and steiner_lattice.size <= steiner_budget:
        cand = steiner_lattice.points
        s = sum(metric(cand, p) for p in pts)
        return float(min(mst, np.min(s)))
    return mst


def steiner_length_bruteforce(points, lattice: Lattice) -> float:
    """Exact Steiner length over ``lattice`` vertices for three points (test oracle)."""
    pts = _dedupe(points)
    met = lattice.metric
    if len(pts) < 3:
        return tree_length(pts, met)
    if len(pts) != 3:
        raise ValueError("brute force is implemented for three points")
    best = np.inf
    for s in lattice.points:
        best = min(best, sum(float(met(s, p)) for p in pts))
    D = met.pairwise(pts)
    return float(min(best, minimum_spanning_tree(D).sum()))


# kernels

@dataclass
class MultiKernel:
    """Degree-``degree`` part of a field map, as monomial coefficients.

    :param codomain: output lattice Y
    :param args: argument lattice per slot
    :param degree: multi-degree (r_1, ..., r_s)
    :param monomials: per monomial, a tuple of sorted point-index tuples (one per slot)
    :param coef: array (number of monomials, |Y|) of monomial coefficients
    """

    codomain: Lattice
    args: tuple
    degree: tuple
    monomials: list
    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=np.complex128).reshape(len(self.monomials), self.codomain.size)
        for mono in self.monomials:
            if tuple(len(s) for s in mono) != tuple(self.degree):
                raise ValueError(f"monomial {mono} does not have degree {self.degree}")
            if any(tuple(sorted(s)) != tuple(s) for s in mono):
                raise ValueError("monomial index tuples must be sorted")

    @property
    def total_degree(self) -> int:
        return int(sum(self.degree))

    def orderings(self, mono) -> int:
        return prod(factorial(len(s)) // prod(factorial(c) for c in Counter(s).values()) for s in mono)

    def kernel_value(self, y: int, xs: Sequence[Sequence[int]]) -> complex:
        """phi_r(y; x_1, ..., x_s) for ordered argument tuples (symmetric by construction)."""
        key = tuple(tuple(sorted(x)) for x in xs)
        try:
            i = self.monomials.index(key)
        except ValueError:
            return 0.0
        vol = prod(lat.vol ** r for lat, r in zip(self.args, self.degree))
        return complex(self.coef[i, y] / (vol * self.orderings(key)))

    def evaluate(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        """Sum over monomials of c(y) prod psi(x); inputs are (|X_i|,) or (|X_i|, batch)."""
        batch = np.asarray(inputs[0]).shape[1:] if len(inputs) else ()
        out = np.zeros((self.codomain.size,) + batch, dtype=np.complex128)
        for i, mono in enumerate(self.monomials):
            term = np.ones(batch, dtype=np.complex128)
            for slot, idx in enumerate(mono):
                for x in idx:
                    term = term * np.asarray(inputs[slot])[x]
            out += np.multiply.outer(self.coef[i], term)
        return out

    def scaled(self, c) -> "MultiKernel":
        return MultiKernel(self.codomain, self.args, self.degree, list(self.monomials), c * self.coef)

    def _taus(self, m: float):
        if m == 0:
            return np.zeros((len(self.monomials), self.codomain.size))
        # tree lengths do not depend on m; computed once per kernel
        cached = getattr(self, "_tau_cache", None)
        if cached is not None:
            return cached
        ypts = self.codomain.points
        met = self.codomain.metric
        out = np.empty((len(self.monomials), self.codomain.size))
        for i, mono in enumerate(self.monomials):
            xp = [self.args[s].points[x] for s, idx in enumerate(mono) for x in idx]
            xp = np.asarray(xp).reshape(-1, 4)
            for y in range(self.codomain.size):
                out[i, y] = tree_length(np.vstack([ypts[y][None, :], xp]), met)
        self._tau_cache = out
        return out


def kernel_tree_norm(k: MultiKernel, m: float = 0.0) -> float:
    """max(L_m, R_m) of the degree-r kernel, with the e^{m tau} weights."""
    if not k.monomials:
        return 0.0
    for a in k.args:
        if not a.same_torus(k.codomain):
            raise ValueError("argument and codomain lattices must share a torus")
    w = np.abs(k.coef) * np.exp(m * k._taus(m))
    Lm = float(np.max(np.sum(w, axis=0)))
    if k.total_degree == 0:
        return Lm
    volY = k.codomain.vol
    Rm = 0.0
    for j, rj in enumerate(k.degree):
        if rj == 0:
            continue
        acc = np.zeros(k.args[j].size)
        for i, mono in enumerate(k.monomials):
            for x, cnt in Counter(mono[j]).items():
                acc[x] += volY * np.sum(w[i]) / k.args[j].vol * cnt / rj
        Rm = max(Rm, float(acc.max()))
    return max(Lm, Rm)


def tree_norm(f: np.ndarray, lattice: Lattice, m: float = 0.0) -> float:
    """||f(x_1..x_r)||_m for f given as an r-dimensional array over ``lattice``.

    max over the pinned position i and point x of vol * sum_{x_i = x} |f| e^{m tau}.
    """
    f = np.asarray(f)
    r = f.ndim
    N = lattice.size
    if any(s != N for s in f.shape):
        raise ValueError("array axes must all have the lattice size")
    w = np.abs(f)
    if m:
        pts = lattice.points
        tau = np.empty(f.shape)
        for idx in np.ndindex(*f.shape):
            tau[idx] = tree_length(pts[list(idx)], lattice.metric)
        w = w * np.exp(m * tau)
    best = 0.0
    for i in range(r):
        other = tuple(a for a in range(r) if a != i)
        s = w.sum(axis=other) if other else w
        best = max(best, float(s.max()))
    return lattice.vol * best


# norm context and field-map norms

@dataclass
class NormContext:
    """Mass and weight factors.  ``weights`` maps slot names to weight factors."""

    m: float
    weights: dict = field(default_factory=dict)
    m_bar: float | None = None

    def __post_init__(self):
        if not self.m > 0:
            raise ConfigError("mass m must be positive")
        if self.m_bar is not None and not self.m_bar > self.m:
            raise ConfigError("m_bar must exceed m")
        for k, v in self.weights.items():
            if v < 1:
                raise ConfigError(f"weight factor {k} must be >= 1, got {v}")


@dataclass
class FieldMapSeries:
    """Truncated power series of a field map with one output field."""

    kernels: list
    slots: tuple
    d_max: int
    evaluator: Callable | None = None

    def evaluate(self, inputs) -> np.ndarray:
        out = None
        for k in self.kernels:
            v = k.evaluate(inputs)
            out = v if out is None else out + v
        return out

    def part(self, degrees) -> "FieldMapSeries":
        """Sub-series of the kernels whose total degree lies in ``degrees``."""
        ks = [k for k in self.kernels if k.total_degree in set(degrees)]
        return FieldMapSeries(ks, self.slots, self.d_max, None)

    def __sub__(self, other: "FieldMapSeries") -> "FieldMapSeries":
        return _combine(self, other, -1.0)

    def __add__(self, other):
        return _combine(self, other, 1.0)


def _combine(a: FieldMapSeries, b: FieldMapSeries, sign) -> FieldMapSeries:
    by = {}
    for k in a.kernels:
        by[k.degree] = {m: c.copy() for m, c in zip(k.monomials, k.coef)}
    proto = {k.degree: k for k in a.kernels + b.kernels}
    for k in b.kernels:
        d = by.setdefault(k.degree, {})
        for m, c in zip(k.monomials, k.coef):
            d[m] = d.get(m, 0) + sign * c
    ks = []
    for deg, d in by.items():
        p = proto[deg]
        monos = sorted(d)
        ks.append(MultiKernel(p.codomain, p.args, deg, monos, np.array([d[m] for m in monos])))
    return FieldMapSeries(ks, a.slots, max(a.d_max, b.d_max), None)


def field_map_norm(s: FieldMapSeries, ctx: NormContext, weights: Sequence[float] | None = None,
                   degrees=None):
    """Sum over multi-degrees of kernel_tree_norm times prod kappa_i^{r_i}.

    Weight factors come from ``weights`` (one per slot) or from ``ctx.weights``
    keyed by the slot names.  Returns ``(value, records)`` where the records
    are ``{degree, kernel_norm, weight, contribution}`` dicts; the truncation
    degree is ``s.d_max``.
    """
    if weights is None:
        weights = [ctx.weights[name] for name in s.slots]
    total = 0.0
    records = []
    for k in sorted(s.kernels, key=lambda k: k.degree):
        if k.total_degree > s.d_max or (degrees is not None and k.total_degree not in degrees):
            continue
        kn = kernel_tree_norm(k, ctx.m)
        w = float(prod(kap**r for kap, r in zip(weights, k.degree)))
        total += kn * w
        records.append({"degree": list(k.degree), "kernel_norm": kn, "weight": w, "contribution": kn * w})
    return total, records


def records_json(records) -> str:
    return json.dumps(records, sort_keys=True, indent=1)


# extraction

def _multidegrees(total, slots):
    if slots == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _multidegrees(total - first, slots - 1):
            yield (first,) + rest


def _monomials(deg, sizes):
    per = [list(combinations_with_replacement(range(N), r)) for N, r in zip(sizes, deg)]
    return [tuple(m) for m in product(*per)]


def extract_series(fmap: Callable, args: Sequence[Lattice], codomain: Lattice | Sequence[Lattice],
                   degrees=range(1, 6), slots: Sequence[str] | None = None, rho: float = 0.5,
                   amplitudes=None, oversample: float = 2.0, seed: int = 0, max_points: int = 32,
                   cond_limit: float = 1e8, check: bool = True):
    """Recover the monomial coefficients of ``fmap`` up to the largest requested degree.

    ``fmap`` takes a list of input arrays of shape (|X_i|, batch) and returns
    an array (|Y|, batch) or a list of such arrays (one series is returned per
    output).  Homogeneous parts are separated by evaluating along complex
    amplitudes t (default: ``rho`` times the K-th roots of unity, which
    separates degrees modulo K) and solving the amplitude Vandermonde system.
    Each homogeneous part is then resolved into monomials by sampling the map on
    random combinations sum_x z_x delta_x with |z_x| = 1 and solving for the
    coefficients by least squares.

    :raises IllConditionedError: if the amplitude or sampling system is ill-conditioned
    """
    degrees = sorted(set(int(d) for d in degrees))
    if degrees[0] < 0 or degrees[-1] > 5:
        raise ConfigError("extraction supports degrees 0..5")
    sizes = [a.size for a in args]
    cods = [codomain] if isinstance(codomain, Lattice) else list(codomain)
    if sum(sizes) > 2 * max_points or any(s > max_points for s in sizes + [c.size for c in cods]):
        raise ConfigError(f"extraction is limited to lattices of at most {max_points} points")
    slots = tuple(slots) if slots is not None else tuple(f"x{i}" for i in range(len(args)))
    dmax = degrees[-1]
    # amplitudes
    if amplitudes is None:
        K = 2 * dmax + 6
        t = rho * np.exp(2j * np.pi * np.arange(K) / K)
        sep_deg = np.arange(K)
    else:
        t = np.asarray(amplitudes, dtype=np.complex128)
        K = len(t)
        sep_deg = np.arange(K)
        if K <= dmax:
            raise ConfigError("need more amplitudes than the largest degree")
    Vt = t[:, None] ** sep_deg[None, :]
    cv = np.linalg.cond(Vt)
    if not np.isfinite(cv) or cv > 1e12:
        raise IllConditionedError(f"amplitude Vandermonde condition {cv:.2e}; amplitudes too close")
    # monomial bases per degree
    bases = {}
    for d in degrees:
        for deg in _multidegrees(d, len(args)):
            bases.setdefault(d, []).extend((deg, m) for m in _monomials(deg, sizes))
    nmax = max(len(v) for v in bases.values())
    P = int(np.ceil(oversample * nmax)) + 8
    g = np.random.Generator(np.random.Philox(key=[seed, 2024]))
    Z = [np.exp(2j * np.pi * g.uniform(0, 1, (N, P))) for N in sizes]
    # evaluate along all amplitudes in one batch
    batch = [np.concatenate([tk * z for tk in t], axis=1) for z in Z]
    out = fmap(batch)
    multi = isinstance(out, (list, tuple))
    outs = list(out) if multi else [out]
    series = []
    for o, cod in zip(outs, cods if len(cods) == len(outs) else cods * len(outs)):
        o = np.asarray(o).reshape(cod.size, K, P)
        # homogeneous parts H[d] (|Y|, P)
        H = np.linalg.solve(Vt, np.moveaxis(o, 1, 0).reshape(K, -1)).reshape(K, cod.size, P)
        kernels = []
        for d in degrees:
            monos = bases[d]
            A = np.ones((P, len(monos)), dtype=np.complex128)
            for j, (deg, mono) in enumerate(monos):
                for slot, idx in enumerate(mono):
                    for x in idx:
                        A[:, j] *= Z[slot][x]
            ca = np.linalg.cond(A)
            if not np.isfinite(ca) or ca > cond_limit:
                raise IllConditionedError(f"sampling matrix condition {ca:.2e} at degree {d}")
            coef, *_ = np.linalg.lstsq(A, H[d].T, rcond=None)
            bydeg = {}
            for (deg, mono), c in zip(monos, coef):
                bydeg.setdefault(deg, ([], []))
                bydeg[deg][0].append(mono)
                bydeg[deg][1].append(c)
            for deg, (ms, cs) in bydeg.items():
                kernels.append(MultiKernel(cod, tuple(args), deg, ms, np.array(cs)))
        series.append(FieldMapSeries(kernels, slots, dmax, fmap))
    return series if multi else series[0]


def reconstruction_error(s: FieldMapSeries, fmap: Callable, sizes, scale: float = 0.05, seed: int = 1,
                         samples: int = 4, index: int | None = None) -> float:
    """sup |series - map| on random inputs of sup norm ``scale``."""
    g = np.random.Generator(np.random.Philox(key=[seed, 77]))
    ins = [scale * (g.uniform(-1, 1, (N, samples)) + 1j * g.uniform(-1, 1, (N, samples))) / np.sqrt(2)
           for N in sizes]
    ref = fmap(ins)
    if index is not None:
        ref = ref[index]
    return float(np.max(np.abs(s.evaluate(ins) - ref)))
