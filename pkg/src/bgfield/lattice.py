"""Anisotropic periodic lattices X_j^(n-j), their metric, and parabolic scaling.

A lattice with scale index ``j`` and ``k = n - j`` remaining steps lives on
the step-``n`` torus.  Points are stored as integer 4-tuples in units of the
finest spacing of that torus (``L^-2n`` in time, ``L^-n`` in space), so every
lattice on the step-``n`` torus shares the integer box
``[0, L_tp) x [0, L_sp)^3`` and only the stride differs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for inconsistent lattice or model parameters."""


METRICS = ("euclidean", "taxicab")


@dataclass(frozen=True)
class LatticeParams:
    """Global lattice data.

    :param L: odd scaling base, at least 3
    :param L_tp: temporal extent of the fine integer box
    :param L_sp: spatial extent of the fine integer box
    :param n_steps: largest step index that may be constructed
    :param spatial_dims: number of active spatial axes; fewer than 3 gives a
        reduced lattice whose inactive axes have extent 1
    :param metric: ``"euclidean"`` or ``"taxicab"`` torus distance
    """

    L: int
    L_tp: int
    L_sp: int
    n_steps: int = 1
    spatial_dims: int = 3
    metric: str = "euclidean"

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 3 or self.L % 2 == 0:
            raise ConfigError(f"L must be an odd integer >= 3, got {self.L}")
        for name in ("L_tp", "L_sp"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if self.spatial_dims not in (0, 1, 2, 3):
            raise ConfigError("spatial_dims must be 0, 1, 2 or 3")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")

    @property
    def scaling_power(self) -> float:
        """Exponent of L in the field scaling map (3/2 for three spatial axes)."""
        return self.spatial_dims / 2.0

    @property
    def box(self) -> tuple:
        d = self.spatial_dims
        return (self.L_tp,) + tuple(self.L_sp if i < d else 1 for i in range(3))

    def max_steps_remaining(self) -> int:
        """Largest k with L^{2k} | L_tp and L^k | L_sp (active axes)."""
        k = 0
        while self._divides(k + 1):
            k += 1
        return k

    def _divides(self, k: int) -> bool:
        L = self.L
        if self.L_tp % L ** (2 * k):
            return False
        if self.spatial_dims > 0 and self.L_sp % L**k:
            return False
        return True


class TorusMetric:
    """Distance on the step-n torus, acting on integer coordinates."""

    def __init__(self, box: Sequence[int], unit: Sequence[float], kind: str = "euclidean"):
        self.box = np.asarray(box, dtype=np.int64)
        self.unit = np.asarray(unit, dtype=float)
        if kind not in METRICS:
            raise ConfigError(f"unknown metric {kind!r}")
        self.kind = kind

    @property
    def extent(self) -> np.ndarray:
        """Physical side lengths."""
        return self.box * self.unit

    def axis_gaps(self, u, v) -> np.ndarray:
        diff = np.abs(np.asarray(u, dtype=float) - np.asarray(v, dtype=float))
        diff = np.mod(diff, self.box)
        return np.minimum(diff, self.box - diff) * self.unit

    def __call__(self, u, v):
        g = self.axis_gaps(u, v)
        if self.kind == "euclidean":
            return np.sqrt(np.sum(g * g, axis=-1))
        return np.sum(g, axis=-1)

    def pairwise(self, pts) -> np.ndarray:
        pts = np.asarray(pts)
        return self(pts[:, None, :], pts[None, :, :])


class Lattice:
    """The lattice X_j^(k) on the step-(j+k) torus.  Immutable."""

    def __init__(self, params: LatticeParams, scale_j: int, steps_remaining: int):
        self.params = params
        self.scale_j = int(scale_j)
        self.steps_remaining = int(steps_remaining)
        L, k, j = params.L, self.steps_remaining, self.scale_j
        d = params.spatial_dims
        self.stride = (L ** (2 * k),) + tuple(L**k if i < d else 1 for i in range(3))
        self.shape = tuple(b // s for b, s in zip(params.box, self.stride))
        self.spacing = (float(L) ** (-2 * j),) + tuple(
            float(L) ** (-j) if i < d else 1.0 for i in range(3)
        )
        self.vol = float(L) ** (-(2 + d) * j)
        n = self.step
        unit = (float(L) ** (-2 * n),) + tuple(float(L) ** (-n) if i < d else 1.0 for i in range(3))
        self.metric = TorusMetric(params.box, unit, params.metric)

    @property
    def step(self) -> int:
        return self.scale_j + self.steps_remaining

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def active_axes(self) -> tuple:
        return tuple(range(1 + self.params.spatial_dims))

    @cached_property
    def points(self) -> np.ndarray:
        """(size, 4) integer coordinates in C order of ``shape``."""
        idx = np.indices(self.shape).reshape(4, -1).T
        pts = idx * np.asarray(self.stride)
        pts.setflags(write=False)
        return pts

    def physical(self, pts=None) -> np.ndarray:
        pts = self.points if pts is None else np.asarray(pts)
        return pts * self.metric.unit

    def index_of(self, point) -> int:
        p = np.asarray(point, dtype=np.int64) % np.asarray(self.params.box)
        q, r = np.divmod(p, self.stride)
        if np.any(r):
            raise ValueError(f"point {tuple(point)} is not on {self}")
        return int(np.ravel_multi_index(tuple(q), self.shape))

    def same_torus(self, other: "Lattice") -> bool:
        return self.params == other.params and self.step == other.step

    def refines(self, other: "Lattice") -> bool:
        """True if every point of ``other`` is a point of ``self``."""
        return self.same_torus(other) and self.steps_remaining <= other.steps_remaining

    def key(self) -> tuple:
        return (self.params, self.scale_j, self.steps_remaining)

    def __eq__(self, other):
        return isinstance(other, Lattice) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Lattice(j={self.scale_j}, k={self.steps_remaining}, shape={self.shape})"


def make_lattice(params: LatticeParams, scale_j: int, steps_remaining: int) -> Lattice:
    """Construct X_j^(k), validating divisibility and the step budget."""
    if steps_remaining < 0:
        raise ConfigError("steps_remaining must be >= 0")
    n = scale_j + steps_remaining
    if n < 0 or n > params.n_steps:
        raise ConfigError(f"step {n} outside the budget 0..{params.n_steps}")
    L, k = params.L, steps_remaining
    if params.L_tp % L ** (2 * k):
        raise ConfigError(f"temporal axis: L_tp={params.L_tp} not divisible by L^{2 * k}={L ** (2 * k)}")
    if params.spatial_dims > 0 and params.L_sp % L**k:
        raise ConfigError(f"spatial axis: L_sp={params.L_sp} not divisible by L^{k}={L**k}")
    return Lattice(params, scale_j, steps_remaining)


def fine_lattice(params: LatticeParams, n: int) -> Lattice:
    """X_n = X_n^(0)."""
    return make_lattice(params, n, 0)


def unit_lattice(params: LatticeParams, n: int) -> Lattice:
    """X_0^(n)."""
    return make_lattice(params, 0, n)


def _nearest_axis(c, stride, box):
    """Nearest multiple of ``stride`` to ``c`` on a circle of length ``box``."""
    c = np.asarray(c, dtype=float)
    lo = np.floor(c / stride) * stride
    hi = lo + stride
    d_lo = np.abs(c - lo)
    d_hi = np.abs(hi - c)
    lo_m = np.mod(lo, box)
    hi_m = np.mod(hi, box)
    pick_lo = (d_lo < d_hi) | ((d_lo == d_hi) & (lo_m <= hi_m))
    return np.where(pick_lo, lo_m, hi_m).astype(np.int64)


def nearest_unit_point(fine: Lattice, unit: Lattice, u) -> tuple:
    """X(u): the point of ``unit`` nearest to ``u``.

    Ties go to the lexicographically smallest coordinate tuple.  Both supported
    metrics are separable over axes, so the per-axis choice is exact.
    """
    if not fine.same_torus(unit):
        raise ValueError("lattices live on different tori")
    u = np.mod(np.asarray(u, dtype=float), fine.params.box)
    out = [int(_nearest_axis(u[a], unit.stride[a], fine.params.box[a])) for a in range(4)]
    return tuple(out)


def nearest_unit_indices(fine: Lattice, unit: Lattice) -> np.ndarray:
    """Index in ``unit`` of X(u) for every point u of ``fine``."""
    if not fine.same_torus(unit):
        raise ValueError("lattices live on different tori")
    pts = fine.points
    cols = []
    for a in range(4):
        c = _nearest_axis(pts[:, a], unit.stride[a], fine.params.box[a])
        cols.append(c // unit.stride[a])
    return np.ravel_multi_index(tuple(cols), unit.shape)


def scaled_lattice(lat: Lattice, direction: str) -> Lattice:
    """Target lattice of the scaling map: finer (j+1) or coarser (j-1)."""
    if direction == "finer":
        return make_lattice(lat.params, lat.scale_j + 1, lat.steps_remaining)
    if direction == "coarser":
        return make_lattice(lat.params, lat.scale_j - 1, lat.steps_remaining)
    raise ValueError("direction must be 'finer' or 'coarser'")


def _relabel(f, target: Lattice, factor: float):
    from .field import Field

    return Field(target, f.values * factor)


def _check_target(f, direction, target):
    expect = scaled_lattice(f.lattice, direction)
    if target is not None and target != expect:
        raise ValueError(f"target {target} does not match the scaled lattice {expect}")
    return expect


def scale_field(f, direction: str = "finer", target: Lattice | None = None):
    """The scaling map S (``finer``) or its inverse (``coarser``).

    (S f)(x0, x) = L^{d/2} f(L^2 x0, L x).  Point indices are preserved, so only
    the lattice label and the amplitude change.
    """
    lat = _check_target(f, direction, target)
    p = f.lattice.params
    c = float(p.L) ** p.scaling_power
    return _relabel(f, lat, c if direction == "finer" else 1.0 / c)


def pullback_dilation(f, inverse: bool = False, target: Lattice | None = None):
    """(L_* f)(x) = f(x0 / L^2, x / L); ``inverse=True`` gives L_*^{-1}."""
    lat = _check_target(f, "finer" if inverse else "coarser", target)
    return _relabel(f, lat, 1.0)
