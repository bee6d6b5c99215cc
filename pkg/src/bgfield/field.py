"""Complex fields on lattices: bilinear pairing, translations, differences, I/O."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .lattice import Lattice

BINARY_MAGIC = b"BGFD"


class Field:
    """A complex value per lattice point, flat in the lattice's C order."""

    __slots__ = ("lattice", "values")

    def __init__(self, lattice: Lattice, values):
        vals = np.asarray(values, dtype=np.complex128).reshape(-1)
        if vals.size != lattice.size:
            raise ValueError(f"expected {lattice.size} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        self.lattice = lattice
        self.values = vals

    # construction
    @classmethod
    def zeros(cls, lattice):
        return cls(lattice, np.zeros(lattice.size))

    @classmethod
    def constant(cls, lattice, c):
        return cls(lattice, np.full(lattice.size, c, dtype=np.complex128))

    @classmethod
    def delta(cls, lattice, point):
        v = np.zeros(lattice.size, dtype=np.complex128)
        v[lattice.index_of(point)] = 1.0
        return cls(lattice, v)

    @classmethod
    def from_function(cls, lattice, fn):
        """``fn`` receives the (size, 4) physical coordinates."""
        return cls(lattice, fn(lattice.physical()))

    @classmethod
    def random(cls, lattice, seed: int, stream: int = 0, real: bool = False, scale: float = 1.0):
        """Reproducible random field from the Philox counter-based generator.

        Values are uniform in [-1, 1) (real and imaginary parts drawn in that
        order) times ``scale``.
        """
        g = np.random.Generator(np.random.Philox(key=[seed, stream]))
        re = g.uniform(-1.0, 1.0, lattice.size)
        im = np.zeros(lattice.size) if real else g.uniform(-1.0, 1.0, lattice.size)
        return cls(lattice, scale * (re + 1j * im))

    # array views
    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.lattice.shape)

    def new(self, values) -> "Field":
        return Field(self.lattice, values)

    def _check(self, other):
        if isinstance(other, Field) and other.lattice != self.lattice:
            raise ValueError(f"lattice mismatch: {self.lattice} vs {other.lattice}")

    def _val(self, other):
        self._check(other)
        return other.values if isinstance(other, Field) else other

    def __add__(self, o):
        return self.new(self.values + self._val(o))

    __radd__ = __add__

    def __sub__(self, o):
        return self.new(self.values - self._val(o))

    def __rsub__(self, o):
        return self.new(self._val(o) - self.values)

    def __mul__(self, o):
        return self.new(self.values * self._val(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        return self.new(self.values / self._val(o))

    def __neg__(self):
        return self.new(-self.values)

    def conj(self) -> "Field":
        return self.new(np.conj(self.values))

    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __repr__(self):
        return f"Field({self.lattice}, sup={self.sup():.3g})"


def inner_product(f: Field, g: Field) -> complex:
    """<f, g>_j = vol * sum f g, bilinear (no conjugation)."""
    f._check(g)
    return complex(f.lattice.vol * np.sum(f.values * g.values))


def translate(f: Field, nu: int, sign: int = 1) -> Field:
    """T_nu^{sign}.  T_nu^{-1} g (x) = g(x + e_nu), T_nu g (x) = g(x - e_nu)."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return f.new(np.roll(f.grid, sign, axis=nu).ravel())


def _spacing(f: Field, nu: int, divided: bool) -> float:
    return f.lattice.spacing[nu] if divided else 1.0


def forward_diff(f: Field, nu: int, divided: bool = True) -> Field:
    """(d_nu f)(x) = (f(x + e_nu) - f(x)) / eps_nu."""
    g = f.grid
    return f.new(((np.roll(g, -1, axis=nu) - g) / _spacing(f, nu, divided)).ravel())


def backward_diff(f: Field, nu: int, divided: bool = True) -> Field:
    """(f(x) - f(x - e_nu)) / eps_nu."""
    g = f.grid
    return f.new(((g - np.roll(g, 1, axis=nu)) / _spacing(f, nu, divided)).ravel())


def diff_adjoint(f: Field, nu: int, divided: bool = True) -> Field:
    """Adjoint of forward_diff for <.,.>_j, i.e. minus the backward difference."""
    return -backward_diff(f, nu, divided)


def product_rule_rhs(f: Field, g: Field, nu: int) -> Field:
    """(d f)(T^{-1} g) + f d g, equal to d(f g)."""
    return forward_diff(f, nu) * translate(g, nu, -1) + f * forward_diff(g, nu)


def triple_rule_rhs(f: Field, g: Field, h: Field, nu: int) -> Field:
    """(d f)(T^{-1} g)(T^{-1} h) + f (d g)(T^{-1} h) + f g (d h), equal to d(f g h)."""
    Tg, Th = translate(g, nu, -1), translate(h, nu, -1)
    return forward_diff(f, nu) * Tg * Th + f * forward_diff(g, nu) * Th + f * g * forward_diff(h, nu)


def symmetric_triple_rule_rhs(f: Field, g: Field, nu: int) -> Field:
    """(d f)(T^{-1} g)(T^{-1} f) + f (T^{-1} g)(d f) + f (d g) f, equal to d(f g f)."""
    df, Tg, Tf = forward_diff(f, nu), translate(g, nu, -1), translate(f, nu, -1)
    return df * Tg * Tf + f * Tg * df + f * forward_diff(g, nu) * f


# serialization

def to_csv(f: Field, path) -> None:
    """Rows ``t,x1,x2,x3,re,im`` with integer coordinates."""
    pts = f.lattice.points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x1", "x2", "x3", "re", "im"])
        for p, v in zip(pts, f.values):
            w.writerow([int(p[0]), int(p[1]), int(p[2]), int(p[3]), repr(float(v.real)), repr(float(v.imag))])


def from_csv(lattice: Lattice, path) -> Field:
    vals = np.zeros(lattice.size, dtype=np.complex128)
    seen = np.zeros(lattice.size, dtype=bool)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            i = lattice.index_of([int(x) for x in row[:4]])
            vals[i] = float(row[4]) + 1j * float(row[5])
            seen[i] = True
    if not seen.all():
        raise ValueError("CSV does not cover every lattice point")
    return Field(lattice, vals)


def to_binary(f: Field, path) -> None:
    """Little-endian layout: magic ``BGFD``, four uint32 axis sizes, then
    ``size`` pairs of float64 (re, im) in C order of the axis sizes."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<4I", *f.lattice.shape))
        fh.write(np.ascontiguousarray(f.values).astype("<c16").tobytes())


def from_binary(lattice: Lattice, path) -> Field:
    data = Path(path).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise ValueError("bad magic")
    dims = struct.unpack("<4I", data[4:20])
    if tuple(dims) != tuple(lattice.shape):
        raise ValueError(f"dims {dims} do not match lattice shape {lattice.shape}")
    vals = np.frombuffer(data[20:], dtype="<c16")
    return Field(lattice, vals.copy())
