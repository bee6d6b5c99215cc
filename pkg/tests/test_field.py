import numpy as np
import pytest
from hypothesis import given, strategies as st

from bgfield.field import (Field, backward_diff, diff_adjoint, forward_diff, from_binary, from_csv, inner_product,
                           product_rule_rhs, symmetric_triple_rule_rhs, to_binary, to_csv, translate,
                           triple_rule_rhs)
from bgfield.lattice import fine_lattice, unit_lattice

from conftest import SMALL2

FINE = fine_lattice(SMALL2, 1)
seeds = st.integers(0, 2**31 - 1)
axes = st.sampled_from([0, 1])


def _rel(a, b):
    return (a - b).sup() / max(1.0, a.sup(), b.sup())


@given(seeds, axes)
def test_product_rule(s, nu):
    f, g = Field.random(FINE, s, 0), Field.random(FINE, s, 1)
    assert _rel(forward_diff(f * g, nu), product_rule_rhs(f, g, nu)) < 1e-12


@given(seeds, axes)
def test_triple_rules(s, nu):
    f, g, h = (Field.random(FINE, s, k) for k in range(3))
    assert _rel(forward_diff(f * g * h, nu), triple_rule_rhs(f, g, h, nu)) < 1e-12
    assert _rel(forward_diff(f * g * f, nu), symmetric_triple_rule_rhs(f, g, nu)) < 1e-12


@given(seeds, axes)
def test_translate_inverse(s, nu):
    f = Field.random(FINE, s)
    assert np.array_equal(translate(translate(f, nu, 1), nu, -1).values, f.values)


@given(seeds, axes)
def test_diff_adjoint(s, nu):
    f, g = Field.random(FINE, s, 0), Field.random(FINE, s, 1)
    lhs = inner_product(forward_diff(f, nu), g)
    rhs = inner_product(f, diff_adjoint(g, nu))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_backward_is_translated_forward():
    f = Field.random(FINE, 5)
    assert _rel(backward_diff(f, 0), translate(forward_diff(f, 0), 0, 1)) < 1e-14


def test_inner_product_bilinear_no_conjugation():
    unit = unit_lattice(SMALL2, 1)
    f = Field.constant(unit, 1j)
    assert inner_product(f, f) == pytest.approx(-unit.size * unit.vol)


def test_random_determinism():
    a, b = Field.random(FINE, 11, 2), Field.random(FINE, 11, 2)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, Field.random(FINE, 11, 3).values)
    r = Field.random(FINE, 11, real=True)
    assert np.all(r.values.imag == 0) and r.sup() <= 1


def test_field_rejects_bad_values():
    unit = unit_lattice(SMALL2, 1)
    with pytest.raises(ValueError):
        Field(unit, np.zeros(unit.size + 1))
    with pytest.raises(ValueError):
        Field(unit, np.full(unit.size, np.nan))


def test_csv_and_binary_roundtrip(tmp_path):
    unit = unit_lattice(SMALL2, 1)
    f = Field.random(unit, 4)
    to_csv(f, tmp_path / "f.csv")
    assert np.array_equal(from_csv(unit, tmp_path / "f.csv").values, f.values)
    to_binary(f, tmp_path / "f.bin")
    assert np.array_equal(from_binary(unit, tmp_path / "f.bin").values, f.values)
    with pytest.raises(ValueError):
        from_binary(FINE, tmp_path / "f.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "f.bin").read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        from_binary(unit, tmp_path / "bad.bin")


def test_csv_missing_rows(tmp_path):
    unit = unit_lattice(SMALL2, 1)
    to_csv(Field.random(unit, 4), tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    (tmp_path / "g.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError, match="cover"):
        from_csv(unit, tmp_path / "g.csv")
