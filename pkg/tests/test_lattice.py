import numpy as np
import pytest
from hypothesis import given, strategies as st

from bgfield.lattice import (ConfigError, LatticeParams, fine_lattice, make_lattice, nearest_unit_indices,
                             nearest_unit_point, pullback_dilation, scale_field, scaled_lattice, unit_lattice)
from bgfield.field import Field

from conftest import DESK, SMALL2


def test_even_or_small_L_rejected():
    for L in (2, 4, 1):
        with pytest.raises(ConfigError):
            LatticeParams(L, 81, 9)


def test_bad_metric_and_dims():
    with pytest.raises(ConfigError):
        LatticeParams(3, 81, 9, metric="maximum")
    with pytest.raises(ConfigError):
        LatticeParams(3, 81, 9, spatial_dims=4)


def test_divisibility_error_names_axis():
    p = LatticeParams(3, 27, 9, n_steps=2)
    with pytest.raises(ConfigError, match="temporal"):
        make_lattice(p, 0, 2)
    q = LatticeParams(3, 81, 3, n_steps=2)
    with pytest.raises(ConfigError, match="spatial"):
        make_lattice(q, 0, 2)


def test_step_budget():
    with pytest.raises(ConfigError):
        make_lattice(DESK, 3, 0)


def test_sizes_and_volumes():
    fine, unit = fine_lattice(DESK, 1), unit_lattice(DESK, 1)
    assert fine.size == 81 * 9**3
    assert unit.size == 9 * 3**3
    assert fine.vol == pytest.approx(3.0**-5)
    assert unit.vol == 1.0
    # the unit lattice has unit spacing in physical coordinates
    assert np.allclose(unit.physical()[1] - unit.physical()[0], [0, 0, 0, 1])
    assert fine.refines(unit) and not unit.refines(fine)


@given(st.integers(0, 10**6))
def test_index_of_roundtrip(i):
    lat = fine_lattice(SMALL2, 1)
    i = i % lat.size
    assert lat.index_of(lat.points[i]) == i
    # periodic wrap
    assert lat.index_of(lat.points[i] + np.asarray(SMALL2.box)) == i


def test_index_of_rejects_off_lattice():
    unit = unit_lattice(SMALL2, 1)
    with pytest.raises(ValueError):
        unit.index_of((1, 0, 0, 0))


@given(st.lists(st.integers(0, 728), min_size=3, max_size=3))
def test_metric_symmetric_and_triangle(ix):
    lat = fine_lattice(SMALL2, 2)
    for kind in ("euclidean", "taxicab"):
        met = lat.metric if kind == lat.metric.kind else type(lat.metric)(lat.metric.box, lat.metric.unit, kind)
        a, b, c = (lat.points[i % lat.size] for i in ix)
        assert met(a, b) == pytest.approx(met(b, a))
        assert met(a, a) == 0
        assert met(a, c) <= met(a, b) + met(b, c) + 1e-12


def test_nearest_unit_point_ties_and_indices():
    fine, unit = fine_lattice(SMALL2, 1), unit_lattice(SMALL2, 1)
    # temporal unit stride is 9: 4 goes down, 5 goes up
    assert nearest_unit_point(fine, unit, (4, 0, 0, 0)) == (0, 0, 0, 0)
    assert nearest_unit_point(fine, unit, (5, 0, 0, 0)) == (9, 0, 0, 0)
    # near the wrap the nearest point is the origin
    assert nearest_unit_point(fine, unit, (80, 0, 0, 0)) == (0, 0, 0, 0)
    idx = nearest_unit_indices(fine, unit)
    for i in (0, 17, 100, fine.size - 1):
        assert unit.points[idx[i]].tolist() == list(nearest_unit_point(fine, unit, fine.points[i]))


def test_scaling_maps_inverse():
    unit = unit_lattice(SMALL2, 1)
    f = Field.random(unit, 3)
    up = scale_field(f, "finer")
    assert up.lattice == scaled_lattice(unit, "finer")
    assert np.allclose(up.values, 3**0.5 * f.values)
    back = scale_field(up, "coarser")
    assert back.lattice == unit and np.allclose(back.values, f.values, rtol=1e-15, atol=0)
    pb = pullback_dilation(up)
    assert pb.lattice == unit and np.array_equal(pb.values, up.values)
    assert np.array_equal(pullback_dilation(pb, inverse=True).values, pb.values)
