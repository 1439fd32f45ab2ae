import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdmae.posenc import PosEncConfig, gsd_2d_sincos, positional_rows, standard_2d_sincos


def scalar_table(side, dim, factor=1.0, temperature=10000.0):
    """Direct per-(token, feature) evaluation, written without numpy broadcasting."""
    half = dim // 2
    rows = []
    for r in range(side):
        for c in range(side):
            vec = []
            for pos in (c * factor, r * factor):
                for i in range(half // 2):
                    w = 1.0 / temperature ** (2 * i / half)
                    vec += [math.sin(pos * w), math.cos(pos * w)]
            rows.append(vec)
    return np.array(rows)


def test_standard_table_matches_scalar_oracle():
    table = standard_2d_sincos(3, PosEncConfig(8)).values
    assert table.shape == (9, 8)
    np.testing.assert_allclose(table, scalar_table(3, 8), rtol=0, atol=1e-15)


def test_scaled_table_matches_scalar_oracle():
    table = gsd_2d_sincos(5, 0.37, PosEncConfig(16)).values
    np.testing.assert_allclose(table, scalar_table(5, 16, 0.37), atol=1e-14)


def test_origin_token():
    row = standard_2d_sincos(4, PosEncConfig(32)).values[0]
    np.testing.assert_array_equal(row[0::2], 0.0)
    np.testing.assert_array_equal(row[1::2], 1.0)


def test_first_frequency_is_unit():
    # token 1 sits at column 1; feature 0 is sin(1 * 1)
    assert standard_2d_sincos(4, PosEncConfig(32)).values[1, 0] == math.sin(1.0)


def test_reference_gsd_reduces_to_standard():
    cfg = PosEncConfig(64, reference_gsd=1.0)
    np.testing.assert_array_equal(gsd_2d_sincos(14, 1.0, cfg).values, standard_2d_sincos(14, cfg).values)


def test_double_gsd_equals_standard_at_double_position():
    cfg = PosEncConfig(16)
    scaled = gsd_2d_sincos(4, 2.0, cfg).values.reshape(4, 4, 16)
    big = standard_2d_sincos(8, cfg).values.reshape(8, 8, 16)
    np.testing.assert_allclose(scaled, big[::2, ::2], atol=1e-12)


def test_colocated_grids_figure_property():
    cfg = PosEncConfig(32)
    g = 0.6
    a = gsd_2d_sincos(8, g, cfg).values.reshape(8, 8, 32)
    b = gsd_2d_sincos(4, 2 * g, cfg).values.reshape(4, 4, 32)
    np.testing.assert_allclose(b, a[::2, ::2], atol=1e-12)


@given(st.floats(0.01, 20.0), st.integers(1, 12), st.integers(1, 4), st.sampled_from([4, 8, 16, 64]))
@settings(max_examples=80, deadline=None)
def test_ground_alignment_any_integer_scale(g, n, s, dim):
    cfg = PosEncConfig(dim)
    coarse = gsd_2d_sincos(n, s * g, cfg).values.reshape(n, n, dim)
    fine = gsd_2d_sincos(s * n, g, cfg).values.reshape(s * n, s * n, dim)
    np.testing.assert_allclose(coarse, fine[::s, ::s], rtol=0, atol=1e-9)


@given(st.floats(0.01, 20.0), st.integers(1, 10), st.sampled_from([4, 8, 32]))
@settings(max_examples=50, deadline=None)
def test_range_and_pythagoras(g, n, dim):
    t = gsd_2d_sincos(n, g, PosEncConfig(dim)).values
    assert np.all(np.abs(t) <= 1.0)
    np.testing.assert_allclose(t[:, 0::2] ** 2 + t[:, 1::2] ** 2, 1.0, atol=1e-12)


def test_literal_orientation_inverts_factor():
    lit = positional_rows(6, 16, 0.5, orientation="literal")
    ground = positional_rows(6, 16, 2.0)
    np.testing.assert_array_equal(lit, ground)


def test_config_validation():
    with pytest.raises(ValueError):
        PosEncConfig(6)
    with pytest.raises(ValueError):
        PosEncConfig(8, orientation="sideways")
    with pytest.raises(ValueError):
        gsd_2d_sincos(4, 0.0, PosEncConfig(8))
