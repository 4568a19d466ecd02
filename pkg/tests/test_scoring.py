import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treepose.errors import ConcavityError, InputError
from treepose.io import load_image
from treepose.scoring import (
    DeformationParams, deformation_score, distance_transform, dump_score_map, filter_response,
    place_response,
)

from oracles import naive_correlation, naive_dt


def random_dt_case(rng, max_side=40):
    h, w = rng.integers(1, max_side + 1, size=2)
    child = rng.normal(scale=5.0, size=(h, w))
    child[rng.uniform(size=child.shape) < 0.1] = -np.inf
    wts = (rng.normal(), rng.normal(), -rng.uniform(0.01, 3.0), -rng.uniform(0.01, 3.0))
    anchor = tuple(int(v) for v in rng.integers(-4, 5, size=2))
    return child, DeformationParams(wts, anchor)


# -- filter responses -------------------------------------------------------

def test_zero_filter_gives_zero_map():
    feat = np.random.default_rng(0).uniform(size=(7, 9, 31))
    out = filter_response(feat, np.zeros((3, 2, 31)))
    assert out.shape == (5, 8) and np.all(out == 0)


def test_unit_filter_projects_a_channel():
    feat = np.random.default_rng(1).uniform(size=(7, 9, 31))
    filt = np.zeros((1, 1, 31))
    filt[0, 0, 5] = 1.0
    np.testing.assert_array_equal(filter_response(feat, filt), feat[..., 5])


def test_response_matches_naive_correlation():
    rng = np.random.default_rng(2)
    feat = rng.normal(size=(6, 6, 31))
    filt = rng.normal(size=(3, 3, 31))
    assert np.max(np.abs(filter_response(feat, filt) - naive_correlation(feat, filt))) <= 1e-10


def test_oversized_filter_rejected():
    with pytest.raises(InputError, match="empty"):
        filter_response(np.zeros((3, 3, 31)), np.zeros((4, 2, 31)))


def test_place_response_marks_invalid_placements():
    out = place_response(np.ones((2, 3)), (3, 2), (4, 4))
    assert np.all(out[1:3, 1:4] == 1)
    assert np.isneginf(out[0]).all() and np.isneginf(out[3]).all() and np.isneginf(out[:, 0]).all()


# -- deformation ------------------------------------------------------------

def test_deformation_examples():
    assert deformation_score(DeformationParams((1, 2, -3, -4), (2, -1)), (2, -1)) == 0
    assert deformation_score(DeformationParams((0, 0, -1, -1)), (2, 1)) == -5
    assert deformation_score(DeformationParams((1, 0, -1, 0)), (3, 0)) == -6
    assert deformation_score(DeformationParams((0, 0, -1, -1), (1, 1)), (3, 2)) == -5


# -- distance transform -----------------------------------------------------

def test_concavity_violation_rejected():
    with pytest.raises(ConcavityError, match="concave"):
        distance_transform(np.zeros((4, 4)), DeformationParams((0, 0, -1.0, 0.0)))


def test_near_rigid_transform_is_a_shift():
    rng = np.random.default_rng(3)
    child = rng.normal(size=(12, 15))
    k = 1e6
    res = distance_transform(child, DeformationParams((0, 0, -k, -k), (2, -3)))
    # parent cell c takes the child at c + anchor
    np.testing.assert_allclose(res.values[3:, :13], child[:9, 2:], atol=1e-3)
    assert np.all(res.arg_x[3:, :13] == np.arange(2, 15)[None, :])


def test_flat_deformation_approaches_global_max():
    rng = np.random.default_rng(4)
    child = rng.normal(size=(10, 10))
    params = DeformationParams((0, 0, -1e-2, -1e-2))
    res = distance_transform(child, params)
    expect, _ = naive_dt(child, params.w, params.anchor)
    assert np.max(np.abs(res.values - expect)) <= 1e-9
    # with a weak penalty every cell sees a value close to the global maximum
    assert np.all(child.max() - res.values <= 2 * 1e-2 * 9 ** 2)


@pytest.mark.parametrize("seed", range(40))
def test_dt_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    child, params = random_dt_case(rng, 25)
    res = distance_transform(child, params)
    expect, table = naive_dt(child, params.w, params.anchor)
    np.testing.assert_array_equal(np.isneginf(res.values), np.isneginf(expect))
    ok = np.isfinite(expect)
    assert np.max(np.abs(res.values[ok] - expect[ok]), initial=0) <= 1e-9
    h, w = child.shape
    flat = (res.arg_y * w + res.arg_x).ravel()
    picked = table[np.arange(h * w), np.where(flat >= 0, flat, 0)].reshape(h, w)
    assert np.max(np.abs(picked[ok] - expect[ok]), initial=0) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_shift_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    child, params = random_dt_case(rng, 15)
    a = distance_transform(child, params)
    b = distance_transform(child + c, params)
    ok = np.isfinite(a.values)
    np.testing.assert_allclose(b.values[ok], a.values[ok] + c, atol=1e-9)
    np.testing.assert_array_equal(a.arg_x, b.arg_x)
    np.testing.assert_array_equal(a.arg_y, b.arg_y)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-3, 3), st.integers(-3, 3))
def test_anchor_translation(seed, u, v):
    rng = np.random.default_rng(seed)
    child = rng.normal(size=(14, 16))
    w = (rng.normal(), rng.normal(), -rng.uniform(0.5, 2), -rng.uniform(0.5, 2))
    a = distance_transform(child, DeformationParams(w, (0, 0))).values
    b = distance_transform(child, DeformationParams(w, (u, v))).values
    # moving the anchor by (u, v) moves the value field by (-u, -v): b[c] = a[c + (u, v)]
    h, wd = child.shape
    y0, y1 = max(0, -v), min(h, h - v)
    x0, x1 = max(0, -u), min(wd, wd - u)
    # compare away from the border where the envelope is clipped
    np.testing.assert_allclose(b[y0:y1, x0:x1][3:-3, 3:-3],
                               a[y0 + v:y1 + v, x0 + u:x1 + u][3:-3, 3:-3], atol=1e-9)


def test_all_invalid_child_gives_invalid_message():
    res = distance_transform(np.full((3, 4), -np.inf), DeformationParams((0, 0, -1, -1)))
    assert np.all(np.isneginf(res.values)) and np.all(res.arg_x == -1)


def test_score_map_dump_is_a_pgm(tmp_path):
    vals = np.array([[-np.inf] * 16] + [list(np.linspace(-1, 3, 16))] * 15)
    dump_score_map(tmp_path / "m.pgm", vals)
    img = load_image(tmp_path / "m.pgm")
    assert img.shape == (16, 16) and img[0].max() == 0 and img[1, -1] == 1.0
