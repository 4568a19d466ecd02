import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treepose.errors import InputError
from treepose.features import (
    TEXTURE, UNSIGNED, build_pyramid, cell_to_pixel, crop_patch, hog_extract, pixel_to_cell,
)
from treepose.io import load_image

DATA = Path(__file__).parent / "data"


def noise_image(seed, shape=(48, 64)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


def test_constant_image_gives_zero_features():
    h = hog_extract(np.full((32, 40), 0.7), 4)
    assert h.data.shape == (6, 8, 31)
    assert np.all(h.data == 0)


def test_cell_count_trims_border_ring():
    h = hog_extract(noise_image(0, (50, 67)), 4)
    assert (h.cells_y, h.cells_x) == (50 // 4 - 2, 67 // 4 - 2)


def test_vertical_step_edge_votes_into_horizontal_gradient_bin():
    # 8 x 32 cells of 4 px with a vertical step edge half way across
    img = np.zeros((32, 128))
    img[:, 64:] = 1.0
    h = hog_extract(img, 4)
    unsigned = h.data[..., UNSIGNED]
    assert unsigned[..., 0].sum() >= 0.9 * unsigned.sum()


def test_rotation_by_180_mirrors_unsigned_channels():
    img = noise_image(1, (40, 56))
    a = hog_extract(img, 4).data[..., UNSIGNED]
    b = hog_extract(img[::-1, ::-1], 4).data[..., UNSIGNED]
    np.testing.assert_allclose(a, b[::-1, ::-1], atol=1e-12)


def test_too_small_image_rejected():
    with pytest.raises(InputError):
        hog_extract(np.zeros((12, 40)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["noise", "binary", "blocks"]))
def test_energy_is_bounded(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "noise":
        img = rng.uniform(0, 1, (40, 44))
    elif kind == "binary":
        img = (rng.uniform(0, 1, (40, 44)) > 0.5).astype(float)
    else:
        img = np.kron(rng.uniform(0, 1, (10, 11)) > 0.5, np.ones((4, 4))).astype(float)
    d = hog_extract(img, 4).data
    assert d.min() >= 0 and d.max() <= 1.2
    assert np.all(d[..., TEXTURE].sum(-1) <= 4 * 0.2 * np.sqrt(4) + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 3))
def test_translation_by_whole_cells_shifts_the_map(seed, sx, sy):
    cs = 4
    big = noise_image(seed, (64, 72))
    a = hog_extract(big[sy * cs:, sx * cs:], cs).data
    b = hog_extract(big, cs).data
    # cell (y, x) of the shifted image is cell (y + sy, x + sx) of the original;
    # compare interior cells only, one cell away from either border
    h, w = a.shape[0] - 1, a.shape[1] - 1
    np.testing.assert_allclose(a[1:h, 1:w], b[sy + 1:sy + h, sx + 1:sx + w], atol=1e-6)


def test_hog_is_deterministic():
    img = noise_image(2)
    assert hog_extract(img).data.tobytes() == hog_extract(img.copy()).data.tobytes()


def test_pyramid_halving():
    img = noise_image(3, (64, 64))
    # a 32 x 32 pixel image gives 6 x 6 cells; nothing smaller fits 6 x 6
    pyr = build_pyramid(img, 4, interval=1, min_cells=(6, 6))
    assert len(pyr.levels) == 2
    assert pyr.level_scales == (1.0, 0.5)


def test_pyramid_level_dims_follow_scale():
    img = noise_image(4, (120, 96))
    pyr = build_pyramid(img, 4, interval=3, min_cells=(2, 2))
    base = np.array([120 // 4, 96 // 4])
    for k, level in enumerate(pyr.levels):
        expect = np.rint(base * 2.0 ** (-k / 3)) - 2
        assert np.all(np.abs(np.array([level.cells_y, level.cells_x]) - expect) <= 1)
    assert all(a > b for a, b in zip(pyr.level_scales, pyr.level_scales[1:]))


def test_pyramid_matches_golden_hashes():
    golden = json.loads((DATA / "pyramid_golden.json").read_text())
    img = load_image(DATA / "pyramid.pgm")
    pyr = build_pyramid(img, golden["cell_size"], golden["interval"], tuple(golden["min_cells"]))
    assert [list(lv.data.shape) for lv in pyr.levels] == golden["shapes"]
    hashes = [hashlib.sha256(np.round(lv.data, 9).tobytes()).hexdigest() for lv in pyr.levels]
    assert hashes == golden["hashes"]


def test_crop_interior_is_exact_subimage():
    img = noise_image(5, (30, 40))
    patch = crop_patch(img, (20, 15), (8, 6))
    np.testing.assert_array_equal(patch, img[12:18, 16:24])


def test_crop_at_corner_replicates_edges():
    img = noise_image(6, (30, 40))
    patch = crop_patch(img, (0, 0), (6, 6))
    np.testing.assert_array_equal(patch[3:, 3:], img[:3, :3])
    assert np.all(patch[:3, :3] == img[0, 0])
    np.testing.assert_array_equal(patch[:3, 3:], np.repeat(img[:1, :3], 3, axis=0))


def test_zero_size_crop_rejected():
    with pytest.raises(InputError):
        crop_patch(noise_image(7), (5, 5), (0, 4))


@given(st.integers(-5, 60), st.sampled_from([1.0, 0.5, 2.0 ** -0.25]))
def test_cell_pixel_round_trip(cell, scale):
    assert pixel_to_cell(cell_to_pixel(cell, scale, 4), scale, 4) == cell
