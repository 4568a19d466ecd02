"""Dense 31-channel HOG features, feature pyramids and patch cropping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError
from .model import NUM_CHANNELS

NUM_ORIENTATIONS = 18
NORM_EPS = 1e-4
TRUNCATION = 0.2
TEXTURE_SCALE = 0.2357
# per texture channel cap: truncation times sqrt(blocks per cell)
TEXTURE_CAP = TRUNCATION * 2.0
# channel layout: 18 signed orientations, 9 unsigned, 4 texture energies
SIGNED = slice(0, 18)
UNSIGNED = slice(18, 27)
TEXTURE = slice(27, 31)
MIN_IMAGE_SIDE = 16


def as_image(img):
    """Validate a grayscale image: 2-D float array with values in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {a.shape}")
    if a.shape[0] < MIN_IMAGE_SIDE or a.shape[1] < MIN_IMAGE_SIDE:
        raise InputError(f"image {a.shape[1]}x{a.shape[0]} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    return a


@dataclass(frozen=True, eq=False)
class HogMap:
    data: np.ndarray  # (cells_y, cells_x, 31)
    cell_size: int

    @property
    def cells_x(self):
        return self.data.shape[1]

    @property
    def cells_y(self):
        return self.data.shape[0]


def hog_extract(img, cell_size=4):
    """31-channel HOG in the Felzenszwalb layout.

    Gradients use [-1, 0, 1]; each pixel votes with its magnitude into the
    two nearest signed orientation bins and the four nearest cells
    (bilinear). Every cell is normalized by its four 2x2 block energies,
    truncated at 0.2, and projected to 18 signed + 9 unsigned orientation
    channels plus 4 texture-energy channels. The outer ring of cells, which
    lacks full block support, is dropped.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError("hog_extract expects a 2-D image")
    cs = int(cell_size)
    ncy, ncx = img.shape[0] // cs, img.shape[1] // cs
    if ncy < 4 or ncx < 4:
        raise InputError(f"image {img.shape[1]}x{img.shape[0]} too small for cell size {cs}: need 4 cells per side")
    vis_h, vis_w = ncy * cs, ncx * cs
    im = img[:vis_h, :vis_w]

    dx = im[1:-1, 2:] - im[1:-1, :-2]
    dy = im[2:, 1:-1] - im[:-2, 1:-1]
    mag = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    pos = theta * (NUM_ORIENTATIONS / (2 * np.pi))
    o0 = np.floor(pos).astype(np.int64)
    fo = pos - o0
    o0 %= NUM_ORIENTATIONS
    o1 = (o0 + 1) % NUM_ORIENTATIONS

    ys, xs = np.mgrid[1:vis_h - 1, 1:vis_w - 1]
    yp = (ys + 0.5) / cs - 0.5
    xp = (xs + 0.5) / cs - 0.5
    iy = np.floor(yp).astype(np.int64)
    ix = np.floor(xp).astype(np.int64)
    fy = yp - iy
    fx = xp - ix

    hist = np.zeros(ncy * ncx * NUM_ORIENTATIONS)
    for cy, wy in ((iy, 1 - fy), (iy + 1, fy)):
        for cx, wx in ((ix, 1 - fx), (ix + 1, fx)):
            ok = (cy >= 0) & (cy < ncy) & (cx >= 0) & (cx < ncx)
            base = (cy * ncx + cx) * NUM_ORIENTATIONS
            for o, wo in ((o0, 1 - fo), (o1, fo)):
                w = (wy * wx * wo * mag)[ok]
                hist += np.bincount((base + o)[ok], weights=w, minlength=hist.size)
    hist = hist.reshape(ncy, ncx, NUM_ORIENTATIONS)

    energy = ((hist[..., :9] + hist[..., 9:]) ** 2).sum(axis=-1)
    block = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    inv = 1.0 / np.sqrt(block + NORM_EPS)
    # the four blocks touching interior cell (y+1, x+1)
    norms = (inv[1:, 1:], inv[:-1, 1:], inv[1:, :-1], inv[:-1, :-1])

    h = hist[1:-1, 1:-1]
    unsigned = h[..., :9] + h[..., 9:]
    out = np.zeros(h.shape[:2] + (NUM_CHANNELS,))
    for k, n in enumerate(norms):
        n = n[..., None]
        hs = np.minimum(h * n, TRUNCATION)
        out[..., SIGNED] += 0.5 * hs
        out[..., UNSIGNED] += 0.5 * np.minimum(unsigned * n, TRUNCATION)
        out[..., 27 + k] = np.minimum(TEXTURE_SCALE * hs.sum(axis=-1), TEXTURE_CAP)
    return HogMap(out, cs)


def _mirror_channels():
    signed = [(9 - o) % 18 for o in range(18)]
    unsigned = [18 + (9 - u) % 9 for u in range(9)]
    # texture k pairs blocks (y+, x+), (y-, x+), (y+, x-), (y-, x-)
    texture = [29, 30, 27, 28]
    return np.array(signed + unsigned + texture)


MIRROR_CHANNELS = _mirror_channels()


def mirror_hog(data):
    """HOG of the horizontally mirrored image, from the HOG of the original.

    Mirroring maps gradient angle theta to pi - theta, which permutes the
    orientation bins, and swaps left and right normalization blocks.
    Works on any (..., W, 31) array, such as filters or feature maps.
    """
    data = np.asarray(data)
    return data[..., ::-1, :][..., MIRROR_CHANNELS]


def resize_bilinear(img, shape):
    """Resample to ``shape`` (rows, cols) with pixel-centre alignment."""
    img = np.asarray(img, dtype=np.float64)
    h, w = shape
    sy, sx = img.shape[0] / h, img.shape[1] / w
    if sy > 1 or sx > 1:
        # light prefilter against aliasing on downscale
        sigma = (0.5 * np.sqrt(max(sy * sy - 1, 0)), 0.5 * np.sqrt(max(sx * sx - 1, 0)))
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    yy = (np.arange(h) + 0.5) * sy - 0.5
    xx = (np.arange(w) + 0.5) * sx - 0.5
    coords = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def rescale(img, scale):
    img = np.asarray(img, dtype=np.float64)
    shape = (max(int(round(img.shape[0] * scale)), 1), max(int(round(img.shape[1] * scale)), 1))
    return resize_bilinear(img, shape)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    levels: list
    scale_factor: float
    level_scales: tuple
    image_shapes: tuple = ()

    @property
    def cell_size(self):
        return self.levels[0].cell_size


def build_pyramid(img, cell_size=4, interval=8, min_cells=(1, 1), max_levels=None):
    """Multi-scale HOG: level k is the image scaled by 2**(-k/interval).

    Stops when a level's HOG map is smaller than ``min_cells`` (rows, cols),
    typically the largest filter in the model.
    """
    img = as_image(img)
    if interval < 1:
        raise InputError("interval must be >= 1")
    min_y, min_x = min_cells
    levels, scales, shapes = [], [], []
    k = 0
    while max_levels is None or k < max_levels:
        s = 2.0 ** (-k / interval)
        shape = (int(round(img.shape[0] * s)), int(round(img.shape[1] * s)))
        cy, cx = shape[0] // cell_size - 2, shape[1] // cell_size - 2
        if cy < max(min_y, 2) or cx < max(min_x, 2):
            break
        scaled = img if k == 0 else resize_bilinear(img, shape)
        levels.append(hog_extract(scaled, cell_size))
        scales.append(s)
        shapes.append(shape)
        k += 1
    if not levels:
        raise InputError("image too small for the requested minimum feature size")
    return FeaturePyramid(levels, 2.0 ** (1.0 / interval), tuple(scales), tuple(shapes))


def crop_patch(img, center, size):
    """Crop a (w, h) patch centred at pixel (x, y); outside pixels replicate the edge."""
    img = np.asarray(img, dtype=np.float64)
    w, h = int(size[0]), int(size[1])
    if w <= 0 or h <= 0:
        raise InputError(f"patch size must be positive, got {size}")
    x0 = int(np.floor(center[0])) - w // 2
    y0 = int(np.floor(center[1])) - h // 2
    rows = np.clip(np.arange(y0, y0 + h), 0, img.shape[0] - 1)
    cols = np.clip(np.arange(x0, x0 + w), 0, img.shape[1] - 1)
    return img[np.ix_(rows, cols)]


def cell_to_pixel(x, scale, cell_size):
    """Centre, in original-image pixels, of HOG cell ``x`` at a pyramid scale.

    HOG cell x sits over histogram cell x + 1 because the border ring is trimmed.
    """
    return ((np.asarray(x, dtype=np.float64) + 1.0) * cell_size + cell_size / 2.0) / scale


def pixel_to_cell(p, scale, cell_size):
    return np.rint(np.asarray(p, dtype=np.float64) * scale / cell_size - 1.5).astype(np.int64)
