"""Filter responses and the quadratic deformation / distance-transform machinery."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConcavityError, InputError
from .model import CONCAVITY_EPS


@dataclass(frozen=True)
class DeformationParams:
    """Weights (w_dx, w_dy, w_dx2, w_dy2) and integer anchor (ax, ay) in cells."""

    w: tuple
    anchor: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(v) for v in self.w))
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))
        if len(self.w) != 4:
            raise InputError("deformation weights must have 4 entries")

    def check_concave(self, eps=CONCAVITY_EPS):
        if self.w[2] > -eps + 1e-12 or self.w[3] > -eps + 1e-12:
            raise ConcavityError(
                f"quadratic deformation weights {self.w[2:]} must be <= -{eps}; "
                "the distance transform needs a concave deformation score"
            )


@dataclass(frozen=True, eq=False)
class DtResult:
    """``values[y, x]`` is the best child score for a parent at (x, y);
    ``arg_x``/``arg_y`` locate that child placement (-1 where none is valid)."""

    values: np.ndarray
    arg_x: np.ndarray
    arg_y: np.ndarray


def filter_response(features, filt):
    """Valid cross-correlation of a (h, w, C) filter with an (H, W, C) feature map."""
    feat = getattr(features, "data", features)
    filt = np.asarray(filt, dtype=np.float64)
    if filt.ndim != 3 or feat.ndim != 3 or filt.shape[2] != feat.shape[2]:
        raise InputError(f"filter shape {filt.shape} incompatible with features {feat.shape}")
    fh, fw = filt.shape[:2]
    if fh > feat.shape[0] or fw > feat.shape[1]:
        raise InputError(f"filter {fh}x{fw} larger than feature map {feat.shape[0]}x{feat.shape[1]}: empty response")
    return filter_responses(feat, filt[None])[0]


def filter_responses(feat, filters):
    """Responses of a stack of equally sized filters, shape (n, H-h+1, W-w+1)."""
    filters = np.asarray(filters, dtype=np.float64)
    n, fh, fw, c = filters.shape
    win = sliding_window_view(feat, (fh, fw), axis=(0, 1))  # (H', W', C, fh, fw)
    hh, ww = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(hh * ww, fh * fw * c)
    out = cols @ filters.reshape(n, -1).T
    return np.ascontiguousarray(out.T.reshape(n, hh, ww))


def place_response(response, filter_shape, map_shape):
    """Embed a valid response into a full map indexed by filter centre cell.

    A filter of size (h, w) anchored at centre (x, y) covers cells
    x - w//2 .. x - w//2 + w - 1. Placements that leave the map get -inf.
    """
    fh, fw = filter_shape
    out = np.full(map_shape, -np.inf)
    rh, rw = response.shape
    out[fh // 2:fh // 2 + rh, fw // 2:fw // 2 + rw] = response
    return out


def deformation_score(params, displacement):
    """w . [dx, dy, dx^2, dy^2] with (dx, dy) = displacement - anchor."""
    dx = np.asarray(displacement[0], dtype=np.float64) - params.anchor[0]
    dy = np.asarray(displacement[1], dtype=np.float64) - params.anchor[1]
    w = params.w
    return w[0] * dx + w[1] * dy + w[2] * dx * dx + w[3] * dy * dy


@numba.njit(cache=True, nogil=True)
def _dt1d(src, lin, quad, shift, out, arg, v, z):
    # out[p] = max_q src[q] + lin*d + quad*d^2, d = q - p - shift, quad < 0.
    # Lower envelope of parabolas c*(p - vq)^2 - src[q] with vertex
    # vq = q - shift - lin/(2c), c = -quad.
    n = src.shape[0]
    c = -quad
    off = shift + lin / (2.0 * c)
    k = -1
    for q in range(n):
        if src[q] == -np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            r = v[k]
            s = (src[r] - src[q]) / (2.0 * c * (q - r)) + 0.5 * (q + r) - off
            if s <= z[k] and k > 0:
                k -= 1
                continue
            if s <= z[k]:
                # replaces the only parabola left
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
            break
    if k < 0:
        for p in range(n):
            out[p] = -np.inf
            arg[p] = -1
        return
    j = 0
    for p in range(n):
        while z[j + 1] < p:
            j += 1
        q = v[j]
        d = q - p - shift
        out[p] = src[q] + lin * d + quad * d * d
        arg[p] = q


@numba.njit(cache=True, nogil=True)
def _dt2d(child, wx, wy, qx, qy, ax, ay):
    h, w = child.shape
    tmp = np.empty((h, w))
    argx = np.empty((h, w), dtype=np.int64)
    vals = np.empty((h, w))
    argy = np.empty((h, w), dtype=np.int64)
    outx = np.empty((h, w), dtype=np.int64)
    n = max(h, w)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for y in range(h):
        _dt1d(child[y], wx, qx, ax, tmp[y], argx[y], v, z)
    col = np.empty(h)
    colv = np.empty(h)
    cola = np.empty(h, dtype=np.int64)
    for x in range(w):
        for y in range(h):
            col[y] = tmp[y, x]
        _dt1d(col, wy, qy, ay, colv, cola, v, z)
        for y in range(h):
            vals[y, x] = colv[y]
            argy[y, x] = cola[y]
            outx[y, x] = argx[cola[y], x] if cola[y] >= 0 else -1
    return vals, outx, argy


def distance_transform(child_scores, params):
    """values[c] = max over child cells q of child[q] + deformation(q - c - anchor).

    Separable two-pass lower-envelope transform, O(W*H). Linear weights are
    folded into the parabola vertices, so the result is exact.
    """
    params.check_concave()
    child = np.ascontiguousarray(child_scores, dtype=np.float64)
    if child.ndim != 2 or child.size == 0:
        raise InputError("distance_transform expects a non-empty 2-D score map")
    if np.any(np.isnan(child)) or np.any(child == np.inf):
        raise InputError("score map must be finite or -inf")
    w = params.w
    vals, ax, ay = _dt2d(child, w[0], w[1], w[2], w[3], params.anchor[0], params.anchor[1])
    return DtResult(vals, ax, ay)


def naive_distance_transform(child_scores, params):
    """O(n^2) reference: evaluate every (parent, child) placement pair."""
    child = np.asarray(child_scores, dtype=np.float64)
    h, w = child.shape
    cy, cx = np.mgrid[0:h, 0:w]
    qy = cy.reshape(1, 1, h, w)
    qx = cx.reshape(1, 1, h, w)
    disp = (qx - cx[:, :, None, None], qy - cy[:, :, None, None])
    total = child[None, None] + deformation_score(params, disp)
    flat = total.reshape(h, w, -1)
    best = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, best[..., None], -1)[..., 0]
    return vals, best % w, best // w


def score_map_image(values):
    """Score map as a [0, 1] heat image; -inf placements map to 0."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    out = np.zeros(v.shape)
    if finite.any():
        lo, hi = v[finite].min(), v[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = 0.1 + 0.9 * (v[finite] - lo) / span
    return out


def dump_score_map(path, values):
    """Write a score map as an 8-bit PGM heat image (debug aid)."""
    from .io import save_image

    save_image(path, score_map_image(values))
