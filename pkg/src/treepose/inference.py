"""Exact MAP inference over a tree of typed parts.

Messages flow leaf to root. For an edge (parent p, child c) and parent type
t, the message at parent cell x is

    max_u max_q  score_c^u(q) + w^{tu} . psi(q - x - a^{tu}) + b^{tu}

computed with one distance transform per (t, u) pair. Root cells are then
decoded by following the stored backpointers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import ConcavityError, InputError
from .features import FeaturePyramid, HogMap, cell_to_pixel
from .layout import limb_segment
from .model import CONCAVITY_EPS, PartHypothesis, PoseHypothesis, validate_model
from .scoring import _dt2d, dump_score_map, filter_responses, place_response


@dataclass(frozen=True, eq=False)
class Detection:
    pose: PoseHypothesis
    root_cell: tuple  # (x, y, scale)
    score: float
    box: tuple  # (x0, y0, x1, y1) in original-image pixels

    @property
    def level(self):
        return self.pose.level


@numba.njit(cache=True, nogil=True)
def _edge_message(child, w, anc, bias, active):
    kp, kc = bias.shape
    h, wd = child.shape[1], child.shape[2]
    vals = np.full((kp, h, wd), -np.inf)
    bt = np.full((kp, h, wd), -1, dtype=np.int32)
    bx = np.full((kp, h, wd), -1, dtype=np.int32)
    by = np.full((kp, h, wd), -1, dtype=np.int32)
    for t in range(kp):
        for u in range(kc):
            if not active[t, u]:
                continue
            v, ax, ay = _dt2d(child[u], w[t, u, 0], w[t, u, 1], w[t, u, 2], w[t, u, 3],
                              anc[t, u, 0], anc[t, u, 1])
            b = bias[t, u]
            for y in range(h):
                for x in range(wd):
                    s = v[y, x] + b
                    if s > vals[t, y, x]:
                        vals[t, y, x] = s
                        bt[t, y, x] = u
                        bx[t, y, x] = ax[y, x]
                        by[t, y, x] = ay[y, x]
    return vals, bt, bx, by


def _check_concave(model):
    for e, w in enumerate(model.deformation):
        act = model.pair_active(e)
        if np.any(w[..., 2:][act] > -CONCAVITY_EPS + 1e-12):
            raise ConcavityError(f"edge {e}: quadratic deformation weight above -{CONCAVITY_EPS}")


def unary_maps(model, parts, hog):
    """Per part, a (K, H, W) map of filter response + type bias at filter centres."""
    shape = hog.data.shape[:2]
    out = []
    for p in parts:
        maps = np.full((p.num_types,) + shape, -np.inf)
        groups = {}
        for t in range(p.num_types):
            groups.setdefault(tuple(model.filter_dims[p.id][t]), []).append(t)
        for (fh, fw), ts in groups.items():
            if fh > shape[0] or fw > shape[1]:
                continue
            resp = filter_responses(hog.data, np.stack([model.filters[p.id][t] for t in ts]))
            for t, r in zip(ts, resp):
                maps[t] = place_response(r, (fh, fw), shape) + model.unary_bias[p.id][t]
        out.append(maps)
    return out


@dataclass(eq=False)
class LevelPass:
    """Subtree scores and backpointers for one pyramid level."""

    scores: list  # per part (K, H, W): unary plus children's messages
    back: dict  # edge index -> (type, x, y) backpointer arrays (Kp, H, W)


def level_pass(model, parts, tree, hog):
    unary = unary_maps(model, parts, hog)
    scores = [u.copy() for u in unary]
    back = {}
    pe = tree.parent_edge()
    for node in tree.postorder():
        if node == tree.root:
            continue
        e, parent = pe[node]
        vals, bt, bx, by = _edge_message(
            np.ascontiguousarray(scores[node]),
            np.ascontiguousarray(model.deformation[e], dtype=np.float64),
            np.ascontiguousarray(model.anchors[e], dtype=np.int64),
            np.ascontiguousarray(model.pairwise_bias[e], dtype=np.float64),
            np.ascontiguousarray(model.pair_active(e)),
        )
        scores[parent] += vals
        back[e] = (bt, bx, by)
    return LevelPass(scores, back)


def backtrack(tree, lp, level, root_type, x, y):
    """Decode the full pose below a root placement."""
    placed = {tree.root: (root_type, x, y)}
    kids = tree.children()
    pe = tree.parent_edge()
    for node in tree.preorder():
        t, px, py = placed[node]
        for c in kids[node]:
            bt, bx, by = lp.back[pe[c][0]]
            placed[c] = (int(bt[t, py, px]), int(bx[t, py, px]), int(by[t, py, px]))
    return tuple(
        PartHypothesis(i, placed[i][1], placed[i][2], level, placed[i][0])
        for i in range(tree.num_nodes)
    )


def part_box(model, part, scale, border_cells=1):
    """Pixel box (x0, y0, x1, y1) covered by a placed part's filter."""
    fh, fw = model.filter_dims[part.part_id][part.type_id]
    cs = model.cell_size
    x0 = part.x - fw // 2 + border_cells
    y0 = part.y - fh // 2 + border_cells
    return (x0 * cs / scale, y0 * cs / scale, (x0 + fw) * cs / scale, (y0 + fh) * cs / scale)


def pose_box(model, pose, scale, border_cells=1):
    """Tight box over all part boxes."""
    boxes = np.array([part_box(model, p, scale, border_cells) for p in pose.parts])
    return (boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())


def box_iou(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[2], b[:, 2]) - np.maximum(a[0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[3], b[:, 3]) - np.maximum(a[1], b[:, 1]), 0, None)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(detections, overlap_threshold=0.5):
    """Greedy suppression: drop a detection whose box has IoU > threshold with a kept one."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept = []
    for i in order:
        d = detections[i]
        if kept and np.any(box_iou(d.box, [k.box for k in kept]) > overlap_threshold):
            continue
        kept.append(d)
    return kept


def _as_pyramid(pyramid):
    if isinstance(pyramid, HogMap):
        return FeaturePyramid([pyramid], 2.0, (1.0,))
    return pyramid


def _dump_passes(debug_dir, parts, passes):
    out = Path(debug_dir)
    out.mkdir(parents=True, exist_ok=True)
    for lvl, lp in enumerate(passes):
        for p in parts:
            dump_score_map(out / f"level{lvl:02d}_{p.name}.pgm", lp.scores[p.id].max(axis=0))


def infer_map(model, parts, tree, pyramid, threshold=-np.inf, max_detections=1,
              nms_overlap=0.5, check=True, debug_dir=None):
    """Detections sorted by score, after greedy NMS on pose boxes.

    Root cells scoring above ``threshold`` are candidates; each keeps its
    best root type. Ties are broken by the smallest (level, y, x, type).
    With ``debug_dir`` every part's subtree score map (best type per cell)
    is written there as a PGM heat image.
    """
    pyramid = _as_pyramid(pyramid)
    if pyramid is None or not pyramid.levels:
        raise InputError("empty feature pyramid")
    if check:
        report = validate_model(model, parts, tree)
        if not report.ok:
            raise InputError("invalid model: " + "; ".join(report.problems))
    _check_concave(model)
    passes = [level_pass(model, parts, tree, hog) for hog in pyramid.levels]
    if debug_dir is not None:
        _dump_passes(debug_dir, parts, passes)

    cand = []
    for lvl, lp in enumerate(passes):
        root = lp.scores[tree.root]
        best_t = np.argmax(root, axis=0)  # lowest type on ties
        best = np.take_along_axis(root, best_t[None], 0)[0]
        ys, xs = np.nonzero(best > threshold)
        for y, x in zip(ys, xs):
            cand.append((best[y, x], lvl, y, x, best_t[y, x]))
    if not cand:
        return []
    arr = np.array(cand)
    order = np.lexsort((arr[:, 4], arr[:, 3], arr[:, 2], arr[:, 1], -arr[:, 0]))

    kept = []
    for i in order:
        score, lvl, y, x, t = arr[i]
        lvl, y, x, t = int(lvl), int(y), int(x), int(t)
        scale = pyramid.level_scales[lvl]
        pose = PoseHypothesis(backtrack(tree, passes[lvl], lvl, t, x, y), float(score))
        box = pose_box(model, pose, scale)
        if kept and np.any(box_iou(box, [k.box for k in kept]) > nms_overlap):
            continue
        kept.append(Detection(pose, (x, y, scale), float(score), box))
        if len(kept) >= max_detections:
            break
    return kept


def compatibility_score(type_assignment, model, tree):
    """Sum of unary type biases plus pairwise type-pair biases over tree edges."""
    if isinstance(type_assignment, dict):
        types = type_assignment
    else:
        types = dict(enumerate(type_assignment))
    missing = [i for i in range(tree.num_nodes) if i not in types]
    if missing:
        raise InputError(f"type assignment missing parts {missing}")
    total = sum(float(model.unary_bias[i][types[i]]) for i in range(tree.num_nodes))
    for e, (a, b) in enumerate(tree.edges):
        total += float(model.pairwise_bias[e][types[a], types[b]])
    return total


def local_response(hog, filt, x, y):
    """Filter response with the filter centred at cell (x, y); -inf if it does not fit."""
    fh, fw = filt.shape[:2]
    x0, y0 = x - fw // 2, y - fh // 2
    h, w = hog.data.shape[:2]
    if x0 < 0 or y0 < 0 or x0 + fw > w or y0 + fh > h:
        return -np.inf
    return float(np.sum(hog.data[y0:y0 + fh, x0:x0 + fw] * filt))


def score_pose(model, parts, tree, pyramid, pose):
    """Objective of a complete pose: appearance + deformation + compatibility."""
    pyramid = _as_pyramid(pyramid)
    by_id = {p.part_id: p for p in pose.parts}
    total = 0.0
    for p in pose.parts:
        hog = pyramid.levels[p.level]
        total += local_response(hog, model.filters[p.part_id][p.type_id], p.x, p.y)
    for e, (a, b) in enumerate(tree.edges):
        pa, pb = by_id[a], by_id[b]
        ta, tb = pa.type_id, pb.type_id
        w = model.deformation[e][ta, tb]
        ax, ay = model.anchors[e][ta, tb]
        dx, dy = pb.x - pa.x - ax, pb.y - pa.y - ay
        total += w[0] * dx + w[1] * dy + w[2] * dx * dx + w[3] * dy * dy
    total += compatibility_score({p.part_id: p.type_id for p in pose.parts}, model, tree)
    return float(total)


def fit_skeleton(pose, parts, level_scales, cell_size, border_cells=1):
    """Limb segments in image pixels, one per combined part.

    Endpoints come from the placed single parts (joints): a two-joint limb
    runs joint to joint, the torso runs from mid-shoulders to mid-hips.
    ``border_cells`` is the HOG border trimmed from feature maps; with 0,
    pixel = cell * cell_size + cell_size / 2 at unit scale.
    """
    by_id = {p.part_id: p for p in pose.parts}
    scale = level_scales[pose.level] if not np.isscalar(level_scales) else level_scales
    joints = {}
    for spec in parts:
        if spec.kind.value == "single" and spec.id in by_id:
            h = by_id[spec.id]
            joints[spec.id] = (
                float(cell_to_pixel(h.x + border_cells - 1, scale, cell_size)),
                float(cell_to_pixel(h.y + border_cells - 1, scale, cell_size)),
            )
    segments = []
    for spec in parts:
        if spec.kind.value != "combined":
            continue
        pts = [joints[c] for c in spec.constituent_ids]
        segments.append((spec.name,) + limb_segment(pts))
    return segments


def pose_joints(pose, parts, level_scales, cell_size, border_cells=1):
    """(J, 2) pixel coordinates of the single parts, in part-id order."""
    scale = level_scales[pose.level]
    by_id = {p.part_id: p for p in pose.parts}
    out = []
    for spec in parts:
        if spec.kind.value == "single":
            h = by_id[spec.id]
            out.append((cell_to_pixel(h.x + border_cells - 1, scale, cell_size),
                        cell_to_pixel(h.y + border_cells - 1, scale, cell_size)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)
