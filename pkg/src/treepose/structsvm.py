"""Joint max-margin training of all model parameters with hard-negative mining."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceWarning, InputError
from .inference import infer_map
from .model import CONCAVITY_EPS, ModelParameters, NUM_CHANNELS
from .qp import solve_qp


class FeatureLayout:
    """Index map between ModelParameters and the flat parameter vector.

    Blocks, in order: filters per (part, type); unary bias per (part, type);
    then per edge, for each active type pair, the 4 deformation weights;
    then per edge, the active pairwise biases. Pruned pairs
    (bias <= -B_LARGE) own no entries.
    """

    def __init__(self, parts, tree, filter_dims, active):
        self.parts = parts
        self.tree = tree
        self.filter_dims = tuple(tuple(tuple(d) for d in per) for per in filter_dims)
        self.active = [np.asarray(a, dtype=bool) for a in active]
        off = 0
        self.filt = []
        for p in parts:
            row = []
            for h, w in self.filter_dims[p.id]:
                row.append(off)
                off += h * w * NUM_CHANNELS
            self.filt.append(row)
        self.ubias = []
        for p in parts:
            self.ubias.append(list(range(off, off + p.num_types)))
            off += p.num_types
        self.defw = []
        for act in self.active:
            idx = np.full(act.shape, -1, dtype=np.int64)
            for t, u in zip(*np.nonzero(act)):
                idx[t, u] = off
                off += 4
            self.defw.append(idx)
        self.pbias = []
        for act in self.active:
            idx = np.full(act.shape, -1, dtype=np.int64)
            for t, u in zip(*np.nonzero(act)):
                idx[t, u] = off
                off += 1
            self.pbias.append(idx)
        self.size = off

    @classmethod
    def for_model(cls, model, parts, tree):
        return cls(parts, tree, model.filter_dims, [model.pair_active(e) for e in range(len(tree.edges))])

    def to_vector(self, model):
        v = np.zeros(self.size)
        for p in self.parts:
            for t in range(p.num_types):
                f = model.filters[p.id][t]
                v[self.filt[p.id][t]:self.filt[p.id][t] + f.size] = f.ravel()
                v[self.ubias[p.id][t]] = model.unary_bias[p.id][t]
        for e in range(len(self.tree.edges)):
            for t, u in zip(*np.nonzero(self.active[e])):
                v[self.defw[e][t, u]:self.defw[e][t, u] + 4] = model.deformation[e][t, u]
                v[self.pbias[e][t, u]] = model.pairwise_bias[e][t, u]
        return v

    def to_model(self, beta, template):
        """Write ``beta`` into a copy of ``template`` (anchors and pruned pairs kept)."""
        filters = [[beta[self.filt[p.id][t]:self.filt[p.id][t] + h * w * NUM_CHANNELS].reshape(h, w, NUM_CHANNELS).copy()
                    for t, (h, w) in enumerate(self.filter_dims[p.id])] for p in self.parts]
        unary = [np.array([beta[i] for i in self.ubias[p.id]]) for p in self.parts]
        deform, pair = [], []
        for e in range(len(self.tree.edges)):
            w = template.deformation[e].copy()
            b = template.pairwise_bias[e].copy()
            for t, u in zip(*np.nonzero(self.active[e])):
                w[t, u] = beta[self.defw[e][t, u]:self.defw[e][t, u] + 4]
                b[t, u] = beta[self.pbias[e][t, u]]
            deform.append(w)
            pair.append(b)
        return ModelParameters(template.cell_size, template.filter_dims, filters, unary, deform,
                               [a.copy() for a in template.anchors], pair, dict(template.meta))

    def concavity_rows(self, eps=CONCAVITY_EPS):
        """Indices of all quadratic deformation weights (each must stay <= -eps)."""
        idx = []
        for e in range(len(self.tree.edges)):
            for t, u in zip(*np.nonzero(self.active[e])):
                idx.extend([self.defw[e][t, u] + 2, self.defw[e][t, u] + 3])
        return np.array(idx, dtype=np.int64)


def _patch(hog, h, w, x, y):
    """(h, w, C) block with the filter centred at (x, y); zero outside the map."""
    data = hog.data
    out = np.zeros((h, w, data.shape[2]))
    x0, y0 = x - w // 2, y - h // 2
    ys0, xs0 = max(y0, 0), max(x0, 0)
    ys1, xs1 = min(y0 + h, data.shape[0]), min(x0 + w, data.shape[1])
    if ys1 > ys0 and xs1 > xs0:
        out[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0] = data[ys0:ys1, xs0:xs1]
    return out


def pose_features(layout, model, pyramid_levels, pose):
    """Sparse feature vector Phi(I, p) with <beta, Phi> equal to the pose score.

    Returns (indices, values) with sorted, unique indices.
    """
    by_id = {p.part_id: p for p in pose.parts}
    idx, val = [], []
    for p in pose.parts:
        h, w = layout.filter_dims[p.part_id][p.type_id]
        block = _patch(pyramid_levels[p.level], h, w, p.x, p.y).ravel()
        o = layout.filt[p.part_id][p.type_id]
        idx.append(np.arange(o, o + block.size))
        val.append(block)
        idx.append(np.array([layout.ubias[p.part_id][p.type_id]]))
        val.append(np.ones(1))
    for e, (a, b) in enumerate(layout.tree.edges):
        pa, pb = by_id[a], by_id[b]
        t, u = pa.type_id, pb.type_id
        if not layout.active[e][t, u]:
            raise InputError(f"pose uses pruned type pair ({t},{u}) on edge {e}")
        ax, ay = model.anchors[e][t, u]
        dx, dy = pb.x - pa.x - ax, pb.y - pa.y - ay
        o = layout.defw[e][t, u]
        idx.append(np.arange(o, o + 4))
        val.append(np.array([dx, dy, dx * dx, dy * dy], dtype=np.float64))
        idx.append(np.array([layout.pbias[e][t, u]]))
        val.append(np.ones(1))
    idx = np.concatenate(idx)
    val = np.concatenate(val)
    order = np.argsort(idx, kind="stable")
    return idx[order], val[order]


@dataclass(eq=False)
class TrainingExample:
    """A positive pose with its features, or a negative image to mine."""

    label: int  # +1 or -1
    pyramid: object = None  # FeaturePyramid (negatives; positives optional)
    pose: object = None  # PoseHypothesis (positives)
    image_id: str = ""
    features: tuple = None  # cached (indices, values)


@dataclass
class TrainerConfig:
    c: float = 0.002
    max_passes: int = 8
    negative_cache_cap: int = 20000
    convergence_tol: float = 1e-3
    detections_per_negative: int = 5
    qp_tol: float = 1e-7
    qp_max_epochs: int = 200000
    seed: int = 0

    def __post_init__(self):
        if not self.c > 0:
            raise InputError("C must be positive")
        if self.max_passes < 1 or self.negative_cache_cap < 1:
            raise InputError("max_passes and negative_cache_cap must be >= 1")


@dataclass(eq=False)
class TrainResult:
    model: ModelParameters
    log: list = field(default_factory=list)
    converged: bool = False
    cache_size: int = 0
    qp: object = None
    slacks: np.ndarray = None
    # final QP rows: (sparse matrix, targets, group per row, cap per group)
    constraints: tuple = None


def mine_negatives(model, parts, tree, negatives, cap, layout=None, per_image=5, threshold=-1.0):
    """Margin-violating negative poses (score > threshold), highest first, up to ``cap``.

    Returns a list of (score, image_index, indices, values).
    """
    layout = layout or FeatureLayout.for_model(model, parts, tree)
    found = []
    for n, ex in enumerate(negatives):
        pyr = ex.pyramid if isinstance(ex, TrainingExample) else ex
        dets = infer_map(model, parts, tree, pyr, threshold=threshold, max_detections=per_image, check=False)
        for d in dets:
            i, v = pose_features(layout, model, pyr.levels, d.pose)
            found.append((d.score, n, i, v))
    found.sort(key=lambda r: (-r[0], r[1]))
    return found[:cap]


def _rows_matrix(rows, dim):
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r[0]) for r in rows])
    if rows:
        indices = np.concatenate([r[0] for r in rows])
        data = np.concatenate([r[1] for r in rows])
    else:
        indices, data = np.zeros(0, np.int64), np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), dim))


def _key(i, v):
    return hashlib.sha1(i.tobytes() + np.round(v, 12).tobytes()).hexdigest()


def train_struct_svm(examples, template, parts, tree, config=None, log=None):
    """Minimize 1/2|beta|^2 + C sum slacks with hard-negative mining.

    Positive constraints: <beta, Phi+> >= 1 - xi_n, one slack each.
    Negative constraints: <beta, Phi-> <= -1 + xi_n, all poses of one
    negative image share its slack. Quadratic deformation weights are held
    at <= -eps as hard constraints, so the concavity clamp afterwards is a
    no-op up to rounding.
    """
    config = config or TrainerConfig()
    layout = FeatureLayout.for_model(template, parts, tree)
    pos = [e for e in examples if e.label > 0]
    neg = [e for e in examples if e.label < 0]
    if not pos:
        raise InputError("training needs at least one positive example")
    pos_rows = []
    for e in pos:
        if e.features is None:
            if e.pyramid is None or e.pose is None:
                raise InputError("positive example lacks features and pose")
            e.features = pose_features(layout, template, e.pyramid.levels, e.pose)
        pos_rows.append(e.features)
    conc = layout.concavity_rows()
    bound_rows = [(np.array([k]), np.array([-1.0])) for k in conc]

    cache = []  # (image index, indices, values, key)
    keys = set()
    for n, e in enumerate(neg):
        if e.features is not None:
            # a fixed negative constraint, never evicted
            k = ("fixed", n)
            cache.append((n, np.asarray(e.features[0]), np.asarray(e.features[1], dtype=np.float64), k))
            keys.add(k)
    mine_from = [e for e in neg if e.features is None and e.pyramid is not None]
    mine_index = [n for n, e in enumerate(neg) if e.features is None and e.pyramid is not None]
    evicted = False
    alpha_prev = {}
    model = template
    prev_obj = None
    result = TrainResult(template)
    for rnd in range(1, config.max_passes + 1):
        rows = pos_rows + [(c[1], -c[2]) for c in cache] + bound_rows
        npos, ncache = len(pos_rows), len(cache)
        groups = np.concatenate([
            np.arange(npos),
            npos + np.array([c[0] for c in cache], dtype=np.int64),
            npos + len(neg) + np.arange(len(bound_rows)),
        ]).astype(np.int64)
        caps = np.concatenate([
            np.full(npos + len(neg), config.c), np.full(len(bound_rows), np.inf),
        ])
        targets = np.concatenate([np.ones(npos + ncache), np.full(len(bound_rows), CONCAVITY_EPS)])
        alpha0 = np.zeros(len(rows))
        for j, c in enumerate(cache):
            alpha0[npos + j] = alpha_prev.get(c[3], 0.0)
        for j in range(npos):
            alpha0[j] = alpha_prev.get(("pos", j), 0.0)
        for j, k in enumerate(conc):
            alpha0[npos + ncache + j] = alpha_prev.get(("bound", int(k)), 0.0)
        # drop groups with no rows (negatives without cached poses)
        used, groups = np.unique(groups, return_inverse=True)
        caps = caps[used]
        matrix = _rows_matrix(rows, layout.size)
        qp = solve_qp(matrix, targets, groups, caps, alpha0,
                      max_epochs=config.qp_max_epochs, tol=config.qp_tol)
        result.constraints = (matrix, targets, groups, caps)
        alpha_prev = {("pos", j): qp.alpha[j] for j in range(npos)}
        for j, c in enumerate(cache):
            alpha_prev[c[3]] = qp.alpha[npos + j]
        for j, k in enumerate(conc):
            alpha_prev[("bound", int(k))] = qp.alpha[npos + ncache + j]
        model = layout.to_model(qp.beta, template).clamp_concavity()
        obj = qp.primal
        if prev_obj is not None and not evicted and obj < prev_obj - 1e-6 * max(1.0, abs(prev_obj)):
            raise AssertionError(f"cache objective decreased: {prev_obj} -> {obj}")

        # mine, then evict non-support negatives beyond the cap
        mined = mine_negatives(model, parts, tree, mine_from, config.negative_cache_cap, layout,
                               config.detections_per_negative) if mine_from else []
        new = 0
        for score, n, i, v in mined:
            k = _key(i, v)
            if k not in keys:
                keys.add(k)
                cache.append((mine_index[n], i, v, k))
                new += 1
        evicted = False
        if len(cache) > config.negative_cache_cap:
            keep = [c for c in cache if alpha_prev.get(c[3], 0.0) > 0 or c[3][0] == "fixed"]
            rest = [c for c in cache if not (alpha_prev.get(c[3], 0.0) > 0 or c[3][0] == "fixed")]
            cache = keep + rest[::-1][:max(config.negative_cache_cap - len(keep), 0)]
            keys = {c[3] for c in cache}
            evicted = True
        entry = {
            "round": rnd, "objective": obj, "dual": qp.dual, "cache_size": ncache,
            "violations": len(mined), "new_constraints": new, "qp_epochs": qp.epochs,
            "kkt_violation": qp.kkt_violation,
        }
        result.log.append(entry)
        if log is not None:
            log(entry)
        rel = abs(obj - prev_obj) / max(abs(prev_obj), 1e-12) if prev_obj is not None else np.inf
        prev_obj = obj
        if new == 0 or rel < config.convergence_tol:
            result.converged = True
            break
    if not result.converged:
        warnings.warn("negative mining did not converge within max_passes", ConvergenceWarning)
    result.model = model
    result.qp = qp
    result.cache_size = len(cache)
    result.slacks = qp.slack
    return result
