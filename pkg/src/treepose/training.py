"""Type learning: k-means geometry, visual categories, single-part types and
compatibility / anchor initialization."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceWarning, InputError
from .features import hog_extract
from .model import B_LARGE
from .qp import binary_svm


# -- k-means ---------------------------------------------------------------

@dataclass(eq=False)
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    sse: float
    iterations: int
    reseeds: int = 0


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def kmeans(points, k, seed=0, max_iter=300, strict=True):
    """Lloyd's algorithm from k-means++ seeds until the labels stop changing.

    An empty cluster is re-seeded with the point farthest from its centre,
    provided that distance is more than rounding. With ``strict`` a request
    for more clusters than distinct points is an error; otherwise surplus
    clusters stay empty and their centres are left at infinity.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1 or n == 0:
        raise InputError("k-means needs k >= 1 and at least one point")
    distinct = len(np.unique(x, axis=0))
    if strict and k > distinct:
        raise InputError(f"k={k} exceeds the {distinct} distinct points")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d = _sq_dists(x, np.array(centers)).min(1)
        if d.sum() <= 0:
            centers.append(np.full(x.shape[1], np.inf))
            continue
        centers.append(x[rng.choice(n, p=d / d.sum())])
    centers = np.array(centers)
    labels = np.full(n, -1)
    # distances below this are rounding in the cluster means, not spread
    floor = 1e-12 * max(float((x * x).sum(1).max()), 1e-300)
    reseeds = 0
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)  # lowest cluster on ties
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(0)
        for j in range(k):
            if not np.any(labels == j):
                err = ((x - centers[labels]) ** 2).sum(1)
                worst = int(np.argmax(err))
                if err[worst] > floor:
                    old = labels[worst]
                    labels[worst] = j
                    centers[j] = x[worst]
                    centers[old] = x[labels == old].mean(0)
                    reseeds += 1
    sse = float(((x - centers[labels]) ** 2).sum())
    return KMeansResult(centers, labels, sse, it, reseeds)


@dataclass(eq=False)
class GeometryClusters:
    sizes: np.ndarray  # (k, 2) pixel (width, height), whole cells
    labels: np.ndarray
    sse: float


def kmeans_patch_geometry(boxes, k, seed=0, cell_size=4):
    """Cluster (width, height) boxes; cluster mean sizes rounded to whole cells."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    res = kmeans(b, k, seed)
    cells = np.maximum(np.rint(res.centers / cell_size), 1).astype(np.int64)
    return GeometryClusters(cells * cell_size, res.labels, res.sse)


# -- visual categories -----------------------------------------------------

def patch_features(patches, cell_size=4):
    """Flattened HOG of equally sized patches, shape (N, d)."""
    feats = [hog_extract(p, cell_size).data.ravel() for p in patches]
    return np.array(feats)


def category_objective(w, x, labels, c, negatives=None):
    """1/2 sum_k |w_k|^2 + C sum_k sum_i hinge(y_ik w_k . x_i), one-vs-rest."""
    scores = x @ w.T
    y = -np.ones_like(scores)
    y[np.arange(len(labels)), labels] = 1
    total = 0.5 * float((w * w).sum()) + c * float(np.maximum(0, 1 - y * scores).sum())
    if negatives is not None and len(negatives):
        total += c * float(np.maximum(0, 1 + negatives @ w.T).sum())
    return total


@dataclass(eq=False)
class CategoryResult:
    weights: np.ndarray  # (K, d + 1), last column is the bias
    labels: np.ndarray
    objectives: list = field(default_factory=list)
    rounds: int = 0
    converged: bool = False
    reseed_rounds: list = field(default_factory=list)

    @property
    def filters(self):
        return self.weights[:, :-1]

    @property
    def bias(self):
        return self.weights[:, -1]


def _with_bias(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def learn_visual_categories(features, k, c=0.01, max_rounds=10, seed=0, negatives=None,
                            init_labels=None, strict=False, tol=1e-4):
    """Alternate one-vs-rest margin training and argmax relabelling.

    ``features`` is (N, d). Each round trains w_k on instances labelled k
    against all others (and optional background ``negatives``), then sets
    t_i = argmax_k w_k . x_i (lowest k on ties). The objective cannot rise
    across a round: a re-solve that does not lower it keeps the old w_k, and
    the relabel step is a descent step for the one-vs-rest hinge sum. A
    category emptied by relabelling takes the instance its own class fits
    worst; rounds with such a re-seed are flagged in ``reseed_rounds``.
    """
    x = _with_bias(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    if n < k:
        raise InputError(f"need at least K={k} instances, got {n}")
    neg = None if negatives is None or len(negatives) == 0 else _with_bias(np.asarray(negatives, dtype=np.float64))
    if init_labels is None:
        labels = kmeans(x[:, :-1], k, seed, strict=False).labels.copy()
    else:
        labels = np.asarray(init_labels, dtype=np.int64).copy()
    w = np.zeros((k, x.shape[1]))
    result = CategoryResult(w, labels)
    prev = None
    for rnd in range(1, max_rounds + 1):
        reseeded = False
        for kk in range(k):
            y = np.where(labels == kk, 1.0, -1.0)
            xs, ys = (x, y) if neg is None else (np.vstack([x, neg]), np.concatenate([y, -np.ones(len(neg))]))
            cand = binary_svm(xs, ys, c, tol=tol).beta
            old = w[kk].copy()
            j_old = c * np.maximum(0, 1 - ys * (xs @ old)).sum() + 0.5 * old @ old
            j_new = c * np.maximum(0, 1 - ys * (xs @ cand)).sum() + 0.5 * cand @ cand
            if prev is None or j_new < j_old:
                w[kk] = cand
        obj_trained = category_objective(w, x, labels, c, neg)
        new = np.argmax(x @ w.T, axis=1)
        for kk in range(k):
            if not np.any(new == kk):
                # empty category: take the instance its class fits worst
                margin = (x @ w.T)[np.arange(n), new]
                counts = np.bincount(new, minlength=k)
                eligible = counts[new] > 1
                if eligible.any():
                    worst = int(np.flatnonzero(eligible)[np.argmin(margin[eligible])])
                    new[worst] = kk
                    reseeded = True
        changed = not np.array_equal(new, labels)
        labels = new
        obj = category_objective(w, x, labels, c, neg)
        if not reseeded and obj > obj_trained + 1e-9 * max(1.0, abs(obj_trained)):
            raise AssertionError(f"relabel step raised the objective: {obj_trained} -> {obj}")
        if reseeded:
            result.reseed_rounds.append(rnd)
        result.objectives.append(obj)
        result.rounds = rnd
        prev = obj
        if not changed:
            result.converged = True
            break
    if not result.converged:
        warnings.warn("visual-category alternation hit max_rounds", ConvergenceWarning)
        if strict:
            raise ConvergenceWarning("visual-category alternation did not converge")
    result.weights = w
    result.labels = labels
    return result


def label_purity(labels, truth):
    """Fraction of instances sharing the majority true class of their cluster."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    hits = 0
    for k in np.unique(labels):
        _, counts = np.unique(truth[labels == k], return_counts=True)
        hits += counts.max()
    return hits / len(labels)


# -- single-part types -----------------------------------------------------

def neighbor_displacements(joints, part_id, neighbors, torso_height):
    """(N, 2 * len(neighbors)) displacements from a part to its tree neighbours."""
    joints = np.asarray(joints, dtype=np.float64)
    h = np.asarray(torso_height, dtype=np.float64).reshape(-1, 1)
    if np.any(h <= 0):
        raise InputError("torso height must be positive")
    cols = [(joints[:, nb, :] - joints[:, part_id, :]) / h for nb in neighbors]
    return np.hstack(cols) if cols else np.zeros((joints.shape[0], 0))


def derive_single_part_types(displacements, k, seed=0):
    """Type labels for a single part by k-means over its normalized neighbour displacements."""
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim == 1:
        d = d[:, None]
    if d.shape[1] == 0:
        return np.zeros(d.shape[0], dtype=np.int64)
    return kmeans(d, k, seed, strict=False).labels.astype(np.int64)


# -- compatibility and anchors ---------------------------------------------

@dataclass(eq=False)
class Compatibility:
    unary: list  # per part (K,)
    pairwise: list  # per edge (Kp, Kc), -B_LARGE where never observed


def estimate_compatibility(labels, num_types, tree):
    """Log-frequency initializers for type biases.

    ``labels`` is (N, P) integer types per instance. Unary biases are
    log p(t_i); pairwise biases are log p(t_i, t_j) over tree edges, with
    never-observed pairs set to -B_LARGE so inference prunes them.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise InputError("no labelled instances")
    unary = []
    for i, k in enumerate(num_types):
        counts = np.bincount(labels[:, i], minlength=k).astype(np.float64)
        with np.errstate(divide="ignore"):
            unary.append(np.where(counts > 0, np.log(counts / n), -B_LARGE))
    pairwise = []
    for a, b in tree.edges:
        tab = np.zeros((num_types[a], num_types[b]))
        np.add.at(tab, (labels[:, a], labels[:, b]), 1.0)
        with np.errstate(divide="ignore"):
            pairwise.append(np.where(tab > 0, np.log(tab / n), -B_LARGE))
    return Compatibility(unary, pairwise)


def estimate_anchors(cells, labels, tree, num_types):
    """Per edge and type pair, the rounded mean child-minus-parent offset in cells.

    ``cells`` is (N, P, 2) integer part cells. Unobserved pairs fall back to
    the edge's overall mean offset.
    """
    cells = np.asarray(cells, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    for a, b in tree.edges:
        disp = cells[:, b] - cells[:, a]
        anc = np.zeros((num_types[a], num_types[b], 2), dtype=np.int64)
        anc[:] = np.rint(disp.mean(0)).astype(np.int64)
        for t in range(num_types[a]):
            for u in range(num_types[b]):
                m = (labels[:, a] == t) & (labels[:, b] == u)
                if m.any():
                    anc[t, u] = np.rint(disp[m].mean(0)).astype(np.int64)
        out.append(anc)
    return out
