"""Latent tree structure learning over part-location variables.

Correlations -> information distances -> recursive grouping, optionally
preceded by a Chow-Liu spanning tree (CLGrouping).
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NotTreeRealizableError
from .model import TreeStructure

D_MAX = 20.0
DEFAULT_TOLERANCE = 0.05
SCHEMES = ("xy-stacked", "x-only", "y-only")


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    values: np.ndarray
    variable_names: tuple
    dropped: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InputError("sample matrix must be 2-D")
        if v.shape[0] < 2:
            raise InputError(f"need at least 2 samples, got {v.shape[0]}")
        if len(self.variable_names) != v.shape[1]:
            raise InputError("variable_names length does not match columns")
        if not np.all(np.isfinite(v)):
            raise InputError("sample matrix contains non-finite values")
        var = v.var(axis=0)
        bad = np.flatnonzero(var <= 0)
        if bad.size:
            names = [self.variable_names[i] for i in bad[:5]]
            raise InputError(f"zero-variance columns rejected: {names}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))


def compute_correlations(samples):
    """Pearson correlation matrix of the sample columns."""
    if not isinstance(samples, SampleMatrix):
        samples = SampleMatrix(np.asarray(samples), tuple(map(str, range(np.shape(samples)[1]))))
    x = samples.values
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def info_distances(corr, d_max=D_MAX):
    """d_ij = -log|rho_ij|, clamped to ``d_max`` for near-independent pairs."""
    r = np.abs(np.asarray(corr, dtype=np.float64))
    with np.errstate(divide="ignore"):
        d = -np.log(np.minimum(r, 1.0))
    d = np.where(r < np.exp(-d_max), d_max, d)
    d = np.minimum(d, d_max)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class TripletStatistic:
    i: int
    j: int
    k: int
    phi: float


def test_triplet(d, i, j, k):
    """Phi_ijk = d_jk - d_ik."""
    if len({i, j, k}) != 3:
        raise InputError(f"triplet indices must be distinct, got {(i, j, k)}")
    return TripletStatistic(i, j, k, float(d[j, k] - d[i, k]))


test_triplet.__test__ = False


@dataclass(frozen=True, eq=False)
class LatentTree:
    """Tree over observed nodes 0..V-1 and hidden nodes V..V+H-1.

    ``edge_lengths[e]`` is the estimated information distance along
    ``tree.edges[e]``.
    """

    tree: TreeStructure
    hidden_count: int
    edge_lengths: np.ndarray

    @property
    def num_observed(self):
        return self.tree.num_nodes - self.hidden_count

    def is_hidden(self, node):
        return node >= self.num_observed

    def path_distances(self):
        n = self.tree.num_nodes
        adj = [[] for _ in range(n)]
        for (a, b), w in zip(self.tree.edges, self.edge_lengths):
            adj[a].append((b, w))
            adj[b].append((a, w))
        out = np.zeros((n, n))
        for s in range(n):
            seen = {s}
            queue = deque([s])
            while queue:
                u = queue.popleft()
                for v, w in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        out[s, v] = out[s, u] + w
                        queue.append(v)
        return out

    def degrees(self):
        deg = np.zeros(self.tree.num_nodes, dtype=int)
        for a, b in self.tree.edges:
            deg[a] += 1
            deg[b] += 1
        return deg


def _check_distances(d):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InputError("distance matrix must be square")
    if not np.all(np.isfinite(d)):
        raise InputError("distance matrix must be finite")
    if np.any(d < 0) or np.any(np.abs(np.diag(d)) > 0):
        raise InputError("distances must be non-negative with zero diagonal")
    if not np.allclose(d, d.T, atol=1e-12):
        raise InputError("distance matrix must be symmetric")
    return d


def _pair_spread(D, i, j, others):
    vals = D[i, others] - D[j, others]
    return float(vals.max() - vals.min()), vals


def _families(D, active, tol):
    """Group active nodes whose triplet statistic is constant over witnesses."""
    parent = {u: u for u in active}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    best = None
    arr = np.array(active)
    for a, b in itertools.combinations(active, 2):
        others = arr[(arr != a) & (arr != b)]
        spread, vals = _pair_spread(D, a, b, others)
        if spread <= tol:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        elif best is None or spread < best[0]:
            dev = np.abs(vals - np.median(vals))
            best = (spread, (a, b, int(others[int(np.argmax(dev))])))
    groups = {}
    for u in active:
        groups.setdefault(find(u), []).append(u)
    fams = sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
    return fams, best


def _find_parent(D, fam, active, tol):
    arr = np.array(active)
    for p in fam:
        ok = True
        for c in fam:
            if c == p:
                continue
            others = arr[(arr != c) & (arr != p)]
            # p is c's parent when p sits on the path from c to every witness
            if np.any(np.abs(D[c, others] - D[p, others] - D[c, p]) > tol):
                ok = False
                break
        if ok:
            return p
    return None


def _grow(D, size):
    if size <= D.shape[0]:
        return D
    out = np.full((size, size), np.nan)
    out[:D.shape[0], :D.shape[1]] = D
    return out


def recursive_grouping(d, tolerance=DEFAULT_TOLERANCE):
    """Recover a latent tree from an (approximately) additive tree metric.

    Nodes are grouped into families by the triplet test; a family member
    lying on the path from every other member to every witness becomes their
    parent, otherwise a hidden parent is introduced. Repeats on the set of
    parents until at most two nodes remain.
    """
    d = _check_distances(d)
    if tolerance < 0:
        raise InputError("tolerance must be >= 0")
    V = d.shape[0]
    if V == 1:
        return LatentTree(TreeStructure(1, (), 0), 0, np.zeros(0))
    D = np.full((2 * V, 2 * V), np.nan)
    D[:V, :V] = d
    active = list(range(V))
    next_id = V
    links = []  # (parent, child, length)
    while len(active) > 2:
        fams, worst = _families(D, active, tolerance)
        if all(len(f) == 1 for f in fams):
            spread, triplet = worst
            raise NotTreeRealizableError(
                f"no consistent grouping among {len(active)} active nodes; worst triplet "
                f"{triplet} deviates by {spread:.4g} nats (tolerance {tolerance})",
                triplet=triplet, deviation=spread,
            )
        new_active, new_hidden = [], []
        for fam in fams:
            if len(fam) == 1:
                new_active.append(fam[0])
                continue
            p = _find_parent(D, fam, active, tolerance)
            if p is not None:
                for c in fam:
                    if c != p:
                        links.append((p, c, max(D[p, c], 0.0)))
                new_active.append(p)
                continue
            h = next_id
            next_id += 1
            D = _grow(D, next_id)
            D[h, h] = 0.0
            arr = np.array(active)
            for i in fam:
                est = []
                for j in fam:
                    if j == i:
                        continue
                    ks = arr[(arr != i) & (arr != j)]
                    est.extend(0.5 * (D[i, j] + D[i, ks] - D[j, ks]))
                D[i, h] = D[h, i] = max(float(np.mean(est)), 0.0)
                links.append((h, i, D[i, h]))
            for k in active:
                if k in fam:
                    continue
                D[h, k] = D[k, h] = float(np.mean([D[i, k] - D[i, h] for i in fam]))
            new_hidden.append((h, fam))
            new_active.append(h)
        for (h, fa), (g, fb) in itertools.combinations(new_hidden, 2):
            vals = [D[i, l] - D[i, h] - D[l, g] for i in fa for l in fb]
            D[h, g] = D[g, h] = float(np.mean(vals))
        active = sorted(new_active)
    if len(active) == 2:
        a, b = active
        links.append((a, b, max(D[a, b], 0.0)))
    out = _assemble(next_id, V, links)
    _check_reproduction(out, d, tolerance)
    return out


def _check_reproduction(latent, d, tol):
    """Every observed pair must be reproduced within ``tol`` per edge on its path.

    Each grouping step places an edge within ``tol``, so errors add up at
    most linearly in the hop count. Larger errors mean d is not a tree metric.
    """
    V = d.shape[0]
    err = np.abs(latent.path_distances()[:V, :V] - d)
    unit = LatentTree(latent.tree, latent.hidden_count, np.ones(len(latent.tree.edges)))
    hops = unit.path_distances()[:V, :V]
    excess = err - (tol * hops + 1e-9)
    if np.all(excess <= 0):
        return
    i, j = np.unravel_index(int(np.argmax(excess)), excess.shape)
    i, j = int(min(i, j)), int(max(i, j))
    tree_d = latent.path_distances()[:V, :V]
    others = [k for k in range(V) if k not in (i, j)]
    dev = [abs((d[j, k] - d[i, k]) - (tree_d[j, k] - tree_d[i, k])) for k in others]
    k = others[int(np.argmax(dev))] if others else j
    raise NotTreeRealizableError(
        f"grouped tree misses d({i},{j}) by {err[i, j]:.4g} nats over {int(hops[i, j])} edges; "
        f"worst triplet {(i, j, k)} (tolerance {tol})",
        triplet=(i, j, k), deviation=float(err[i, j]),
    )


def _assemble(num_nodes, num_observed, links, root=0):
    lengths = {frozenset((a, b)): w for a, b, w in links}
    tree = TreeStructure.from_undirected(num_nodes, [(a, b) for a, b, _ in links], root)
    edge_lengths = np.array([lengths[frozenset(e)] for e in tree.edges])
    return LatentTree(tree, num_nodes - num_observed, edge_lengths)


def chow_liu_tree(d):
    """Minimum spanning tree of ``d`` (Kruskal; lowest index pair wins ties)."""
    d = _check_distances(d)
    V = d.shape[0]
    iu, ju = np.triu_indices(V, 1)
    order = np.lexsort((ju, iu, d[iu, ju]))
    parent = list(range(V))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen = []
    for k in order:
        a, b = int(iu[k]), int(ju[k])
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            chosen.append((a, b))
            if len(chosen) == V - 1:
                break
    return TreeStructure.from_undirected(V, chosen, 0)


def cl_grouping(d, tolerance=DEFAULT_TOLERANCE):
    """Chow-Liu tree, then recursive grouping on every internal node's neighbourhood."""
    d = _check_distances(d)
    V = d.shape[0]
    if V <= 2:
        return recursive_grouping(d, tolerance)
    mst = chow_liu_tree(d)
    adj = {u: set(ns) for u, ns in enumerate(mst.neighbors())}
    length = {frozenset(e): d[e] for e in mst.edges}
    D = np.full((2 * V, 2 * V), np.nan)
    D[:V, :V] = d
    next_id = V
    internal = [u for u in range(V) if len(adj[u]) > 1]
    for i in internal:
        nbd = sorted({i} | adj[i])
        local = recursive_grouping(D[np.ix_(nbd, nbd)], tolerance)
        for n in list(adj[i]):
            adj[i].discard(n)
            adj[n].discard(i)
            del length[frozenset((i, n))]
        mapping = {j: nbd[j] for j in range(len(nbd))}
        for h in range(len(nbd), local.tree.num_nodes):
            mapping[h] = next_id
            adj[next_id] = set()
            next_id += 1
        D = _grow(D, next_id)
        for (a, b), w in zip(local.tree.edges, local.edge_lengths):
            ga, gb = mapping[a], mapping[b]
            adj[ga].add(gb)
            adj[gb].add(ga)
            length[frozenset((ga, gb))] = w
        if local.hidden_count:
            ld = local.path_distances()
            members = set(mapping.values())
            for lh in range(len(nbd), local.tree.num_nodes):
                h = mapping[lh]
                for lj, gj in mapping.items():
                    D[h, gj] = D[gj, h] = ld[lh, lj]
            # everything outside the spliced subtree hangs off one gate node;
            # paths from local nodes in the other directions pass through h
            gate = {m: m for m in members}
            queue = deque(sorted(members))
            while queue:
                u = queue.popleft()
                for v in sorted(adj[u]):
                    if v not in gate:
                        gate[v] = gate[u]
                        queue.append(v)
            local_adj = local.tree.neighbors()
            for lh in range(len(nbd), local.tree.num_nodes):
                h = mapping[lh]
                direction = {}
                for first in local_adj[lh]:
                    stack, seen = [first], {lh, first}
                    while stack:
                        u = stack.pop()
                        direction[mapping[u]] = first
                        for v in local_adj[u]:
                            if v not in seen:
                                seen.add(v)
                                stack.append(v)
                for x, y in gate.items():
                    if x in members:
                        continue
                    witnesses = [c for c in nbd if direction[c] != direction[y]]
                    D[h, x] = D[x, h] = float(np.mean([D[c, x] - D[c, h] for c in witnesses]))
    links = [(min(e), max(e), w) for e, w in length.items()]
    links.sort()
    return _assemble(next_id, V, links)


# -- location samples --------------------------------------------------------

def part_locations(keypoints, parts):
    """(N, P, 2) locations: single parts are joints, combined parts the mean of theirs."""
    kp = np.asarray(keypoints, dtype=np.float64)[..., :2]
    out = np.empty((kp.shape[0], len(parts), 2))
    for p in parts:
        if p.constituent_ids:
            out[:, p.id] = kp[:, list(p.constituent_ids)].mean(axis=1)
        else:
            out[:, p.id] = kp[:, p.id]
    return out


def locations_to_samples(annotations, parts, scheme="xy-stacked"):
    """Scalar observation columns from 2-D part locations.

    ``xy-stacked`` yields x columns for every part followed by y columns;
    :func:`sample_distances` averages the two channel distances per part pair.
    Instances with an invisible required keypoint are dropped and counted.
    """
    if scheme not in SCHEMES:
        raise InputError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    kp = annotations.keypoint_array()
    visible = kp[..., 2] > 0
    keep = visible.all(axis=1)
    locs = part_locations(kp[keep], parts)
    names = [p.name for p in parts]
    if scheme == "xy-stacked":
        values = np.concatenate([locs[..., 0], locs[..., 1]], axis=1)
        cols = [n + ".x" for n in names] + [n + ".y" for n in names]
    elif scheme == "x-only":
        values, cols = locs[..., 0], [n + ".x" for n in names]
    else:
        values, cols = locs[..., 1], [n + ".y" for n in names]
    return SampleMatrix(values, tuple(cols), dropped=int((~keep).sum()))


def sample_distances(samples, scheme="xy-stacked", d_max=D_MAX):
    d = info_distances(compute_correlations(samples), d_max)
    if scheme == "xy-stacked":
        v = d.shape[0] // 2
        return 0.5 * (d[:v, :v] + d[v:, v:])
    return d


def tree_to_dot(latent, names=None):
    lines = ["graph latent_tree {"]
    for u in range(latent.tree.num_nodes):
        if latent.is_hidden(u):
            lines.append(f'  n{u} [label="h{u}", shape=circle, style=dashed];')
        else:
            label = names[u] if names else str(u)
            lines.append(f'  n{u} [label="{label}"];')
    for (a, b), w in zip(latent.tree.edges, latent.edge_lengths):
        lines.append(f'  n{a} -- n{b} [label="{w:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
