"""Domain types: parts, tree structure, typed model parameters, poses.

Also holds model validation and the versioned binary model format.
"""
from __future__ import annotations

import enum
import json
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    ModelFormatError,
    TruncatedStreamError,
    VersionMismatchError,
)

NUM_CHANNELS = 31
# quadratic deformation weights must stay at or below -CONCAVITY_EPS
CONCAVITY_EPS = 1e-2
# pairwise biases at or below this level are pruned from inference
B_LARGE = 100.0

FORMAT_MAGIC = b"TPSM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_SECTION = struct.Struct("<4sQ")
_CRC = struct.Struct("<I")


class PartKind(str, enum.Enum):
    SINGLE = "single"
    COMBINED = "combined"


@dataclass(frozen=True)
class PartSpec:
    id: int
    name: str
    kind: PartKind
    constituent_ids: tuple[int, ...] = ()
    num_types: int = 1

    def problems(self, parts_by_id=None):
        out = []
        if self.num_types < 1:
            out.append(f"part {self.id}: num_types must be >= 1")
        if self.kind == PartKind.SINGLE:
            if self.constituent_ids:
                out.append(f"part {self.id}: single part lists constituents")
        else:
            ids = self.constituent_ids
            if len(set(ids)) < 2 or len(set(ids)) != len(ids):
                out.append(f"part {self.id}: combined part needs >= 2 distinct constituents")
            if parts_by_id is not None:
                for c in ids:
                    ref = parts_by_id.get(c)
                    if ref is None:
                        out.append(f"part {self.id}: constituent {c} does not exist")
                    elif ref.kind != PartKind.SINGLE:
                        out.append(f"part {self.id}: constituent {c} is not a single part")
        return out


def part_problems(parts):
    by_id = {p.id: p for p in parts}
    out = []
    if [p.id for p in parts] != list(range(len(parts))):
        out.append("part ids must be 0..P-1 in order")
    for p in parts:
        out.extend(p.problems(by_id))
    return out


@dataclass(frozen=True)
class TreeStructure:
    """A tree over ``num_nodes`` nodes given as (parent, child) edges."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))

    @classmethod
    def from_undirected(cls, num_nodes, pairs, root=0):
        """Orient an undirected edge list away from ``root`` (BFS, low index first)."""
        adj = [[] for _ in range(num_nodes)]
        for a, b in pairs:
            adj[a].append(b)
            adj[b].append(a)
        seen = [False] * num_nodes
        seen[root] = True
        queue = deque([root])
        edges = []
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u]):
                if not seen[v]:
                    seen[v] = True
                    edges.append((u, v))
                    queue.append(v)
        if len(edges) != num_nodes - 1:
            raise ValueError("edge list does not form a spanning tree")
        return cls(num_nodes, tuple(edges), root)

    def problems(self):
        n = self.num_nodes
        out = []
        if n < 1:
            return ["tree must have at least one node"]
        if not 0 <= self.root < n:
            out.append(f"root {self.root} out of range")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                out.append(f"edge ({a},{b}) references a missing node")
        if out:
            return out
        if len(self.edges) != n - 1:
            out.append(f"edge count {len(self.edges)} != num_nodes - 1 = {n - 1}")
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.edges:
            ra, rb = find(a), find(b)
            if ra == rb:
                out.append(f"cycle/duplicate edge at ({a},{b})")
            else:
                parent[ra] = rb
        if len({find(x) for x in range(n)}) != 1:
            out.append("tree is disconnected: some nodes unreachable from root")
        return out

    @property
    def is_valid(self):
        return not self.problems()

    def orientation_problems(self):
        """Edges must point away from the root: one parent per non-root node."""
        out = []
        seen_child = set()
        for a, b in self.edges:
            if b == self.root or b in seen_child:
                out.append(f"edge ({a},{b}) not oriented away from root {self.root}")
            seen_child.add(b)
        if not out:
            reach = {self.root}
            frontier = [self.root]
            kids = self.children()
            while frontier:
                u = frontier.pop()
                for v in kids[u]:
                    reach.add(v)
                    frontier.append(v)
            if len(reach) != self.num_nodes:
                out.append("edge orientation does not reach every node from root")
        return out

    def neighbors(self):
        adj = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]

    def children(self):
        kids = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            kids[a].append(b)
        return kids

    def parent_edge(self):
        """Map child node -> (edge index, parent node)."""
        return {b: (e, a) for e, (a, b) in enumerate(self.edges)}

    def preorder(self):
        kids = self.children()
        order = []
        stack = [self.root]
        while stack:
            u = stack.pop()
            order.append(u)
            stack.extend(reversed(kids[u]))
        return order

    def postorder(self):
        return self.preorder()[::-1]

    def rerooted(self, root):
        return TreeStructure.from_undirected(self.num_nodes, self.edges, root)

    def undirected_edge_set(self):
        return {frozenset(e) for e in self.edges}


@dataclass(frozen=True)
class PartHypothesis:
    part_id: int
    x: int
    y: int
    level: int
    type_id: int

    @property
    def loc(self):
        return (self.x, self.y, self.level)


@dataclass(frozen=True)
class PoseHypothesis:
    parts: tuple[PartHypothesis, ...]
    score: float = 0.0

    @property
    def level(self):
        return self.parts[0].level

    @property
    def types(self):
        return [p.type_id for p in self.parts]


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Appearance filters, deformation weights and type biases.

    ``filters[i][t]`` is a (h, w, 31) HOG filter whose declared size is
    ``filter_dims[i][t]``. Per-edge arrays follow ``tree.edges`` order and
    are indexed ``[parent_type, child_type]``; deformation rows hold
    (w_dx, w_dy, w_dx2, w_dy2) and anchors (ax, ay) in cells.
    """

    cell_size: int
    filter_dims: tuple
    filters: list
    unary_bias: list
    deformation: list
    anchors: list
    pairwise_bias: list
    meta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, parts, tree, filter_dims, cell_size=4, quad=-CONCAVITY_EPS):
        dims = tuple(tuple(tuple(int(v) for v in d) for d in per) for per in filter_dims)
        filters = [[np.zeros((h, w, NUM_CHANNELS)) for h, w in dims[p.id]] for p in parts]
        unary = [np.zeros(p.num_types) for p in parts]
        deform, anchors, pair = [], [], []
        for a, b in tree.edges:
            ka, kb = parts[a].num_types, parts[b].num_types
            w = np.zeros((ka, kb, 4))
            w[..., 2:] = quad
            deform.append(w)
            anchors.append(np.zeros((ka, kb, 2), dtype=np.int64))
            pair.append(np.zeros((ka, kb)))
        return cls(cell_size, dims, filters, unary, deform, anchors, pair)

    def max_filter_dims(self):
        hs = [h for per in self.filter_dims for h, _ in per]
        ws = [w for per in self.filter_dims for _, w in per]
        return max(hs), max(ws)

    def pair_active(self, e):
        return self.pairwise_bias[e] > -B_LARGE

    def equals(self, other):
        if self.cell_size != other.cell_size or self.filter_dims != other.filter_dims:
            return False
        pairs = [
            (self.unary_bias, other.unary_bias),
            (self.deformation, other.deformation),
            (self.anchors, other.anchors),
            (self.pairwise_bias, other.pairwise_bias),
        ]
        for xs, ys in pairs:
            if len(xs) != len(ys):
                return False
            for x, y in zip(xs, ys):
                if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                    return False
        for fa, fb in zip(self.filters, other.filters):
            for x, y in zip(fa, fb):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
        return True

    def clamp_concavity(self, eps=CONCAVITY_EPS):
        """Return a copy with every quadratic weight <= -eps."""
        deform = []
        for w in self.deformation:
            w = w.copy()
            w[..., 2:] = np.minimum(w[..., 2:], -eps)
            deform.append(w)
        return ModelParameters(
            self.cell_size, self.filter_dims, self.filters, self.unary_bias,
            deform, self.anchors, self.pairwise_bias, dict(self.meta),
        )


@dataclass
class ValidationReport:
    problems: list

    @property
    def ok(self):
        return not self.problems

    def __bool__(self):
        return self.ok


def validate_model(model, parts, tree):
    """Check every structural invariant; report instead of raising."""
    problems = part_problems(parts)
    tree_probs = tree.problems()
    problems.extend(tree_probs)
    if not tree_probs:
        problems.extend(tree.orientation_problems())
    if tree.num_nodes != len(parts):
        problems.append(f"tree has {tree.num_nodes} nodes but model has {len(parts)} parts")
        return ValidationReport(problems)
    if len(model.filter_dims) != len(parts) or len(model.filters) != len(parts):
        problems.append("filter table does not cover every part")
        return ValidationReport(problems)
    for p in parts:
        k = p.num_types
        dims = model.filter_dims[p.id]
        filt = model.filters[p.id]
        if len(dims) != k or len(filt) != k:
            problems.append(f"part {p.id}: filter count != num_types {k}")
            continue
        for t in range(k):
            h, w = dims[t]
            if h < 1 or w < 1:
                problems.append(f"part {p.id} type {t}: empty declared filter size")
            if np.shape(filt[t]) != (h, w, NUM_CHANNELS):
                problems.append(
                    f"shape mismatch: part {p.id} type {t} filter {np.shape(filt[t])} "
                    f"vs declared {(h, w, NUM_CHANNELS)}"
                )
        if np.shape(model.unary_bias[p.id]) != (k,):
            problems.append(f"part {p.id}: unary bias shape mismatch")
    if not (len(model.deformation) == len(model.anchors) == len(model.pairwise_bias) == len(tree.edges)):
        problems.append("edge parameter tables do not match tree edges")
        return ValidationReport(problems)
    for e, (a, b) in enumerate(tree.edges):
        if not (0 <= a < len(parts) and 0 <= b < len(parts)):
            continue
        ka, kb = parts[a].num_types, parts[b].num_types
        if model.deformation[e].shape != (ka, kb, 4):
            problems.append(f"edge {e}: deformation shape mismatch")
        elif np.any(model.deformation[e][..., 2:] > -CONCAVITY_EPS + 1e-12):
            problems.append(f"edge {e}: quadratic deformation weight above -{CONCAVITY_EPS}")
        if model.anchors[e].shape != (ka, kb, 2):
            problems.append(f"edge {e}: anchor shape mismatch")
        elif not np.issubdtype(model.anchors[e].dtype, np.integer):
            problems.append(f"edge {e}: anchors must be integers")
        if model.pairwise_bias[e].shape != (ka, kb):
            problems.append(f"edge {e}: pairwise bias shape mismatch")
    for arr in list(model.unary_bias) + list(model.deformation) + list(model.pairwise_bias):
        if np.any(np.isnan(arr)):
            problems.append("NaN in model parameters")
            break
    return ValidationReport(problems)


def reroot_model(model, parts, tree, root):
    """Re-express the same model on the tree rooted at ``root``.

    Flipped edges get transposed type tables, negated linear weights and
    negated anchors, so every pose keeps its score.
    """
    new_tree = tree.rerooted(root)
    index = {e: i for i, e in enumerate(tree.edges)}
    deform, anchors, pair = [], [], []
    for a, b in new_tree.edges:
        if (a, b) in index:
            e = index[(a, b)]
            deform.append(model.deformation[e].copy())
            anchors.append(model.anchors[e].copy())
            pair.append(model.pairwise_bias[e].copy())
        else:
            e = index[(b, a)]
            w = model.deformation[e].transpose(1, 0, 2).copy()
            w[..., :2] *= -1
            deform.append(w)
            anchors.append(-model.anchors[e].transpose(1, 0, 2))
            pair.append(model.pairwise_bias[e].T.copy())
    out = ModelParameters(
        model.cell_size, model.filter_dims, model.filters, model.unary_bias,
        deform, anchors, pair, dict(model.meta),
    )
    return out, new_tree


# -- serialization ---------------------------------------------------------

def _meta_json(model, parts, tree):
    meta = {
        "cell_size": model.cell_size,
        "filter_dims": [[list(d) for d in per] for per in model.filter_dims],
        "parts": [
            {
                "id": p.id,
                "name": p.name,
                "kind": p.kind.value,
                "constituent_ids": list(p.constituent_ids),
                "num_types": p.num_types,
            }
            for p in parts
        ],
        "tree": {"num_nodes": tree.num_nodes, "edges": [list(e) for e in tree.edges], "root": tree.root},
        "extra": model.meta,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _f8(arrays):
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def serialize_model(model, parts, tree):
    """Encode to the versioned little-endian format (see docs/model_format.md)."""
    report = validate_model(model, parts, tree)
    if not report.ok:
        raise ValueError("refusing to serialize invalid model: " + "; ".join(report.problems))
    sections = [
        (b"META", _meta_json(model, parts, tree)),
        (b"FILT", _f8(f for per in model.filters for f in per)),
        (b"UBIA", _f8(model.unary_bias)),
        (b"DEFW", _f8(model.deformation)),
        (b"ANCH", b"".join(np.ascontiguousarray(a, dtype="<i8").tobytes() for a in model.anchors)),
        (b"PBIA", _f8(model.pairwise_bias)),
    ]
    payload = b"".join(_SECTION.pack(tag, len(body)) + body for tag, body in sections)
    head = _HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, 0, len(payload))
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    return head + payload + _CRC.pack(crc)


def _take(buf, offset, dtype, shape):
    n = int(np.prod(shape)) if shape else 1
    nbytes = n * np.dtype(dtype).itemsize
    if offset + nbytes > len(buf):
        raise ModelFormatError("section shorter than declared array sizes")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=offset).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("=")), offset + nbytes


def deserialize_model(data):
    """Decode a byte stream into (model, parts, tree); never returns partial models."""
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise TruncatedStreamError("stream shorter than header")
    magic, version, _, length = _HEADER.unpack_from(data, 0)
    if magic != FORMAT_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {FORMAT_VERSION}")
    end = _HEADER.size + length
    if len(data) < end + _CRC.size:
        raise TruncatedStreamError(f"stream has {len(data)} bytes, header declares {end + _CRC.size}")
    if len(data) > end + _CRC.size:
        raise ModelFormatError("trailing bytes after checksum")
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(data[:end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch")
    sections = {}
    pos = _HEADER.size
    while pos < end:
        if pos + _SECTION.size > end:
            raise ModelFormatError("dangling section header")
        tag, n = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        if pos + n > end:
            raise ModelFormatError(f"section {tag!r} overruns payload")
        sections[tag] = data[pos:pos + n]
        pos += n
    missing = {b"META", b"FILT", b"UBIA", b"DEFW", b"ANCH", b"PBIA"} - set(sections)
    if missing:
        raise ModelFormatError(f"missing sections {sorted(missing)}")
    meta = json.loads(sections[b"META"].decode("utf-8"))
    parts = [
        PartSpec(p["id"], p["name"], PartKind(p["kind"]), tuple(p["constituent_ids"]), p["num_types"])
        for p in meta["parts"]
    ]
    t = meta["tree"]
    tree = TreeStructure(t["num_nodes"], tuple(tuple(e) for e in t["edges"]), t["root"])
    dims = tuple(tuple(tuple(d) for d in per) for per in meta["filter_dims"])

    filters, off = [], 0
    for per in dims:
        row = []
        for h, w in per:
            arr, off = _take(sections[b"FILT"], off, "<f8", (h, w, NUM_CHANNELS))
            row.append(arr)
        filters.append(row)
    unary, off = [], 0
    for p in parts:
        arr, off = _take(sections[b"UBIA"], off, "<f8", (p.num_types,))
        unary.append(arr)
    deform, anchors, pair = [], [], []
    o1 = o2 = o3 = 0
    for a, b in tree.edges:
        ka, kb = parts[a].num_types, parts[b].num_types
        arr, o1 = _take(sections[b"DEFW"], o1, "<f8", (ka, kb, 4))
        deform.append(arr)
        arr, o2 = _take(sections[b"ANCH"], o2, "<i8", (ka, kb, 2))
        anchors.append(arr)
        arr, o3 = _take(sections[b"PBIA"], o3, "<f8", (ka, kb))
        pair.append(arr)
    model = ModelParameters(meta["cell_size"], dims, filters, unary, deform, anchors, pair, meta.get("extra", {}))
    report = validate_model(model, parts, tree)
    if not report.ok:
        raise ModelFormatError("decoded model is invalid: " + "; ".join(report.problems))
    return model, parts, tree


def save_model(path, model, parts, tree):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model, parts, tree))


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
