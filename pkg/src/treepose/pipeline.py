"""End-to-end learning and detection for the human part layout."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NotTreeRealizableError
from .features import FeaturePyramid, build_pyramid, hog_extract, pixel_to_cell, rescale
from .inference import fit_skeleton, infer_map, pose_joints
from .layout import KEYPOINT_MIRROR, human_parts
from .model import B_LARGE, ModelParameters, PartHypothesis, PartKind, PoseHypothesis, TreeStructure
from .structsvm import TrainerConfig, TrainingExample, _patch, train_struct_svm
from .training import (
    derive_single_part_types, estimate_anchors, estimate_compatibility,
    kmeans_patch_geometry, learn_visual_categories, neighbor_displacements,
)
from .treelearn import chow_liu_tree, cl_grouping, locations_to_samples, part_locations, sample_distances

# padding (pixels) added around rescaled positives so every filter fits
POSITIVE_PAD = 32


@dataclass(eq=False)
class TreeResult:
    tree: TreeStructure
    latent: object  # LatentTree from CLGrouping (may hold hidden nodes)
    used_fallback: bool
    reason: str = ""


def learn_tree(annotations, parts, tolerance=0.05, d_max=20.0, root_name="torso"):
    """CLGrouping over part locations; the Chow-Liu skeleton when it needs hidden nodes."""
    samples = locations_to_samples(annotations, parts)
    d = sample_distances(samples, d_max=d_max)
    names = [p.name for p in parts]
    if root_name not in names:
        raise InputError(f"root part {root_name!r} is not a part")
    root = names.index(root_name)
    reason = ""
    try:
        latent = cl_grouping(d, tolerance)
        if latent.hidden_count == 0:
            tree = TreeStructure.from_undirected(len(parts), latent.tree.edges, root)
            return TreeResult(tree, latent, False)
        reason = f"{latent.hidden_count} hidden node(s)"
    except NotTreeRealizableError as exc:
        latent = None
        reason = f"not tree-realizable: {exc}"
    mst = chow_liu_tree(d)
    return TreeResult(TreeStructure.from_undirected(len(parts), mst.edges, root), latent, True, reason)


@dataclass(eq=False)
class Instance:
    """A positive training instance at canonical scale."""

    hog: object
    locations: np.ndarray  # (P, 2) pixels in the padded, rescaled image
    cells: np.ndarray  # (P, 2) int HOG cells
    image: str
    mirrored: bool


def prepare_instance(img, keypoints, person_height, parts, config, mirror=False, name=""):
    """Rescale to canonical height, pad, optionally mirror, and compute HOG."""
    s = config.canonical_height / person_height
    im = rescale(img, s)
    # rescale maps pixel centres: p' = (p + 0.5) * s - 0.5
    kp = (np.asarray(keypoints, dtype=np.float64)[:, :2] + 0.5) * (np.array(im.shape[::-1]) / np.array(img.shape[::-1])) - 0.5
    im = np.pad(im, POSITIVE_PAD, mode="edge")
    kp = kp + POSITIVE_PAD
    if mirror:
        im = im[:, ::-1]
        kp = kp[list(KEYPOINT_MIRROR)]
        kp[:, 0] = im.shape[1] - 1 - kp[:, 0]
    locs = part_locations(kp[None], parts)[0]
    hog = hog_extract(im, config.cell_size)
    cells = pixel_to_cell(locs, 1.0, config.cell_size)
    cells[:, 0] = np.clip(cells[:, 0], 0, hog.cells_x - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, hog.cells_y - 1)
    return Instance(hog, locs, cells, name, mirror)


def collect_instances(annotations, load, parts, config):
    """Positives plus their mirrored copies, visible annotations only."""
    out = []
    for person in annotations.people:
        if np.any(person.keypoints[:, 2] <= 0):
            continue
        img = load(person.image)
        for mirror in (False, True):
            out.append(prepare_instance(img, person.keypoints, person.person_height, parts, config,
                                        mirror, person.image))
    if not out:
        raise InputError("no fully visible training instances")
    return out


def torso_heights(instances, parts):
    names = {p.name: p.id for p in parts}
    sho = 0.5 * np.array([i.locations[names["r_shoulder"]] + i.locations[names["l_shoulder"]] for i in instances])
    hip = 0.5 * np.array([i.locations[names["r_hip"]] + i.locations[names["l_hip"]] for i in instances])
    return np.maximum(np.linalg.norm(sho - hip, axis=1), 1e-6)


def part_boxes(instances, part, pad):
    """(N, 2) pixel (width, height) of the box around a combined part's joints."""
    pts = np.array([i.locations[list(part.constituent_ids)] for i in instances])
    return pts.max(axis=1) - pts.min(axis=1) + pad


@dataclass(eq=False)
class TypeAssignment:
    labels: np.ndarray  # (N, P)
    num_types: list
    filter_dims: list
    category_logs: dict = field(default_factory=dict)
    filters: dict = field(default_factory=dict)  # (part, type) -> initial filter


def background_patches(negative_hogs, h, w, count, rng):
    out = []
    for _ in range(count):
        hog = negative_hogs[rng.integers(len(negative_hogs))]
        if hog.cells_y < h or hog.cells_x < w:
            continue
        y = rng.integers(h // 2, hog.cells_y - h + h // 2 + 1)
        x = rng.integers(w // 2, hog.cells_x - w + w // 2 + 1)
        out.append(_patch(hog, h, w, x, y).ravel())
    return np.array(out) if out else None


def assign_types(instances, parts, tree, config, negative_hogs=()):
    """Single-part types from neighbour offsets; combined-part types from appearance."""
    rng = np.random.default_rng(config.seed)
    n = len(instances)
    labels = np.zeros((n, len(parts)), dtype=np.int64)
    num_types, dims = [], []
    logs, init = {}, {}
    nbrs = tree.neighbors()
    locs = np.array([i.locations for i in instances])
    th = torso_heights(instances, parts)
    cs = config.cell_size
    for p in parts:
        if p.kind == PartKind.SINGLE:
            disp = neighbor_displacements(locs, p.id, nbrs[p.id], th)
            labels[:, p.id] = derive_single_part_types(disp, p.num_types, config.seed + p.id)
            k = p.num_types
            num_types.append(k)
            dims.append([(config.single_filter_cells, config.single_filter_cells)] * k)
            continue
        boxes = part_boxes(instances, p, 2 * cs)
        geo = kmeans_patch_geometry(boxes, min(config.geometry_clusters, len(np.unique(boxes, axis=0))),
                                    config.seed + p.id, cs)
        ngeo = len(geo.sizes)
        per = [p.num_types // ngeo + (1 if g < p.num_types % ngeo else 0) for g in range(ngeo)]
        part_dims, offset = [], 0
        for g in range(ngeo):
            w, h = (int(v) // cs for v in geo.sizes[g])
            members = np.flatnonzero(geo.labels == g)
            k = max(1, min(per[g], len(members)))
            feats = np.array([_patch(instances[i].hog, h, w, *instances[i].cells[p.id]).ravel() for i in members])
            neg = background_patches(negative_hogs, h, w, 2 * len(members), rng) if len(negative_hogs) else None
            res = learn_visual_categories(feats, k, config.category_c, config.category_rounds,
                                          config.seed + p.id, negatives=neg)
            labels[members, p.id] = offset + res.labels
            for t in range(k):
                init[(p.id, offset + t)] = res.filters[t].reshape(h, w, -1)
            logs[p.name] = {"geometry": int(g), "objectives": [float(o) for o in res.objectives],
                            "rounds": res.rounds, "converged": res.converged}
            part_dims.extend([(h, w)] * k)
            offset += k
        num_types.append(offset)
        dims.append(part_dims)
    return TypeAssignment(labels, num_types, dims, logs, init)


def build_template(parts, tree, types, instances, config):
    """Model skeleton with anchors and log-frequency biases; filters from categories."""
    cells = np.array([i.cells for i in instances])
    comp = estimate_compatibility(types.labels, types.num_types, tree)
    anchors = estimate_anchors(cells, types.labels, tree, types.num_types)
    model = ModelParameters.zeros(parts, tree, types.filter_dims, config.cell_size)
    for (pid, t), f in types.filters.items():
        model.filters[pid][t][:] = f
    for i in range(len(parts)):
        model.unary_bias[i][:] = np.maximum(comp.unary[i], -config.b_large)
    for e in range(len(tree.edges)):
        model.anchors[e][:] = anchors[e]
        model.pairwise_bias[e][:] = np.where(comp.pairwise[e] <= -B_LARGE, -config.b_large, comp.pairwise[e])
    return model


def instance_pose(instance, labels):
    return PoseHypothesis(tuple(
        PartHypothesis(i, int(c[0]), int(c[1]), 0, int(labels[i])) for i, c in enumerate(instance.cells)
    ))


def model_parts(parts, num_types):
    from dataclasses import replace

    return [replace(p, num_types=int(k)) for p, k in zip(parts, num_types)]


@dataclass(eq=False)
class TrainedPipeline:
    model: ModelParameters
    parts: list
    tree: TreeStructure
    tree_result: TreeResult
    log: list
    converged: bool


def train_pipeline(annotations, load, negative_images, config, log=None):
    """Learn the tree, the part types and all parameters from annotated images."""
    emit = log or (lambda rec: None)
    parts = human_parts(config.num_single_types, config.num_combined_types)
    tr = learn_tree(annotations, parts, config.tree_tolerance, config.d_max, config.root_part)
    emit({"stage": "tree", "fallback": tr.used_fallback, "reason": tr.reason,
          "hidden_count": 0 if tr.latent is None else int(tr.latent.hidden_count),
          "edges": [list(e) for e in tr.tree.edges]})
    instances = collect_instances(annotations, load, parts, config)
    neg_imgs = [load(n) for n in negative_images]
    neg_hogs = [hog_extract(im, config.cell_size) for im in neg_imgs]
    types = assign_types(instances, parts, tr.tree, config, neg_hogs)
    emit({"stage": "types", "num_types": types.num_types, "categories": types.category_logs})
    parts = model_parts(parts, types.num_types)
    template = build_template(parts, tr.tree, types, instances, config)
    min_cells = template.max_filter_dims()
    examples = []
    for inst, lab in zip(instances, types.labels):
        pyr = FeaturePyramid([inst.hog], 2.0 ** (1.0 / config.interval), (1.0,))
        examples.append(TrainingExample(1, pyr, instance_pose(inst, lab), inst.image))
    for name, im in zip(negative_images, neg_imgs):
        pyr = build_pyramid(im, config.cell_size, config.interval, min_cells)
        examples.append(TrainingExample(-1, pyr, image_id=name))
    tcfg = TrainerConfig(
        c=config.svm_c, max_passes=config.max_passes, negative_cache_cap=config.negative_cache_cap,
        convergence_tol=config.convergence_tol, detections_per_negative=config.detections_per_negative,
        qp_tol=config.qp_tol, seed=config.seed,
    )
    res = train_struct_svm(examples, template, parts, tr.tree, tcfg,
                           log=lambda rec: emit(dict(stage="svm", **rec)))
    model = res.model
    model.meta.update({"part_names": [p.name for p in parts], "canonical_height": config.canonical_height,
                       "interval": config.interval})
    return TrainedPipeline(model, parts, tr.tree, tr, res.log, res.converged)


def detect(model, parts, tree, img, config, threshold=None, max_detections=None, debug_dir=None):
    """Detections on one image, each with pixel joints and a fitted skeleton."""
    pyr = build_pyramid(img, model.cell_size, config.interval, model.max_filter_dims())
    dets = infer_map(model, parts, tree, pyr,
                     threshold=config.detect_threshold if threshold is None else threshold,
                     max_detections=config.max_detections if max_detections is None else max_detections,
                     nms_overlap=config.nms_iou, debug_dir=debug_dir)
    out = []
    for d in dets:
        joints = pose_joints(d.pose, parts, pyr.level_scales, model.cell_size)
        skel = fit_skeleton(d.pose, parts, pyr.level_scales, model.cell_size)
        out.append((d, joints, skel))
    return out
