import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treepose.errors import ConcavityError, InputError
from treepose.features import FeaturePyramid, HogMap, build_pyramid
from treepose.inference import (
    Detection, box_iou, compatibility_score, fit_skeleton, infer_map, nms, part_box, pose_box,
    pose_joints, score_pose,
)
from treepose.layout import human_parts
from treepose.model import (
    ModelParameters, PartHypothesis, PartKind, PartSpec, PoseHypothesis, TreeStructure, reroot_model,
)

from oracles import elimination_max, enumerate_max, random_model, unary_tables


def _det(box, score):
    pose = PoseHypothesis((PartHypothesis(0, 0, 0, 0, 0),), score)
    return Detection(pose, (0, 0, 1.0), score, box)


# -- NMS --------------------------------------------------------------------

def test_nms_identical_detections_keep_one():
    kept = nms([_det((0, 0, 10, 10), 2.0), _det((0, 0, 10, 10), 1.0)])
    assert [d.score for d in kept] == [2.0]


def test_nms_disjoint_boxes_both_kept():
    assert len(nms([_det((0, 0, 10, 10), 1.0), _det((20, 20, 30, 30), 2.0)])) == 2


def test_nms_hand_computed_overlaps():
    b1, b2, b3 = (0, 0, 10, 10), (0, 0, 10, 6), (8, 0, 20, 10)
    assert box_iou(b1, b2)[0] == pytest.approx(0.6)
    assert box_iou(b1, b3)[0] == pytest.approx(0.1)
    kept = nms([_det(b2, 2.0), _det(b3, 1.0), _det(b1, 3.0)])
    assert [d.box for d in kept] == [b1, b3]


# -- compatibility ----------------------------------------------------------

def _two_parts():
    parts = [PartSpec(0, "a", PartKind.SINGLE, (), 2), PartSpec(1, "b", PartKind.SINGLE, (), 2)]
    tree = TreeStructure(2, ((0, 1),), 0)
    return parts, tree, ModelParameters.zeros(parts, tree, [[(1, 1)] * 2] * 2)


def test_compatibility_all_zero():
    parts, tree, model = _two_parts()
    assert compatibility_score([1, 0], model, tree) == 0.0


def test_compatibility_direct_sum():
    parts, tree, model = _two_parts()
    model.unary_bias[0][1] = 0.5
    model.unary_bias[1][0] = -0.25
    model.pairwise_bias[0][1, 0] = 1.0
    assert compatibility_score({0: 1, 1: 0}, model, tree) == 1.25


def test_compatibility_missing_part():
    parts, tree, model = _two_parts()
    with pytest.raises(InputError, match="missing"):
        compatibility_score({0: 1}, model, tree)


def test_compatibility_matches_hand_sum_on_fixture_model():
    rng = np.random.default_rng(0)
    model, parts, tree, _ = random_model(rng, 6, 3, 5, 5)
    types = [int(rng.integers(p.num_types)) for p in parts]
    expect = 0.0
    for i, t in enumerate(types):
        expect += model.unary_bias[i][t]
    for e, (a, b) in enumerate(tree.edges):
        expect += model.pairwise_bias[e][types[a], types[b]]
    assert compatibility_score(types, model, tree) == pytest.approx(expect, abs=1e-12)


# -- exactness --------------------------------------------------------------

def test_single_part_model_returns_top_unary_cells():
    rng = np.random.default_rng(1)
    model, parts, tree, hog = random_model(rng, 1, 2, 9, 9)
    dets = infer_map(model, parts, tree, hog, max_detections=4, nms_overlap=0.3)
    best = np.max(unary_tables(model, parts, hog.data)[0], axis=0)
    ys, xs = np.nonzero(np.isfinite(best))
    order = sorted(zip(-best[ys, xs], ys, xs))
    expect = []
    for negs, y, x in order:
        t = int(np.argmax(unary_tables(model, parts, hog.data)[0][:, y, x]))
        pose = PoseHypothesis((PartHypothesis(0, int(x), int(y), 0, t),), -negs)
        box = pose_box(model, pose, 1.0)
        if expect and np.any(box_iou(box, [b for _, b in expect]) > 0.3):
            continue
        expect.append((-negs, box))
        if len(expect) == 4:
            break
    assert [d.score for d in dets] == pytest.approx([s for s, _ in expect], abs=1e-9)
    assert [d.box for d in dets] == [b for _, b in expect]


def test_three_part_chain_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(3):
        model, parts, tree, hog = random_model(rng, 3, 2, 8, 8, shape="chain")
        for p in parts:  # force two types per part, as in the spec example
            assert p.num_types <= 2
        det = infer_map(model, parts, tree, hog)[0]
        assert det.score == pytest.approx(enumerate_max(model, parts, tree, hog.data), abs=1e-6)
        assert score_pose(model, parts, tree, hog, det.pose) == pytest.approx(det.score, abs=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_four_part_star_matches_exact_max(seed):
    rng = np.random.default_rng(1000 + seed)
    model, parts, tree, hog = random_model(rng, 4, 3, 10, 10, shape="star")
    det = infer_map(model, parts, tree, hog)[0]
    assert det.score == pytest.approx(elimination_max(model, parts, tree, hog.data), abs=1e-6)
    assert score_pose(model, parts, tree, hog, det.pose) == pytest.approx(det.score, abs=1e-6)


def test_pruned_type_pairs_are_never_decoded():
    rng = np.random.default_rng(3)
    model, parts, tree, hog = random_model(rng, 3, 3, 8, 8, shape="chain")
    for e in range(len(tree.edges)):
        pb = model.pairwise_bias[e]
        pb[:] = np.where(rng.uniform(size=pb.shape) < 0.5, -100.0, pb)
        pb[0, 0] = 0.0
    for det in infer_map(model, parts, tree, hog, max_detections=5):
        t = {p.part_id: p.type_id for p in det.pose.parts}
        for e, (a, b) in enumerate(tree.edges):
            assert model.pairwise_bias[e][t[a], t[b]] > -100


@pytest.mark.parametrize("seed", range(8))
def test_root_invariance(seed):
    rng = np.random.default_rng(2000 + seed)
    model, parts, tree, hog = random_model(rng, 4, 3, 9, 9)
    ref = infer_map(model, parts, tree, hog)[0]
    for r in range(tree.num_nodes):
        m2, t2 = reroot_model(model, parts, tree, r)
        det = infer_map(m2, parts, t2, hog)[0]
        assert det.score == pytest.approx(ref.score, abs=1e-9)
        assert det.pose.parts == ref.pose.parts


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(0, 5))
def test_raising_threshold_never_adds_detections(seed, lo, step):
    rng = np.random.default_rng(seed)
    model, parts, tree, hog = random_model(rng, 3, 2, 8, 8)
    a = infer_map(model, parts, tree, hog, threshold=lo, max_detections=1000)
    b = infer_map(model, parts, tree, hog, threshold=lo + step, max_detections=1000)
    assert len(b) <= len(a)
    assert [d.pose for d in b] == [d.pose for d in a[:len(b)]]


def test_threshold_above_every_score_is_empty():
    rng = np.random.default_rng(4)
    model, parts, tree, hog = random_model(rng, 3, 2, 8, 8)
    top = infer_map(model, parts, tree, hog)[0].score
    assert infer_map(model, parts, tree, hog, threshold=top + 1e-6) == []


def test_empty_pyramid_rejected():
    rng = np.random.default_rng(5)
    model, parts, tree, _ = random_model(rng, 2, 2, 8, 8)
    with pytest.raises(InputError):
        infer_map(model, parts, tree, FeaturePyramid([], 2.0, ()))


def test_non_concave_model_rejected():
    rng = np.random.default_rng(6)
    model, parts, tree, hog = random_model(rng, 2, 1, 6, 6)
    model.deformation[0][..., 2] = 0.0
    with pytest.raises((ConcavityError, InputError)):
        infer_map(model, parts, tree, hog, check=False)


def test_multiscale_detections_are_self_consistent(tmp_path):
    rng = np.random.default_rng(7)
    model, parts, tree, _ = random_model(rng, 3, 2, 4, 4)
    img = rng.uniform(0, 1, (72, 80))
    pyr = build_pyramid(img, 4, 2, model.max_filter_dims())
    dets = infer_map(model, parts, tree, pyr, max_detections=6, debug_dir=tmp_path)
    assert len(dets) == 6
    assert all(a.score >= b.score for a, b in zip(dets, dets[1:]))
    for d in dets:
        assert score_pose(model, parts, tree, pyr, d.pose) == pytest.approx(d.score, abs=1e-6)
        assert d.root_cell[2] == pyr.level_scales[d.pose.level]
        assert len({p.level for p in d.pose.parts}) == 1
    assert len(list(tmp_path.glob("level*.pgm"))) == len(pyr.levels) * len(parts)


# -- boxes and skeletons ----------------------------------------------------

def _human_pose(level=0, seed=0):
    parts = human_parts(1, 1)
    rng = np.random.default_rng(seed)
    hyps = tuple(PartHypothesis(p.id, int(rng.integers(0, 20)), int(rng.integers(0, 30)), level, 0)
                 for p in parts)
    return parts, PoseHypothesis(hyps)


def test_skeleton_at_identity_scale():
    parts, pose = _human_pose()
    segs = fit_skeleton(pose, parts, (1.0,), 4, border_cells=0)
    by = {p.part_id: p for p in pose.parts}
    names = {s[0]: s for s in segs}
    knee, ankle = by[1], by[0]  # right knee, right ankle
    assert names["r_lower_leg"][1] == (knee.x * 4 + 2.0, knee.y * 4 + 2.0)
    assert names["r_lower_leg"][2] == (ankle.x * 4 + 2.0, ankle.y * 4 + 2.0)


def test_skeleton_at_half_scale_doubles_pixels():
    parts, pose = _human_pose()
    full = fit_skeleton(pose, parts, (1.0,), 4, border_cells=0)
    half = fit_skeleton(pose, parts, (0.5,), 4, border_cells=0)
    for a, b in zip(full, half):
        assert b[1] == (2 * a[1][0], 2 * a[1][1]) and b[2] == (2 * a[2][0], 2 * a[2][1])


def test_skeleton_matches_scripted_mapping():
    parts, pose = _human_pose(level=1, seed=3)
    scales = (1.0, 2.0 ** -0.5)
    segs = fit_skeleton(pose, parts, scales, 4)
    by = {p.part_id: p for p in pose.parts}

    def px(c):  # trimmed HOG border: cell c sits over histogram cell c + 1
        return ((c + 1) * 4 + 2) / scales[1]

    expect = []
    for p in parts[14:]:
        ids = p.constituent_ids
        half = len(ids) // 2
        ends = []
        for group in (ids[:half], ids[half:]):
            ends.append((sum(px(by[i].x) for i in group) / len(group),
                         sum(px(by[i].y) for i in group) / len(group)))
        expect.append((p.name, ends[0], ends[1]))
    assert len(segs) == 10
    for (n1, a1, b1), (n2, a2, b2) in zip(segs, expect):
        assert n1 == n2
        np.testing.assert_allclose(a1 + b1, a2 + b2, rtol=0, atol=1e-12)
    joints = pose_joints(pose, parts, scales, 4)
    assert joints.shape == (14, 2) and joints[0, 0] == pytest.approx(px(by[0].x))


def test_pose_box_covers_part_boxes():
    rng = np.random.default_rng(8)
    model, parts, tree, hog = random_model(rng, 3, 2, 8, 8)
    det = infer_map(model, parts, tree, hog)[0]
    box = pose_box(model, det.pose, 1.0)
    for p in det.pose.parts:
        pb = part_box(model, p, 1.0)
        assert box[0] <= pb[0] and box[1] <= pb[1] and box[2] >= pb[2] and box[3] >= pb[3]


def test_bare_hog_map_is_accepted():
    rng = np.random.default_rng(9)
    model, parts, tree, hog = random_model(rng, 2, 2, 6, 6)
    a = infer_map(model, parts, tree, hog)[0]
    b = infer_map(model, parts, tree, FeaturePyramid([HogMap(hog.data, 4)], 2.0, (1.0,)))[0]
    assert a.score == b.score and a.pose == b.pose
