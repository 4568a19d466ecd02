"""The 14-joint / 10-limb human part layout used by the pipeline."""
from __future__ import annotations

from .model import PartKind, PartSpec

# LSP joint order
KEYPOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head_top",
)

# (name, constituent joints, PCP table column); constituents are ordered so
# that a limb segment runs from the first half's mean to the second half's.
COMBINED_PARTS = (
    ("head", ("neck", "head_top"), "Head"),
    ("torso", ("r_shoulder", "l_shoulder", "r_hip", "l_hip"), "Torso"),
    ("l_upper_leg", ("l_hip", "l_knee"), "U.Leg"),
    ("l_lower_leg", ("l_knee", "l_ankle"), "L.Leg"),
    ("r_upper_leg", ("r_hip", "r_knee"), "U.Leg"),
    ("r_lower_leg", ("r_knee", "r_ankle"), "L.Leg"),
    ("l_upper_arm", ("l_shoulder", "l_elbow"), "U.Arm"),
    ("l_lower_arm", ("l_elbow", "l_wrist"), "L.Arm"),
    ("r_upper_arm", ("r_shoulder", "r_elbow"), "U.Arm"),
    ("r_lower_arm", ("r_elbow", "r_wrist"), "L.Arm"),
)

PCP_COLUMNS = ("Torso", "Head", "U.Leg", "L.Leg", "U.Arm", "L.Arm")


def _swap_name(name):
    if name.startswith("l_"):
        return "r_" + name[2:]
    if name.startswith("r_"):
        return "l_" + name[2:]
    return name


def mirror_permutation(names):
    """Index map that swaps left/right entries of ``names``."""
    pos = {n: i for i, n in enumerate(names)}
    return [pos[_swap_name(n)] for n in names]


KEYPOINT_MIRROR = tuple(mirror_permutation(KEYPOINT_NAMES))


def human_parts(num_single_types=6, num_combined_types=10):
    """14 single parts followed by 10 combined parts."""
    idx = {n: i for i, n in enumerate(KEYPOINT_NAMES)}
    parts = [PartSpec(i, n, PartKind.SINGLE, (), num_single_types) for i, n in enumerate(KEYPOINT_NAMES)]
    if isinstance(num_combined_types, int):
        num_combined_types = {name: num_combined_types for name, _, _ in COMBINED_PARTS}
    for j, (name, joints, _) in enumerate(COMBINED_PARTS):
        parts.append(PartSpec(
            len(KEYPOINT_NAMES) + j, name, PartKind.COMBINED,
            tuple(idx[n] for n in joints), int(num_combined_types[name]),
        ))
    return parts


def pcp_group(part_name):
    for name, _, column in COMBINED_PARTS:
        if name == part_name:
            return column
    return part_name


def limb_segment(points):
    """Segment endpoints for a combined part from its constituent joints.

    The first half of the joints gives one endpoint (their mean), the
    second half the other; two joints give the joint-to-joint segment.
    """
    pts = [tuple(float(v) for v in p) for p in points]
    half = len(pts) // 2
    a, b = pts[:half], pts[half:]
    p0 = (sum(p[0] for p in a) / len(a), sum(p[1] for p in a) / len(a))
    p1 = (sum(p[0] for p in b) / len(b), sum(p[1] for p in b) / len(b))
    return p0, p1
