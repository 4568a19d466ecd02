"""Seeded articulated stick-figure images on cluttered noise backgrounds."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import AnnotatedPerson, AnnotationSet, save_annotations, save_image
from .layout import KEYPOINT_NAMES

IMAGE_SIZE = (160, 160)  # rows, cols
HEIGHT_RANGE = (96.0, 112.0)

# segment lengths as fractions of the standing height
_HEAD = 0.14
_TORSO = 0.32
_SHOULDER_HALF = 0.11
_HIP_HALF = 0.065
_UPPER_ARM = 0.18
_LOWER_ARM = 0.16
_UPPER_LEG = 0.27
_LOWER_LEG = 0.27
_LIMB_WIDTH = 0.055

J = {n: i for i, n in enumerate(KEYPOINT_NAMES)}


def _unit(deg):
    r = np.deg2rad(deg)
    # 0 degrees points down the image; positive turns toward +x
    return np.array([np.sin(r), np.cos(r)])


def sample_pose(rng, height, center):
    """Joint coordinates (14, 2) for a frontal figure; person-centric left/right.

    The figure faces the viewer, so its right side is on the image left.
    """
    lean = rng.uniform(-12, 12)
    neck = np.asarray(center, dtype=np.float64) + _unit(lean + 180) * (0.5 * _TORSO * height)
    pelvis = neck + _unit(lean) * _TORSO * height
    across = _unit(lean + 90)  # toward +x, figure's left
    pts = np.zeros((14, 2))
    pts[J["neck"]] = neck
    pts[J["head_top"]] = neck + _unit(lean + 180 + rng.uniform(-15, 15)) * _HEAD * height
    for side, sgn in (("r", -1), ("l", 1)):
        sho = neck + sgn * across * _SHOULDER_HALF * height
        hip = pelvis + sgn * across * _HIP_HALF * height
        ua = lean + sgn * rng.uniform(10, 160)
        la = ua + sgn * rng.uniform(-20, 110)
        elb = sho + _unit(ua) * _UPPER_ARM * height
        wri = elb + _unit(la) * _LOWER_ARM * height
        ul = lean + sgn * rng.uniform(-8, 35)
        ll = ul + sgn * rng.uniform(-35, 15)
        kne = hip + _unit(ul) * _UPPER_LEG * height
        ank = kne + _unit(ll) * _LOWER_LEG * height
        pts[J[f"{side}_shoulder"]] = sho
        pts[J[f"{side}_hip"]] = hip
        pts[J[f"{side}_elbow"]] = elb
        pts[J[f"{side}_wrist"]] = wri
        pts[J[f"{side}_knee"]] = kne
        pts[J[f"{side}_ankle"]] = ank
    return pts


def background(rng, shape=IMAGE_SIZE, clutter=12):
    """Smoothed noise with random bars and blobs."""
    bg = ndimage.gaussian_filter(rng.uniform(0, 1, shape), rng.uniform(1.0, 3.0))
    bg = 0.15 + 0.3 * (bg - bg.min()) / max(np.ptp(bg), 1e-9)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    for _ in range(clutter):
        v = rng.uniform(0.2, 0.6)
        if rng.random() < 0.5:
            a = np.array([rng.uniform(0, shape[1]), rng.uniform(0, shape[0])])
            b = a + _unit(rng.uniform(0, 360)) * rng.uniform(10, 50)
            mask = _capsule(yy, xx, a, b, rng.uniform(1, 3))
        else:
            c = rng.uniform(0, shape[1], 2)
            mask = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= rng.uniform(3, 10) ** 2
        bg = np.where(mask, v, bg)
    return bg


def _capsule(yy, xx, a, b, radius):
    # a, b are (x, y)
    ab = b - a
    t = ((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / max(ab @ ab, 1e-9)
    t = np.clip(t, 0, 1)
    px, py = a[0] + t * ab[0], a[1] + t * ab[1]
    return (xx - px) ** 2 + (yy - py) ** 2 <= radius * radius


def render_figure(img, pts, height, rng):
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    out = img.copy()
    w = _LIMB_WIDTH * height
    tone = rng.uniform(0.75, 0.95)
    mid_sho = 0.5 * (pts[J["r_shoulder"]] + pts[J["l_shoulder"]])
    mid_hip = 0.5 * (pts[J["r_hip"]] + pts[J["l_hip"]])
    out = np.where(_capsule(yy, xx, mid_sho, mid_hip, 2.2 * w), tone, out)
    limbs = [
        ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
        ("r_hip", "r_knee"), ("r_knee", "r_ankle"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
        ("r_shoulder", "l_shoulder"),
    ]
    for a, b in limbs:
        out = np.where(_capsule(yy, xx, pts[J[a]], pts[J[b]], w), tone, out)
    head = 0.5 * (pts[J["neck"]] + pts[J["head_top"]])
    r = 0.5 * np.linalg.norm(pts[J["head_top"]] - pts[J["neck"]])
    out = np.where((xx - head[0]) ** 2 + (yy - head[1]) ** 2 <= r * r, tone, out)
    out = out + rng.normal(0, 0.02, out.shape)
    return np.clip(out, 0, 1)


def make_person_image(rng, shape=IMAGE_SIZE, margin=4.0):
    height = rng.uniform(*HEIGHT_RANGE)
    pts = sample_pose(rng, height, (0.0, 0.0))
    lo = margin - pts.min(axis=0)
    hi = np.array([shape[1], shape[0]]) - 1 - margin - pts.max(axis=0)
    shift = np.where(hi >= lo, rng.uniform(np.minimum(lo, hi), np.maximum(lo, hi)), 0.5 * (lo + hi))
    pts = pts + shift
    pts[:, 0] = np.clip(pts[:, 0], 0, shape[1] - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, shape[0] - 1)
    img = render_figure(background(rng, shape), pts, height, rng)
    return img, pts, height


def make_negative_image(rng, shape=IMAGE_SIZE):
    return np.clip(background(rng, shape, clutter=18) + rng.normal(0, 0.02, shape), 0, 1)


def generate(out_dir, num_train=150, num_test=50, num_negative=40, seed=0):
    """Write images plus train/test annotations and a manifest into ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    splits = {}
    for split, count in (("train", num_train), ("test", num_test)):
        people = []
        for n in range(count):
            img, pts, height = make_person_image(rng)
            name = f"images/{split}_{n:04d}.pgm"
            save_image(out / name, img)
            kp = np.concatenate([np.round(pts, 2), np.ones((14, 1))], axis=1)
            people.append(AnnotatedPerson(name, round(float(height), 2), kp))
        ann = AnnotationSet(people, "person-centric")
        save_annotations(out / f"{split}.json", ann)
        splits[split] = f"{split}.json"
    negs = []
    for n in range(num_negative):
        name = f"images/neg_{n:04d}.pgm"
        save_image(out / name, make_negative_image(rng))
        negs.append(name)
    manifest = {"train": splits["train"], "test": splits["test"], "negatives": negs,
                "format": "generic-json", "seed": int(seed)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"
