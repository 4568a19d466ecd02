"""Annotation ingestion, image decoding and pipeline configuration."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .layout import KEYPOINT_NAMES, mirror_permutation

CONVENTIONS = ("person-centric", "image-centric")
FORMATS = ("generic-json", "lsp-mat-export", "parse-style")


class UnsupportedFormatError(InputError):
    pass


class CorruptFileError(InputError):
    pass


# -- annotations -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnnotatedPerson:
    image: str
    person_height: float
    keypoints: np.ndarray  # (J, 3): x, y, visible flag


@dataclass(eq=False)
class AnnotationSet:
    people: list
    convention: str = "person-centric"
    keypoint_names: tuple = KEYPOINT_NAMES
    dropped: int = 0

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise InputError(f"unknown coordinate convention {self.convention!r}")

    def __len__(self):
        return len(self.people)

    def keypoint_array(self):
        if not self.people:
            return np.zeros((0, len(self.keypoint_names), 3))
        return np.stack([p.keypoints for p in self.people])

    def heights(self):
        return np.array([p.person_height for p in self.people], dtype=np.float64)

    def converted(self, convention):
        """Same annotations under another left/right convention (columns swapped)."""
        if convention not in CONVENTIONS:
            raise InputError(f"unknown coordinate convention {convention!r}")
        if convention == self.convention:
            return self
        perm = mirror_permutation(self.keypoint_names)
        people = [dataclasses.replace(p, keypoints=p.keypoints[perm]) for p in self.people]
        return AnnotationSet(people, convention, self.keypoint_names, self.dropped)

    def to_json(self):
        return {
            "convention": self.convention,
            "keypoint_names": list(self.keypoint_names),
            "people": [
                {"image": p.image, "person_height": float(p.person_height),
                 "keypoints": [[float(x), float(y), int(v)] for x, y, v in p.keypoints]}
                for p in self.people
            ],
        }


def _height_from_keypoints(kp):
    vis = kp[:, 2] > 0
    if vis.sum() < 2:
        return 0.0
    ys = kp[vis, 1]
    return float(ys.max() - ys.min())


def _finish(raw, names, convention, required, target_convention):
    """raw: list of (image, height or None, (J, 3) array with NaN for missing)."""
    names = tuple(names)
    req = list(range(len(names))) if required is None else [names.index(r) if isinstance(r, str) else int(r) for r in required]
    people, dropped = [], 0
    for image, height, kp in raw:
        kp = np.asarray(kp, dtype=np.float64)
        if kp.shape != (len(names), 3):
            raise InputError(f"{image}: expected {len(names)} keypoints, got {kp.shape[0]}")
        missing = np.isnan(kp).any(axis=1)
        if np.any(missing[req]):
            dropped += 1
            continue
        kp = np.where(np.isnan(kp), 0.0, kp)
        kp[:, 2] = (kp[:, 2] > 0).astype(np.float64)
        h = _height_from_keypoints(kp) if height is None else float(height)
        people.append(AnnotatedPerson(str(image), h, kp))
    out = AnnotationSet(people, convention, names, dropped)
    return out if target_convention is None else out.converted(target_convention)


def _generic(data):
    names = data.get("keypoint_names", list(KEYPOINT_NAMES))
    raw = []
    for entry in data.get("people", data.get("images")):
        kps = []
        for k in entry["keypoints"]:
            if k is None:
                kps.append([np.nan] * 3)
            else:
                kps.append([float(k[0]), float(k[1]), float(k[2]) if len(k) > 2 else 1.0])
        raw.append((entry.get("image", entry.get("path", "")), entry.get("person_height"), kps))
    return raw, names, data.get("convention", "person-centric")


def _lsp(data, path):
    # LSP joints: 3 x 14 x N (x, y, flag) or the extended 14 x 3 x N layout.
    joints = np.asarray(data["joints"], dtype=np.float64)
    if joints.shape[0] == 3 and joints.shape[1] == len(KEYPOINT_NAMES):
        joints = joints.transpose(2, 1, 0)
    elif joints.shape[1] == 3:
        joints = joints.transpose(2, 0, 1)
    else:
        raise InputError(f"{path}: joints array has unexpected shape {joints.shape}")
    joints = joints.copy()
    if data.get("flag_is_occlusion", False):
        joints[..., 2] = 1.0 - joints[..., 2]
    pattern = data.get("image_pattern", "im{:04d}.jpg")
    raw = [(pattern.format(n + 1), None, joints[n]) for n in range(joints.shape[0])]
    return raw, list(KEYPOINT_NAMES), "person-centric"


def _parse(data, path):
    # PARSE: ptsAll as 14 x 2 x N, labelled in image coordinates, all visible.
    pts = np.asarray(data["ptsAll"], dtype=np.float64)
    if pts.ndim != 3 or pts.shape[:2] != (len(KEYPOINT_NAMES), 2):
        raise InputError(f"{path}: ptsAll has unexpected shape {pts.shape}")
    pts = pts.transpose(2, 0, 1)
    ones = np.ones(pts.shape[:2] + (1,))
    pattern = data.get("image_pattern", "im{:04d}.jpg")
    raw = [(pattern.format(n + 1), None, np.concatenate([pts[n], ones[n]], axis=1)) for n in range(pts.shape[0])]
    return raw, list(KEYPOINT_NAMES), "image-centric"


def _read_structured(path):
    path = Path(path)
    if path.suffix == ".mat":
        from scipy.io import loadmat

        try:
            return {k: v for k, v in loadmat(path).items() if not k.startswith("__")}
        except Exception as exc:  # scipy raises several types for bad files
            raise CorruptFileError(f"{path}: cannot read MAT file: {exc}") from exc
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: malformed JSON: {exc}") from exc


def load_annotations(path, format="generic-json", required=None, target_convention=None):
    """Load annotations and normalize them.

    Instances missing a ``required`` keypoint (all, by default) are dropped
    and counted. With ``target_convention`` the left/right columns are
    swapped when the source uses the other convention.
    """
    if format not in FORMATS:
        raise InputError(f"unknown annotation format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise InputError(f"annotation file {path} not found")
    data = _read_structured(path)
    try:
        if format == "generic-json":
            raw, names, conv = _generic(data)
        elif format == "lsp-mat-export":
            raw, names, conv = _lsp(data, path)
        else:
            raw, names, conv = _parse(data, path)
    except (KeyError, TypeError, IndexError) as exc:
        raise CorruptFileError(f"{path}: malformed {format} annotations: {exc}") from exc
    return _finish(raw, names, conv, required, target_convention)


def save_annotations(path, annotations):
    Path(path).write_text(json.dumps(annotations.to_json(), indent=1, sort_keys=True))


# -- images ----------------------------------------------------------------

_DECODERS = {}


def register_decoder(suffix, fn):
    """Plug in a decoder for other formats: ``fn(path) -> 2-D float array in [0, 1]``."""
    _DECODERS[suffix.lower()] = fn


def _pgm_tokens(buf, count):
    pos, tokens = 0, []
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptFileError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_pgm(buf):
    if buf[:2] != b"P5":
        if buf[:2] in (b"P6", b"P3"):
            raise UnsupportedFormatError(
                "colour PNM input is not decoded natively; convert to grayscale P5 "
                "or register an adapter with treepose.io.register_decoder")
        raise CorruptFileError("not a binary PGM (P5) file")
    try:
        (_, w, h, maxval), pos = _pgm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise CorruptFileError(f"corrupt PGM header: {exc}") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise CorruptFileError("corrupt PGM header values")
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    need = w * h * np.dtype(dtype).itemsize
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise CorruptFileError(f"truncated PGM payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def load_image(path):
    """Grayscale image with luminance in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image {path} not found")
    fn = _DECODERS.get(path.suffix.lower())
    if fn is not None:
        return np.asarray(fn(path), dtype=np.float64)
    buf = path.read_bytes()
    if buf[:1] == b"P":
        return decode_pgm(buf)
    raise UnsupportedFormatError(
        f"{path}: no decoder for {path.suffix or 'this'} files; PGM (P5) is native, "
        "other formats go through treepose.io.register_decoder")


def encode_pgm(img):
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes()


def save_image(path, img):
    Path(path).write_bytes(encode_pgm(img))


# -- configuration ---------------------------------------------------------

ENV_PREFIX = "TREEPOSE_"


def _check_range(lo, hi, integer=False):
    return {"lo": lo, "hi": hi, "int": integer}


@dataclass
class PipelineConfig:
    """Every tunable default of the pipeline, bounds-checked at load."""

    cell_size: int = 4
    interval: int = 8
    num_combined_types: int = 10
    num_single_types: int = 6
    single_filter_cells: int = 5
    geometry_clusters: int = 1
    canonical_height: float = 96.0
    svm_c: float = 0.002
    category_c: float = 0.01
    category_rounds: int = 10
    max_passes: int = 8
    negative_cache_cap: int = 20000
    detections_per_negative: int = 5
    convergence_tol: float = 1e-3
    qp_tol: float = 1e-8
    tree_tolerance: float = 0.05
    d_max: float = 20.0
    b_large: float = 100.0
    nms_iou: float = 0.5
    detect_threshold: float = -1e9
    max_detections: int = 5
    root_part: str = "torso"
    seed: int = 0

    _BOUNDS = {
        "cell_size": _check_range(2, 16, True),
        "interval": _check_range(1, 20, True),
        "num_combined_types": _check_range(1, 50, True),
        "num_single_types": _check_range(1, 50, True),
        "single_filter_cells": _check_range(1, 20, True),
        "geometry_clusters": _check_range(1, 10, True),
        "canonical_height": _check_range(24.0, 1000.0),
        "svm_c": _check_range(1e-9, 1e9),
        "category_c": _check_range(1e-9, 1e9),
        "category_rounds": _check_range(1, 1000, True),
        "max_passes": _check_range(1, 1000, True),
        "negative_cache_cap": _check_range(1, 10_000_000, True),
        "detections_per_negative": _check_range(1, 1000, True),
        "convergence_tol": _check_range(0.0, 1.0),
        "qp_tol": _check_range(1e-14, 1e-2),
        "tree_tolerance": _check_range(0.0, 10.0),
        "d_max": _check_range(1.0, 1000.0),
        "b_large": _check_range(100.0, 1e9),
        "nms_iou": _check_range(0.0, 1.0),
        "detect_threshold": _check_range(-1e12, 1e12),
        "max_detections": _check_range(1, 100000, True),
        "seed": _check_range(0, 2**32 - 1, True),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name, b in self._BOUNDS.items():
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise InputError(f"config {name} must be numeric, got {v!r}")
            if b["int"] and int(v) != v:
                raise InputError(f"config {name} must be an integer, got {v!r}")
            if not b["lo"] <= v <= b["hi"]:
                raise InputError(f"config {name}={v} outside [{b['lo']}, {b['hi']}]")
            setattr(self, name, int(v) if b["int"] else float(v))
        if not isinstance(self.root_part, str) or not self.root_part:
            raise InputError("config root_part must be a part name")

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path=None, env=None):
        """Defaults, then the JSON file at ``path``, then TREEPOSE_* environment overrides."""
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise InputError(f"config file {path} not found") from exc
            except json.JSONDecodeError as exc:
                raise InputError(f"config file {path}: malformed JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise InputError("config file must hold a JSON object")
        env = os.environ if env is None else env
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for name in cls.field_names():
            key = ENV_PREFIX + name.upper()
            if key in env:
                raw = env[key]
                if types[name] == "str":
                    data[name] = raw
                else:
                    try:
                        data[name] = json.loads(raw)
                    except json.JSONDecodeError as exc:
                        raise InputError(f"{key}={raw!r} is not a number") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return {n: getattr(self, n) for n in self.field_names()}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
