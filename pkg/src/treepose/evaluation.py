"""PCP scoring and per-part accuracy tables."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .layout import COMBINED_PARTS, KEYPOINT_NAMES, PCP_COLUMNS, limb_segment, pcp_group

MATCHING = ("best-score", "best-pcp")


@dataclass(frozen=True)
class LimbSegment:
    name: str
    p1: tuple
    p2: tuple

    @property
    def length(self):
        return float(np.hypot(self.p2[0] - self.p1[0], self.p2[1] - self.p1[1]))


def pcp_match(predicted, truth, fraction=0.5):
    """Both endpoints within ``fraction`` of the truth length (inclusive), in annotation order."""
    length = truth.length
    if not length > 0:
        raise InputError(f"ground-truth segment {truth.name!r} has zero length")
    limit = fraction * length
    d1 = np.hypot(predicted.p1[0] - truth.p1[0], predicted.p1[1] - truth.p1[1])
    d2 = np.hypot(predicted.p2[0] - truth.p2[0], predicted.p2[1] - truth.p2[1])
    return bool(d1 <= limit and d2 <= limit)


def segments_from_joints(joints, names=KEYPOINT_NAMES):
    """Limb segments of the combined parts from (J, 2) joint coordinates."""
    idx = {n: i for i, n in enumerate(names)}
    joints = np.asarray(joints, dtype=np.float64)
    out = []
    for name, constituents, _ in COMBINED_PARTS:
        p1, p2 = limb_segment([joints[idx[c], :2] for c in constituents])
        out.append(LimbSegment(name, p1, p2))
    return out


@dataclass(eq=False)
class PcpReport:
    accuracy: dict  # column -> fraction
    counts: dict  # column -> evaluated limb instances
    hits: dict
    total: float  # micro average over limb instances
    macro_total: float  # mean of column accuracies
    per_image: list = field(default_factory=list)
    matching: str = "best-score"

    def columns(self):
        return [c for c in PCP_COLUMNS if c in self.counts] + [c for c in self.counts if c not in PCP_COLUMNS]

    def to_dict(self):
        cols = self.columns()
        return {
            "matching": self.matching,
            "columns": cols,
            "accuracy": {c: self.accuracy[c] for c in cols},
            "counts": {c: self.counts[c] for c in cols},
            "total": self.total,
            "macro_total": self.macro_total,
            "per_image": self.per_image,
        }

    def table(self):
        cols = self.columns()
        head = " ".join(f"{c:>7}" for c in cols + ["Total"])
        row = " ".join(f"{100 * self.accuracy[c]:7.1f}" for c in cols) + f" {100 * self.total:7.1f}"
        return f"{head}\n{row}\n(macro total {100 * self.macro_total:.1f}; matching {self.matching})\n"


def _match_all(pred, truth):
    by_name = {s.name: s for s in pred}
    return [bool(s.name in by_name and pcp_match(by_name[s.name], s)) for s in truth]


def evaluate(predictions, truths, matching="best-score"):
    """PCP over images.

    ``predictions`` maps image id to a list of (score, segments) candidates;
    ``truths`` maps image id to a list of people, each a list of
    LimbSegment. An image without candidates scores every limb as a miss.
    """
    if matching not in MATCHING:
        raise InputError(f"unknown matching {matching!r}; expected one of {MATCHING}")
    hits, counts = {}, {}
    per_image = []
    for image in sorted(truths):
        cands = sorted(predictions.get(image, []), key=lambda c: -c[0])
        for person, truth in enumerate(truths[image]):
            if not cands:
                matched = [False] * len(truth)
            elif matching == "best-score":
                matched = _match_all(cands[0][1], truth)
            else:
                options = [_match_all(c[1], truth) for c in cands]
                matched = max(options, key=sum)  # first best on ties
            for seg, ok in zip(truth, matched):
                col = pcp_group(seg.name)
                counts[col] = counts.get(col, 0) + 1
                hits[col] = hits.get(col, 0) + int(ok)
            per_image.append({"image": image, "person": person,
                              "matches": {s.name: ok for s, ok in zip(truth, matched)}})
    acc = {c: hits[c] / counts[c] for c in counts}
    n = sum(counts.values())
    total = sum(hits.values()) / n if n else 0.0
    macro = float(np.mean(list(acc.values()))) if acc else 0.0
    return PcpReport(acc, counts, hits, total, macro, per_image, matching)
