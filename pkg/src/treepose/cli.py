"""Command-line entry point: synth, learn-tree, learn-categories, train, infer, eval."""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .errors import ConvergenceWarning, ModelFormatError, TreePoseError
from .evaluation import LimbSegment, evaluate, segments_from_joints
from .io import PipelineConfig, load_annotations, load_image
from .layout import human_parts
from .model import load_model, save_model

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE = 0, 2, 3


class Manifest:
    """Dataset manifest written by ``synth``: annotation files and negatives, relative paths."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.data = json.loads(self.path.read_text())
        except FileNotFoundError as exc:
            raise TreePoseError(f"manifest {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise TreePoseError(f"manifest {path}: malformed JSON: {exc}") from exc
        self.root = self.path.parent
        self.format = self.data.get("format", "generic-json")

    def annotations(self, split):
        if split not in self.data:
            raise TreePoseError(f"manifest has no {split!r} split")
        return load_annotations(self.root / self.data[split], self.format)

    def negatives(self):
        return list(self.data.get("negatives", []))

    def loader(self):
        return lambda name: load_image(self.root / name)


def _dump_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=False) + "\n")


def _config(args):
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    return cfg


def _annotations(args, split="train"):
    if getattr(args, "annotations", None):
        return load_annotations(args.annotations, args.format), Path(args.images_root or Path(args.annotations).parent)
    if getattr(args, "manifest", None):
        m = Manifest(args.manifest)
        return m.annotations(split), m.root
    raise TreePoseError("give --annotations or --manifest")


# -- subcommands -----------------------------------------------------------

def cmd_synth(args, cfg):
    from .synth import generate

    seed = cfg.seed if args.seed is not None or args.config else args.synth_seed
    path = generate(args.out, args.train, args.test, args.negatives, seed)
    print(f"wrote {path}")


def cmd_learn_tree(args, cfg):
    from .pipeline import learn_tree
    from .treelearn import tree_to_dot

    ann, _ = _annotations(args, args.split)
    parts = human_parts(cfg.num_single_types, cfg.num_combined_types)
    res = learn_tree(ann, parts, cfg.tree_tolerance, cfg.d_max, cfg.root_part)
    names = [p.name for p in parts]
    hidden = 0 if res.latent is None else res.latent.hidden_count
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if res.latent is not None:
        (out / "latent_tree.dot").write_text(tree_to_dot(res.latent, names))
    edges = [[names[a], names[b]] for a, b in res.tree.edges]
    (out / "tree.json").write_text(json.dumps({
        "root": names[res.tree.root], "edges": edges, "hidden_count": int(hidden),
        "fallback": res.used_fallback, "reason": res.reason}, indent=1) + "\n")
    print(f"hidden_count {hidden}")
    if res.used_fallback:
        print(f"using the Chow-Liu skeleton ({res.reason})")
    for a, b in edges:
        print(f"{a} -- {b}")


def cmd_learn_categories(args, cfg):
    from .features import hog_extract
    from .pipeline import assign_types, collect_instances, learn_tree

    ann, root = _annotations(args, args.split)
    load = lambda name: load_image(root / name)  # noqa: E731
    parts = human_parts(cfg.num_single_types, cfg.num_combined_types)
    tr = learn_tree(ann, parts, cfg.tree_tolerance, cfg.d_max, cfg.root_part)
    inst = collect_instances(ann, load, parts, cfg)
    negs = Manifest(args.manifest).negatives() if args.manifest else []
    neg_hogs = [hog_extract(load(n), cfg.cell_size) for n in negs]
    types = assign_types(inst, parts, tr.tree, cfg, neg_hogs)
    out = {
        "parts": [p.name for p in parts],
        "num_types": [int(k) for k in types.num_types],
        "filter_dims": [[list(d) for d in per] for per in types.filter_dims],
        "instances": [{"image": i.image, "mirrored": i.mirrored, "types": [int(t) for t in lab]}
                      for i, lab in zip(inst, types.labels)],
        "categories": types.category_logs,
    }
    Path(args.out).write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {args.out}")


def cmd_train(args, cfg):
    from .pipeline import train_pipeline

    m = Manifest(args.manifest)
    records = []
    res = train_pipeline(m.annotations("train"), m.loader(), m.negatives(), cfg, log=records.append)
    save_model(args.out, res.model, res.parts, res.tree)
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    _dump_jsonl(log_path, records)
    print(f"wrote {args.out} ({len(res.log)} mining rounds, converged={res.converged})")


def detection_record(image, rank, det, joints, skeleton, parts, model):
    d = det
    return {
        "image": image,
        "rank": rank,
        "score": d.score,
        "root": {"x": int(d.root_cell[0]), "y": int(d.root_cell[1]), "scale": float(d.root_cell[2])},
        "parts": [{"part": parts[p.part_id].name, "x": p.x, "y": p.y, "scale": float(d.root_cell[2]),
                   "type": p.type_id} for p in d.pose.parts],
        "box": [float(v) for v in d.box],
        "joints": [[float(x), float(y)] for x, y in joints],
        "skeleton": [{"part": s[0], "p1": [float(v) for v in s[1]], "p2": [float(v) for v in s[2]]}
                     for s in skeleton],
    }


def cmd_infer(args, cfg):
    from .pipeline import detect

    model, parts, tree = load_model(args.model)
    if args.manifest:
        m = Manifest(args.manifest)
        images = [p.image for p in m.annotations(args.split).people]
        images = list(dict.fromkeys(images))
        root = m.root
    else:
        images = list(args.images)
        root = Path(".")
    threshold = cfg.detect_threshold if args.threshold is None else args.threshold
    top = cfg.max_detections if args.max_detections is None else args.max_detections

    def run(name):
        img = load_image(root / name)
        debug = None if args.debug_dir is None else Path(args.debug_dir) / Path(name).stem
        return [detection_record(name, r, d, j, s, parts, model)
                for r, (d, j, s) in enumerate(detect(model, parts, tree, img, cfg, threshold, top, debug))]

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            results = list(pool.map(run, images))
    else:
        results = [run(n) for n in images]
    _dump_jsonl(args.out, [r for per in results for r in per])
    print(f"wrote {sum(len(r) for r in results)} detections for {len(images)} images to {args.out}")


def load_detections(path):
    preds = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            segs = [LimbSegment(s["part"], tuple(s["p1"]), tuple(s["p2"])) for s in r["skeleton"]]
            preds.setdefault(r["image"], []).append((float(r["score"]), segs))
    return preds


def cmd_eval(args, cfg):
    ann, _ = _annotations(args, args.split)
    truths = {}
    for person in ann.people:
        truths.setdefault(person.image, []).append(segments_from_joints(person.keypoints[:, :2], ann.keypoint_names))
    preds = load_detections(args.detections)
    report = evaluate(preds, truths, args.matching)
    print(report.table(), end="")
    if args.out:
        data = report.to_dict()
        if not args.per_image:
            data.pop("per_image")
        Path(args.out).write_text(json.dumps(data, indent=1) + "\n")


# -- argument parsing ------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (TREEPOSE_* env vars override it)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--strict", action="store_true", help="exit 3 on non-convergence warnings")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for per-image work")

    p = argparse.ArgumentParser(prog="treepose", description="Tree-structured human pose estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic stick-figure dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=150)
    s.add_argument("--test", type=int, default=50)
    s.add_argument("--negatives", type=int, default=40)
    s.set_defaults(func=cmd_synth, synth_seed=0)

    def data_args(q):
        q.add_argument("--manifest")
        q.add_argument("--annotations")
        q.add_argument("--format", default="generic-json")
        q.add_argument("--images-root")
        q.add_argument("--split", default="train")

    s = sub.add_parser("learn-tree", parents=[common], help="learn the part tree (DOT + edge list)")
    data_args(s)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_learn_tree)

    s = sub.add_parser("learn-categories", parents=[common], help="learn part types and visual categories")
    data_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn_categories)

    s = sub.add_parser("train", parents=[common], help="train a full model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="detect poses")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest")
    s.add_argument("--split", default="test")
    s.add_argument("--images", nargs="*", default=[])
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--max-detections", type=int)
    s.add_argument("--debug-dir", help="write per-part score maps as PGM heat images")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="PCP evaluation")
    data_args(s)
    s.set_defaults(split="test")
    s.add_argument("--detections", required=True)
    s.add_argument("--matching", default="best-score", choices=["best-score", "best-pcp"])
    s.add_argument("--out")
    s.add_argument("--per-image", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        try:
            cfg = _config(args)
            args.func(args, cfg)
        except (TreePoseError, ModelFormatError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
    conv = [w for w in caught if issubclass(w.category, ConvergenceWarning)]
    for w in conv:
        print(f"warning: {w.message}", file=sys.stderr)
    if conv and args.strict:
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
