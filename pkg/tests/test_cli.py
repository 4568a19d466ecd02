import json

import pytest

from treepose.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_OK, main
from treepose.evaluation import segments_from_joints
from treepose.io import load_annotations
from treepose.model import load_model

TINY = {"num_single_types": 1, "num_combined_types": 1, "category_rounds": 1, "max_passes": 1, "interval": 2}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["synth", "--out", str(root / "data"), "--train", "8", "--test", "3", "--negatives", "3"]) == EXIT_OK
    code = main(["train", "--manifest", str(root / "data" / "manifest.json"), "--config", str(root / "tiny.json"),
                 "--out", str(root / "m.tpsm")])
    assert code == EXIT_OK
    return root


def test_synth_writes_manifest_and_splits(workdir):
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(manifest["negatives"]) == 3
    assert len(load_annotations(workdir / "data" / "train.json")) == 8
    assert len(load_annotations(workdir / "data" / "test.json")) == 3


def test_train_writes_a_loadable_model_and_log(workdir):
    model, parts, tree = load_model(workdir / "m.tpsm")
    assert len(parts) == 24 and tree.num_nodes == 24
    records = [json.loads(line) for line in (workdir / "m.log.jsonl").read_text().splitlines()]
    assert records and "objective" in records[-1]


def test_strict_mode_turns_non_convergence_into_exit_3(workdir, capsys):
    code = main(["train", "--manifest", str(workdir / "data" / "manifest.json"), "--config",
                 str(workdir / "tiny.json"), "--out", str(workdir / "m2.tpsm"), "--strict"])
    assert code == EXIT_CONVERGENCE
    assert "did not converge" in capsys.readouterr().err


def test_input_errors_exit_2(workdir, capsys):
    assert main(["train", "--manifest", str(workdir / "nope.json"), "--out", str(workdir / "x.tpsm")]) == EXIT_INPUT
    assert "not found" in capsys.readouterr().err
    (workdir / "bad.json").write_text(json.dumps({"svm_cc": 1}))
    assert main(["synth", "--out", str(workdir / "s"), "--config", str(workdir / "bad.json")]) == EXIT_INPUT
    assert "unknown config keys" in capsys.readouterr().err
    (workdir / "junk.tpsm").write_bytes(b"not a model")
    code = main(["infer", "--model", str(workdir / "junk.tpsm"), "--images", "a.pgm", "--out", str(workdir / "d")])
    assert code == EXIT_INPUT
    assert main(["synth", "--out", str(workdir / "s"), "--jobs", "0"]) == EXIT_INPUT


def test_threshold_above_every_score_gives_empty_output(workdir):
    out = workdir / "empty.jsonl"
    code = main(["infer", "--model", str(workdir / "m.tpsm"), "--manifest", str(workdir / "data" / "manifest.json"),
                 "--out", str(out), "--threshold", "1e9", "--config", str(workdir / "tiny.json")])
    assert code == EXIT_OK
    assert out.read_text() == ""


def test_infer_records_and_debug_maps(workdir):
    out = workdir / "det.jsonl"
    debug = workdir / "debug"
    image = str(workdir / "data" / "images" / "test_0000.pgm")
    code = main(["infer", "--model", str(workdir / "m.tpsm"), "--images", image, "--out", str(out),
                 "--max-detections", "2", "--debug-dir", str(debug), "--config", str(workdir / "tiny.json")])
    assert code == EXIT_OK
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["rank"] for r in recs] == [0, 1][:len(recs)] and recs
    assert recs[0]["score"] >= recs[-1]["score"]
    assert len(recs[0]["joints"]) == 14 and len(recs[0]["skeleton"]) == 10
    assert len(list((debug / "test_0000").glob("*.pgm"))) >= 24


def test_eval_of_ground_truth_scores_one(workdir, capsys):
    ann = load_annotations(workdir / "data" / "test.json")
    det = workdir / "truth.jsonl"
    with open(det, "w") as fh:
        for p in ann.people:
            segs = segments_from_joints(p.keypoints[:, :2])
            fh.write(json.dumps({"image": p.image, "score": 1.0, "skeleton": [
                {"part": s.name, "p1": list(s.p1), "p2": list(s.p2)} for s in segs]}) + "\n")
    report = workdir / "report.json"
    code = main(["eval", "--manifest", str(workdir / "data" / "manifest.json"), "--detections", str(det),
                 "--out", str(report)])
    assert code == EXIT_OK
    assert json.loads(report.read_text())["total"] == 1.0
    assert "100.0" in capsys.readouterr().out


def test_learn_tree_writes_dot_and_edges(workdir, capsys):
    out = workdir / "tree"
    assert main(["learn-tree", "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    tree = json.loads((out / "tree.json").read_text())
    assert printed.startswith(f"hidden_count {tree['hidden_count']}")
    assert len(tree["edges"]) == 23 and tree["root"] == "torso"
    if tree["hidden_count"] or not tree["fallback"]:
        assert (out / "latent_tree.dot").read_text().startswith("graph")


def test_learn_categories_writes_types(workdir):
    out = workdir / "cats.json"
    code = main(["learn-categories", "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(out),
                 "--config", str(workdir / "tiny.json")])
    assert code == EXIT_OK
    data = json.loads(out.read_text())
    assert data["num_types"] == [1] * 24
    assert len(data["instances"]) == 16  # each training person and its mirror image
