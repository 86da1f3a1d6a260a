import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from voxsynth.cli import (ManifestError, dispatch, load_manifest, read_depth,
                          worker_cap, write_depth, write_manifest)

FIXTURES = Path(__file__).parent / "fixtures" / "eval"

GEN_ARGS = ["--count", "2", "--seed", "7", "--views", "4", "--size", "16"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One full CLI run: scenes, triplets, all four training phases."""
    root = tmp_path_factory.mktemp("cli")
    sc = root / "sc"
    assert dispatch(["gen-scenes", *GEN_ARGS, "--out", str(sc)]) == 0
    assert dispatch(["make-triplets", "--scenes", str(sc),
                     "--out", str(root / "mined.json")]) == 0
    # this capture is too small for the mining rules; build a known-good
    # combination by hand (sources 0 and 2 overlap query 1 in scene_000)
    trip = {"params": {}, "scenes": [{
        "manifest": str(sc / "scene_000" / "manifest.json"),
        "scene_id": "scene_000",
        "triplets": [{"query": 1, "sources": [0, 2],
                      "source_overlaps": [0.0, 0.0], "union_overlap": 0.0}]}]}
    (root / "trip.json").write_text(json.dumps(trip, indent=2, sort_keys=True))
    common = ["--data", str(sc), "--steps", "2", "--seed", "0", "--rays", "16"]
    assert dispatch(["train", "--phase", "1", *common,
                     "--ckpt-out", str(root / "p1.ckpt")]) == 0
    assert dispatch(["train", "--phase", "2", *common,
                     "--ckpt-in", str(root / "p1.ckpt"),
                     "--ckpt-out", str(root / "p2.ckpt")]) == 0
    assert dispatch(["train", "--phase", "3", *common,
                     "--ckpt-in", str(root / "p2.ckpt"),
                     "--ckpt-out", str(root / "p3.ckpt")]) == 0
    assert dispatch(["train", "--phase", "4", "--data", str(root / "trip.json"),
                     "--steps", "2", "--seed", "0",
                     "--ckpt-in", str(root / "p3.ckpt"),
                     "--ckpt-out", str(root / "p4.ckpt")]) == 0
    return root


def test_no_args_prints_usage_and_exits_2(capsys):
    assert dispatch([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    assert dispatch(["train", "--bogus"]) == 2
    assert dispatch(["no-such-command"]) == 2


def test_missing_required_args_exit_2(capsys):
    assert dispatch(["train"]) == 2
    assert dispatch(["gen-scenes", "--count", "1"]) == 2


def test_gen_scenes_reruns_byte_identical(workdir, tmp_path):
    again = tmp_path / "sc_again"
    assert dispatch(["gen-scenes", *GEN_ARGS, "--out", str(again)]) == 0
    first = sorted((workdir / "sc").rglob("*"))
    second = sorted(again.rglob("*"))
    assert [p.name for p in first] == [p.name for p in second]
    for a, b in zip(first, second):
        if a.is_file():
            assert a.read_bytes() == b.read_bytes(), a.name


def test_manifest_roundtrip(workdir, tmp_path):
    src = workdir / "sc" / "scene_000" / "manifest.json"
    doc, frames = load_manifest(src)
    assert len(frames) == 4
    copy = workdir / "sc" / "scene_000" / "manifest_copy.json"
    write_manifest(copy, doc["scene_id"], doc["voxel_size"],
                   np.asarray(doc["origin"]), doc["frames"], doc["procedural"])
    doc2, frames2 = load_manifest(copy)
    assert doc == doc2
    for a, b in zip(frames, frames2):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.pose.matrix(), b.pose.matrix())


def test_depth_png_is_millimeters(tmp_path):
    path = tmp_path / "d.png"
    write_depth(path, np.full((2, 2), 2.5))
    with Image.open(path) as im:
        assert np.asarray(im)[0, 0] == 2500
    assert read_depth(path)[0, 0] == 2.5
    with pytest.raises(ValueError, match="16 bits"):
        write_depth(tmp_path / "big.png", np.full((2, 2), 70.0))


def _manifest_variant(workdir, mutate):
    sdir = workdir / "sc" / "scene_000"
    doc = json.loads((sdir / "manifest.json").read_text())
    mutate(doc)
    path = sdir / "manifest_bad.json"
    path.write_text(json.dumps(doc))
    return path


def test_corrupt_pose_rejected_naming_field(workdir):
    def mutate(doc):
        doc["frames"][0]["pose"][0] = [v * 1.1 for v in doc["frames"][0]["pose"][0]]
    path = _manifest_variant(workdir, mutate)
    with pytest.raises(ManifestError, match=r"frames\[0\].pose"):
        load_manifest(path)


def test_missing_image_rejected_naming_path(workdir):
    def mutate(doc):
        doc["frames"][1]["depth"] = "nope_001.png"
    path = _manifest_variant(workdir, mutate)
    with pytest.raises(ManifestError, match="nope_001.png"):
        load_manifest(path)


def test_missing_field_rejected_naming_field(workdir):
    def mutate(doc):
        del doc["voxel_size"]
    path = _manifest_variant(workdir, mutate)
    with pytest.raises(ManifestError, match="voxel_size"):
        load_manifest(path)
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(workdir / "absent.json")


def test_make_triplets_deterministic_with_default_bounds(workdir, tmp_path):
    mined = json.loads((workdir / "mined.json").read_text())
    assert mined["params"] == {"max_single": 0.50, "min_union": 0.65,
                               "max_union": 0.70, "pair_max": 0.01,
                               "depth_tol": 0.10}
    again = tmp_path / "mined2.json"
    assert dispatch(["make-triplets", "--scenes", str(workdir / "sc"),
                     "--out", str(again)]) == 0
    assert (workdir / "mined.json").read_bytes() == again.read_bytes()


def test_training_checkpoints_deterministic(workdir, tmp_path):
    again = tmp_path / "p1_again.ckpt"
    assert dispatch(["train", "--phase", "1", "--data", str(workdir / "sc"),
                     "--steps", "2", "--seed", "0", "--rays", "16",
                     "--ckpt-out", str(again)]) == 0
    assert (workdir / "p1.ckpt").read_bytes() == again.read_bytes()


def test_resume_with_wrong_ablation_fails(workdir, tmp_path, capsys):
    rc = dispatch(["train", "--phase", "1", "--data", str(workdir / "sc"),
                   "--steps", "1", "--ablation", "B",
                   "--ckpt-in", str(workdir / "p1.ckpt"),
                   "--ckpt-out", str(tmp_path / "x.ckpt")])
    assert rc == 1
    assert "does not match" in capsys.readouterr().err


def test_empty_triplet_file_fails_with_diagnostic(workdir, tmp_path, capsys):
    rc = dispatch(["train", "--phase", "4", "--data", str(workdir / "mined.json"),
                   "--steps", "1", "--ckpt-in", str(workdir / "p3.ckpt"),
                   "--ckpt-out", str(tmp_path / "x.ckpt")])
    assert rc == 1
    assert "no triplets" in capsys.readouterr().err


def test_render_query_view(workdir, tmp_path):
    out = tmp_path / "pred"
    assert dispatch(["render", "--ckpt", str(workdir / "p4.ckpt"),
                     "--triplet", str(workdir / "trip.json"),
                     "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "depth_coarse.png", "pred.png", "query_gt.png", "render.json"]
    meta = json.loads((out / "render.json").read_text())
    assert meta["config"] == "B+E+D+R" and meta["completed_voxels"] > 0
    with Image.open(out / "pred.png") as im:
        assert im.size == (16, 16)


def test_render_trajectory_frames(workdir, tmp_path):
    out = tmp_path / "traj"
    assert dispatch(["render", "--ckpt", str(workdir / "p4.ckpt"),
                     "--triplet", str(workdir / "trip.json"),
                     "--trajectory", "3", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "frame_000.png", "frame_001.png", "frame_002.png"]


def test_render_bad_index_fails(workdir, tmp_path, capsys):
    rc = dispatch(["render", "--ckpt", str(workdir / "p4.ckpt"),
                   "--triplet", str(workdir / "trip.json"),
                   "--index", "5", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_eval_reproduces_golden_report(tmp_path):
    report = tmp_path / "report.tsv"
    assert dispatch(["eval", "--pred", str(FIXTURES / "pred.png"),
                     "--gt", str(FIXTURES / "gt.png"),
                     "--mask", str(FIXTURES / "mask.png"),
                     "--pred-depth", str(FIXTURES / "pred_depth.png"),
                     "--gt-depth", str(FIXTURES / "gt_depth.png"),
                     "--report", str(report)]) == 0
    assert report.read_bytes() == (FIXTURES / "report.tsv").read_bytes()


def test_eval_without_mask(workdir, tmp_path):
    report = tmp_path / "r.tsv"
    assert dispatch(["eval", "--pred", str(FIXTURES / "pred.png"),
                     "--gt", str(FIXTURES / "gt.png"),
                     "--report", str(report)]) == 0
    header, row, mean = report.read_text().strip().split("\n")
    cells = row.split("\t")
    # no mask means full frame twice: both column groups agree
    assert cells[1:5] == cells[5:9]


def test_threads_flag_recorded(tmp_path):
    assert dispatch(["--threads", "4", "eval",
                     "--pred", str(FIXTURES / "pred.png"),
                     "--gt", str(FIXTURES / "gt.png"),
                     "--report", str(tmp_path / "r.tsv")]) == 0
    assert worker_cap() == 4
