"""Command-line front end for scene generation, training, and evaluation.

Every subcommand is a pure function of its invocation: rerunning with the
same arguments (and --seed, where a command samples) produces byte-identical
outputs.  Data goes to files named on the command line; progress and
diagnostics go to stderr.

On-disk formats:
  scene manifest  JSON, one per scene directory; camera poses are 4x4
                  row-major world-from-camera matrices, depth images are
                  16-bit grayscale PNGs in millimeters (2500 -> 2.5 m).
  triplet list    JSON of mined (source, source, query) index triples
                  per scene manifest, plus the mining thresholds used.
  checkpoint      binary tensor archive with embedded model config.
  eval report     tab-separated table, one row per image, mean row last.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, Pose, RgbdFrame
from .metrics import EvalReport, masked_eval
from .pipeline import (Checkpoint, Model, ModelConfig, PhaseConfig, Triplet,
                       build_scene_sample, infer, interpolate_poses,
                       make_geometry_pair, make_inpaint_sample,
                       render_trajectory, train_phase1, train_phase2,
                       train_phase3, train_phase4)
from .scenes import (ProceduralScene, generate_scene, raycast_gt,
                     sample_camera_poses, select_triplets)

DEPTH_UNIT_MM = 1000.0   # depth PNGs store millimeters
_MAX_DEPTH_M = 65.535    # uint16 ceiling

# Cap for worker pools of internally parallel sections.  Every code path
# is currently sequential, so the cap only needs to be recorded.
_worker_cap = [1]


def worker_cap() -> int:
    return _worker_cap[0]


# -- image files -------------------------------------------------------------------


def write_rgb(path, rgb: np.ndarray):
    data = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_depth(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype=np.float64)
    if depth.max() > _MAX_DEPTH_M:
        raise ValueError(f"depth exceeds {_MAX_DEPTH_M} m, not storable in 16 bits")
    mm = np.rint(depth * DEPTH_UNIT_MM).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PNG")


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel")
    return arr.astype(np.float64) / DEPTH_UNIT_MM


def _read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


# -- scene manifests ---------------------------------------------------------------


class ManifestError(ValueError):
    pass


def _require(d: dict, field: str, where: str):
    if field not in d:
        raise ManifestError(f"{where} is missing field {field!r}")
    return d[field]


def write_manifest(path, scene_id: str, voxel_size: float, origin: np.ndarray,
                   frame_records: list, procedural: dict | None):
    doc = {
        "scene_id": scene_id,
        "voxel_size": voxel_size,
        "origin": [float(v) for v in origin],
        "depth_unit": "millimeters",
        "frames": frame_records,
    }
    if procedural is not None:
        doc["procedural"] = procedural
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    """Read and validate one scene manifest.

    Returns (manifest dict, frames); frames are fully decoded RgbdFrames.
    Any schema violation names the offending field, any unreadable image
    names its path.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e
    root = path.parent
    _require(doc, "scene_id", "manifest")
    _require(doc, "voxel_size", "manifest")
    origin = np.asarray(_require(doc, "origin", "manifest"), dtype=np.float64)
    if origin.shape != (3,):
        raise ManifestError("manifest field 'origin' must have 3 entries")
    if not (isinstance(doc["voxel_size"], (int, float)) and doc["voxel_size"] > 0):
        raise ManifestError("manifest field 'voxel_size' must be positive")
    frames = []
    for i, rec in enumerate(_require(doc, "frames", "manifest")):
        where = f"frames[{i}]"
        rgb_path = root / _require(rec, "rgb", where)
        depth_path = root / _require(rec, "depth", where)
        for p in (rgb_path, depth_path):
            if not p.is_file():
                raise ManifestError(f"{where}: referenced file not found: {p}")
        intr = _require(rec, "intrinsics", where)
        try:
            intrinsics = CameraIntrinsics(
                fx=float(_require(intr, "fx", f"{where}.intrinsics")),
                fy=float(_require(intr, "fy", f"{where}.intrinsics")),
                cx=float(_require(intr, "cx", f"{where}.intrinsics")),
                cy=float(_require(intr, "cy", f"{where}.intrinsics")),
                width=int(_require(intr, "width", f"{where}.intrinsics")),
                height=int(_require(intr, "height", f"{where}.intrinsics")))
        except ValueError as e:
            raise ManifestError(f"{where}.intrinsics: {e}") from e
        mat = np.asarray(_require(rec, "pose", where), dtype=np.float64)
        if mat.shape != (4, 4):
            raise ManifestError(f"{where}.pose must be a 4x4 matrix")
        try:
            pose = Pose.from_matrix(mat)
        except ValueError as e:
            raise ManifestError(f"{where}.pose: {e}") from e
        try:
            frame = RgbdFrame(read_rgb(rgb_path), read_depth(depth_path),
                              intrinsics, pose)
        except ValueError as e:
            raise ManifestError(f"{where}: {e}") from e
        frames.append(frame)
    return doc, frames


def _frame_record(i: int, frame: RgbdFrame) -> dict:
    intr = frame.intrinsics
    return {
        "rgb": f"rgb_{i:03d}.png",
        "depth": f"depth_{i:03d}.png",
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                       "cy": intr.cy, "width": intr.width,
                       "height": intr.height},
        "pose": [[float(v) for v in row] for row in frame.pose.matrix()],
    }


def _scene_dirs(root) -> list:
    dirs = sorted(p.parent for p in Path(root).glob("*/manifest.json"))
    if not dirs:
        raise ManifestError(f"no scene manifests under {root}")
    return dirs


def _scene_from_manifest(doc: dict) -> ProceduralScene:
    if "procedural" not in doc:
        raise ManifestError(
            f"scene {doc.get('scene_id')!r} has no procedural block; "
            "ground truth is unavailable")
    return ProceduralScene.from_dict(doc["procedural"])


# -- subcommands -------------------------------------------------------------------


def _log(msg: str):
    print(msg, file=sys.stderr)


def _cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(args.seed)
    intr = CameraIntrinsics(fx=float(args.size), fy=float(args.size),
                            cx=args.size / 2, cy=args.size / 2,
                            width=args.size, height=args.size)
    for i in range(args.count):
        scene_seed = int(master.integers(2 ** 62))
        pose_seed = int(master.integers(2 ** 62))
        scene = generate_scene(scene_seed)
        poses = sample_camera_poses(scene, args.views,
                                    np.random.default_rng(pose_seed))
        sdir = out / f"scene_{i:03d}"
        sdir.mkdir(exist_ok=True)
        records = []
        for k, pose in enumerate(poses):
            frame = raycast_gt(scene, intr, pose)
            rec = _frame_record(k, frame)
            write_rgb(sdir / rec["rgb"], frame.rgb)
            write_depth(sdir / rec["depth"], frame.depth)
            records.append(rec)
        origin = np.floor(scene.room.lo / args.voxel_size) * args.voxel_size
        write_manifest(sdir / "manifest.json", f"scene_{i:03d}",
                       args.voxel_size, origin, records, scene.to_dict())
        _log(f"wrote {sdir} ({len(records)} frames)")
    return 0


def _cmd_make_triplets(args) -> int:
    entries = []
    total = 0
    for sdir in _scene_dirs(args.scenes):
        doc, frames = load_manifest(sdir / "manifest.json")
        mined = select_triplets(frames, max_single=args.max_single,
                                min_union=args.min_union,
                                max_union=args.max_union,
                                source_pair_max=args.pair_max,
                                depth_tol=args.depth_tol)
        entries.append({
            "manifest": str(sdir / "manifest.json"),
            "scene_id": doc["scene_id"],
            "triplets": [{"query": t.query,
                          "sources": list(t.sources),
                          "source_overlaps": list(t.source_overlaps),
                          "union_overlap": t.union_overlap} for t in mined],
        })
        total += len(mined)
        _log(f"{doc['scene_id']}: {len(mined)} triplets")
    doc = {
        "params": {"max_single": args.max_single, "min_union": args.min_union,
                   "max_union": args.max_union, "pair_max": args.pair_max,
                   "depth_tol": args.depth_tol},
        "scenes": entries,
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _log(f"wrote {args.out} ({total} triplets)")
    return 0


def _load_triplet_entries(path) -> list:
    doc = json.loads(Path(path).read_text())
    out = []
    for entry in _require(doc, "scenes", "triplet file"):
        _, frames = load_manifest(entry["manifest"])
        for t in entry["triplets"]:
            i, j = t["sources"]
            out.append(Triplet(frames[i], frames[j], frames[t["query"]]))
    if not out:
        raise ManifestError(f"{path} contains no triplets")
    return out


def _model_for_training(args) -> Model:
    if args.ckpt_in:
        model = Model.from_checkpoint(args.ckpt_in)
        if args.ablation and model.config.tag() != ModelConfig.from_tag(args.ablation).tag():
            raise ManifestError(
                f"checkpoint is a {model.config.tag()} model; "
                f"--ablation {args.ablation} does not match")
        return model
    return Model(ModelConfig.from_tag(args.ablation or "R"), seed=args.seed)


def _cmd_train(args) -> int:
    model = _model_for_training(args)
    cfg = PhaseConfig(args.phase, steps=args.steps,
                      rays_per_step=args.rays, lr=args.lr,
                      unfreeze_renderer=args.unfreeze_renderer)
    vs = model.config.voxel_size
    if args.phase == 4:
        data = _load_triplet_entries(args.data)
        ckpt = train_phase4(model, data, cfg, seed=args.seed, log=sys.stderr)
    else:
        data = []
        for sdir in _scene_dirs(args.data):
            doc, frames = load_manifest(sdir / "manifest.json")
            if doc["voxel_size"] != vs:
                raise ManifestError(
                    f"{doc['scene_id']}: manifest voxel_size {doc['voxel_size']} "
                    f"does not match the model's {vs}")
            if args.phase == 1:
                data.append(build_scene_sample(frames, vs))
            elif args.phase == 2:
                scene = _scene_from_manifest(doc)
                data.append(make_geometry_pair(scene, frames[::2], vs))
            else:
                data.append(make_inpaint_sample(model, frames[::2], frames))
        trainer = {1: train_phase1, 2: train_phase2, 3: train_phase3}[args.phase]
        ckpt = trainer(model, data, cfg, seed=args.seed, log=sys.stderr)
    ckpt.save(args.ckpt_out)
    _log(f"saved phase-{args.phase} checkpoint to {args.ckpt_out} "
         f"({ckpt.step} steps)")
    return 0


def _cmd_render(args) -> int:
    model = Model.from_checkpoint(args.ckpt)
    triplets = _load_triplet_entries(args.triplet)
    if not 0 <= args.index < len(triplets):
        raise ManifestError(f"--index {args.index} out of range "
                            f"(file has {len(triplets)} triplets)")
    t = triplets[args.index]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.trajectory:
        poses = interpolate_poses(t.s1.pose, t.s2.pose, args.trajectory)
        for k, img in enumerate(render_trajectory(model, t.sources, poses)):
            write_rgb(out / f"frame_{k:03d}.png", img)
        _log(f"wrote {args.trajectory} trajectory frames to {out}")
    else:
        full, coarse, completed = infer(model, t.sources, t.q.pose)
        write_rgb(out / "pred.png", full)
        write_depth(out / "depth_coarse.png", np.maximum(coarse.depth, 0.0))
        write_rgb(out / "query_gt.png", t.q.rgb)
        (out / "render.json").write_text(json.dumps(
            {"completed_voxels": len(completed),
             "config": model.config.tag()}, indent=2, sort_keys=True) + "\n")
        _log(f"wrote prediction to {out}")
    return 0


def _cmd_eval(args) -> int:
    pred = read_rgb(args.pred)
    gt = read_rgb(args.gt)
    mask = _read_mask(args.mask) if args.mask else np.ones(pred.shape[:2], bool)
    kw = {}
    if args.pred_depth:
        kw["pred_depth"] = read_depth(args.pred_depth)
        kw["gt_depth"] = read_depth(args.gt_depth)
    row = masked_eval(pred, gt, mask, **kw)
    report = EvalReport(names=[Path(args.pred).stem], rows=[row])
    text = report.to_tsv()
    Path(args.report).write_text(text)
    _log(f"wrote {args.report}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxsynth",
        description="Sparse-voxel novel view synthesis with scene completion.")
    parser.add_argument("--threads", type=int, default=1, metavar="N",
                        help="cap for internal worker pools (default 1)")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-scenes",
                       help="generate procedural RGB-D scenes with manifests")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=6,
                   help="camera views per scene (default 6)")
    p.add_argument("--size", type=int, default=32,
                   help="square image resolution (default 32)")
    p.add_argument("--voxel-size", type=float, default=0.10)
    p.set_defaults(func=_cmd_gen_scenes)

    p = sub.add_parser("make-triplets",
                       help="mine source/source/query view triplets")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-union", type=float, default=0.65)
    p.add_argument("--max-union", type=float, default=0.70)
    p.add_argument("--max-single", type=float, default=0.50)
    p.add_argument("--pair-max", type=float, default=0.01)
    p.add_argument("--depth-tol", type=float, default=0.10)
    p.set_defaults(func=_cmd_make_triplets)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--phase", type=int, required=True, choices=(1, 2, 3, 4))
    p.add_argument("--data", required=True,
                   help="scene directory (phases 1-3) or triplet file (phase 4)")
    p.add_argument("--ckpt-in", default=None)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", choices=("B", "E", "D", "R"), default=None,
                   help="model variant for a fresh run (default R = full)")
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--unfreeze-renderer", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render a query view or a trajectory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--triplet", required=True)
    p.add_argument("--index", type=int, default=0,
                   help="which triplet in the file (default 0)")
    p.add_argument("--trajectory", type=int, default=0, metavar="N",
                   help="render N poses interpolated between the sources")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="compare a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None,
                   help="unobserved-region mask PNG (nonzero = unobserved)")
    p.add_argument("--pred-depth", default=None)
    p.add_argument("--gt-depth", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    if getattr(args, "pred_depth", None) and not args.gt_depth:
        print("error: --pred-depth requires --gt-depth", file=sys.stderr)
        return 2
    _worker_cap[0] = max(1, args.threads)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
