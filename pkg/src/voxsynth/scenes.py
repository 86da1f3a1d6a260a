"""Procedural room scenes with exact analytic ground truth.

A scene is an axis-aligned room interior (z up) containing a few axis-aligned
boxes. Every surface carries a deterministic texture (flat color or checker as
a function of world position), so RGB-D renders, occupancy shells, and
view-overlap statistics all have closed-form oracles that tests can recompute
independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (CameraIntrinsics, Pose, RgbdFrame, pixel_ray_grid, project)
from .sparsegrid import SparseVoxelSet

_PALETTE = np.array([
    [0.90, 0.30, 0.25], [0.25, 0.55, 0.90], [0.30, 0.75, 0.40],
    [0.95, 0.80, 0.25], [0.70, 0.40, 0.85], [0.90, 0.90, 0.88],
    [0.55, 0.35, 0.20], [0.35, 0.80, 0.80],
])


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.ascontiguousarray(self.lo, dtype=np.float64)
        hi = np.ascontiguousarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("box needs lo < hi per axis")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p > self.lo) and np.all(p < self.hi))


@dataclass(frozen=True)
class FaceTexture:
    """Flat color, or a two-color checker keyed to world position."""

    kind: str                 # "flat" | "checker"
    color: np.ndarray         # (3,)
    color2: np.ndarray = None
    period: float = 1.0

    def __post_init__(self):
        if self.kind not in ("flat", "checker"):
            raise ValueError("texture kind must be 'flat' or 'checker'")
        if self.kind == "checker" and self.color2 is None:
            raise ValueError("checker texture needs a second color")
        if self.period <= 0:
            raise ValueError("checker period must be positive")
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.color2 is not None:
            object.__setattr__(self, "color2", np.asarray(self.color2, dtype=np.float64))

    def sample(self, points: np.ndarray, axis: int) -> np.ndarray:
        """Colors at world points on a face whose normal is the given axis."""
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "flat":
            return np.broadcast_to(self.color, points.shape[:-1] + (3,)).copy()
        u_ax, v_ax = [a for a in range(3) if a != axis]
        parity = (np.floor(points[..., u_ax] / self.period)
                  + np.floor(points[..., v_ax] / self.period)).astype(np.int64) % 2
        return np.where(parity[..., None] == 0, self.color, self.color2)


def face_index(kind: str, axis: int, side: int, box: int = 0) -> int:
    """Stable index for a face: room faces 0..5, then 6 per box."""
    base = axis * 2 + side
    return base if kind == "room" else 6 + box * 6 + base


@dataclass(frozen=True)
class ProceduralScene:
    """Room interior with boxes; textures indexed by face_index."""

    scene_id: str
    room: Box
    boxes: tuple
    textures: tuple  # FaceTexture per face_index

    def __post_init__(self):
        expected = 6 + 6 * len(self.boxes)
        if len(self.textures) != expected:
            raise ValueError(f"need {expected} face textures, got {len(self.textures)}")
        for b in self.boxes:
            if np.any(b.lo <= self.room.lo) or np.any(b.hi >= self.room.hi):
                raise ValueError("boxes must lie strictly inside the room")

    def valid_camera(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=np.float64)
        if not self.room.contains(p):
            return False
        return not any(np.all(p >= b.lo) and np.all(p <= b.hi) for b in self.boxes)

    # -- serialization for scene manifests ----------------------------------

    def to_dict(self) -> dict:
        def tex(t: FaceTexture):
            d = {"kind": t.kind, "color": list(t.color)}
            if t.kind == "checker":
                d["color2"] = list(t.color2)
                d["period"] = t.period
            return d

        return {
            "scene_id": self.scene_id,
            "room": {"lo": list(self.room.lo), "hi": list(self.room.hi)},
            "boxes": [{"lo": list(b.lo), "hi": list(b.hi)} for b in self.boxes],
            "textures": [tex(t) for t in self.textures],
        }

    @staticmethod
    def from_dict(d: dict) -> "ProceduralScene":
        def tex(t):
            if t["kind"] == "checker":
                return FaceTexture("checker", t["color"], t["color2"], t["period"])
            return FaceTexture("flat", t["color"])

        return ProceduralScene(
            d["scene_id"],
            Box(d["room"]["lo"], d["room"]["hi"]),
            tuple(Box(b["lo"], b["hi"]) for b in d["boxes"]),
            tuple(tex(t) for t in d["textures"]),
        )


def generate_scene(seed: int, min_boxes: int = 2, max_boxes: int = 6) -> ProceduralScene:
    """Deterministic random room: 3-5 m sides, boxes of 0.3-1.2 m, palette textures."""
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-0.4, 0.4, size=3)
    hi = lo + rng.uniform(3.0, 5.0, size=3)
    room = Box(lo, hi)
    boxes = []
    n_boxes = int(rng.integers(min_boxes, max_boxes + 1))
    for _ in range(n_boxes):
        size = rng.uniform(0.3, 1.2, size=3)
        blo = rng.uniform(room.lo + 0.15, room.hi - size - 0.15)
        boxes.append(Box(blo, blo + size))

    def random_texture():
        c1 = _PALETTE[rng.integers(len(_PALETTE))]
        if rng.random() < 0.5:
            return FaceTexture("flat", c1)
        c2 = _PALETTE[rng.integers(len(_PALETTE))]
        period = float(rng.choice([0.5, 0.75, 1.0]))
        return FaceTexture("checker", c1, c2, period)

    textures = tuple(random_texture() for _ in range(6 + 6 * n_boxes))
    return ProceduralScene(f"scene-{seed:04d}", room, tuple(boxes), textures)


def sample_camera_poses(scene: ProceduralScene, count: int,
                        rng: np.random.Generator, margin: float = 0.5):
    """Valid in-room camera poses looking at random interior targets."""
    poses = []
    room = scene.room
    while len(poses) < count:
        eye = rng.uniform(room.lo + margin, room.hi - margin)
        if not scene.valid_camera(eye):
            continue
        target = rng.uniform(room.lo + margin, room.hi - margin)
        d = target - eye
        dist = np.linalg.norm(d)
        if dist < 1.0 or abs(d[2]) > 0.6 * dist:
            continue
        poses.append(look_at_pose(eye, target))
    return poses


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> Pose:
    """World-from-camera pose looking from eye to target, z-up world, y-down image."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("camera cannot look straight up or down")
    right = right / n
    down = np.cross(forward, right)  # completes the y-down right-handed frame
    return Pose(np.stack([right, down, forward], axis=1), eye)


def raycast_gt(scene: ProceduralScene, intrinsics: CameraIntrinsics,
               pose: Pose) -> RgbdFrame:
    """Exact per-pixel first-hit render: RGB from face textures, z-depth image."""
    if not scene.valid_camera(pose.translation):
        raise ValueError("camera pose lies inside solid geometry or outside the room")
    origin, dirs, zf = pixel_ray_grid(intrinsics, pose)
    h, w = dirs.shape[:2]
    d = dirs.reshape(-1, 3)
    eps = 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        # room exit: the first wall plane crossed outward
        t_room = np.full(len(d), np.inf)
        axis_room = np.zeros(len(d), dtype=np.int64)
        side_room = np.zeros(len(d), dtype=np.int64)
        for a in range(3):
            t_hi = (scene.room.hi[a] - origin[a]) / d[:, a]
            t_lo = (scene.room.lo[a] - origin[a]) / d[:, a]
            t_a = np.where(d[:, a] > eps, t_hi, np.where(d[:, a] < -eps, t_lo, np.inf))
            closer = t_a < t_room
            t_room = np.where(closer, t_a, t_room)
            axis_room = np.where(closer, a, axis_room)
            side_room = np.where(closer, (d[:, a] > 0).astype(np.int64), side_room)

        t_best = t_room
        face_best = axis_room * 2 + side_room  # == face_index("room", axis, side)
        axis_best = axis_room
        for bi, box in enumerate(scene.boxes):
            t1 = (box.lo[None, :] - origin[None, :]) / d
            t2 = (box.hi[None, :] - origin[None, :]) / d
            tn = np.minimum(t1, t2)
            tf = np.maximum(t1, t2)
            tn = np.where(np.abs(d) <= eps,
                          np.where((origin >= box.lo) & (origin <= box.hi), -np.inf, np.inf),
                          tn)
            tf = np.where(np.abs(d) <= eps,
                          np.where((origin >= box.lo) & (origin <= box.hi), np.inf, -np.inf),
                          tf)
            t_near = tn.max(axis=1)
            t_far = tf.min(axis=1)
            enter_axis = tn.argmax(axis=1)
            hit = (t_near > eps) & (t_near <= t_far) & (t_near < t_best)
            t_best = np.where(hit, t_near, t_best)
            axis_best = np.where(hit, enter_axis, axis_best)
            enter_side = (d[np.arange(len(d)), enter_axis] < 0).astype(np.int64)
            face_best = np.where(hit, 6 + bi * 6 + enter_axis * 2 + enter_side,
                                 face_best)

    points = origin[None, :] + t_best[:, None] * d
    rgb = np.zeros((len(d), 3))
    for f in np.unique(face_best):
        sel = face_best == f
        axis = int(axis_best[np.nonzero(sel)[0][0]])
        rgb[sel] = scene.textures[f].sample(points[sel], axis)
    depth = (t_best.reshape(h, w)) * zf
    return RgbdFrame(np.clip(rgb.reshape(h, w, 3), 0.0, 1.0), depth, intrinsics, pose)


def _faces(scene: ProceduralScene):
    """All face rectangles as (axis, plane value, lo2, hi2) with in-plane bounds."""
    out = []
    room = scene.room
    for a in range(3):
        other = [x for x in range(3) if x != a]
        for side, plane in ((0, room.lo[a]), (1, room.hi[a])):
            out.append((a, plane, room.lo[other], room.hi[other]))
    for b in scene.boxes:
        for a in range(3):
            other = [x for x in range(3) if x != a]
            for plane in (b.lo[a], b.hi[a]):
                out.append((a, plane, b.lo[other], b.hi[other]))
    return out


def gt_occupancy(scene: ProceduralScene, voxel_size: float,
                 origin: np.ndarray) -> SparseVoxelSet:
    """Shell occupancy: cells whose closed AABB touches any scene surface."""
    origin = np.asarray(origin, dtype=np.float64)
    chunks = []
    for axis, plane, lo2, hi2 in _faces(scene):
        other = [x for x in range(3) if x != axis]

        def cell_range(lo_w, hi_w, a):
            lo_c = int(np.ceil((lo_w - origin[a]) / voxel_size - 1.0))
            hi_c = int(np.floor((hi_w - origin[a]) / voxel_size))
            return np.arange(lo_c, hi_c + 1)

        ra = cell_range(plane, plane, axis)
        ru = cell_range(lo2[0], hi2[0], other[0])
        rv = cell_range(lo2[1], hi2[1], other[1])
        grid = np.stack(np.meshgrid(ra, ru, rv, indexing="ij"), axis=-1).reshape(-1, 3)
        cells = np.empty_like(grid)
        cells[:, axis] = grid[:, 0]
        cells[:, other[0]] = grid[:, 1]
        cells[:, other[1]] = grid[:, 2]
        chunks.append(cells)
    return SparseVoxelSet(np.concatenate(chunks), voxel_size, origin, 1)


# -- view overlap and triplet mining -------------------------------------------


def visibility_mask(query: RgbdFrame, source: RgbdFrame,
                    depth_tol: float = 0.10) -> np.ndarray:
    """Query pixels whose surface point is visible in the source frame.

    A point is visible when it projects inside the source image onto a pixel
    whose stored depth matches the projected depth within depth_tol meters.
    """
    valid = query.depth > 0
    vq, uq = np.nonzero(valid)
    z = query.depth[vq, uq]
    intr = query.intrinsics
    x = (uq + 0.5 - intr.cx) / intr.fx * z
    y = (vq + 0.5 - intr.cy) / intr.fy * z
    world = query.pose.transform(np.stack([x, y, z], axis=-1))
    uv, zs = project(world, source.intrinsics, source.pose)
    px = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    py = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    inside = ((zs > 0) & (px >= 0) & (px < source.intrinsics.width)
              & (py >= 0) & (py < source.intrinsics.height))
    vis_flat = np.zeros(len(vq), dtype=bool)
    pi = np.nonzero(inside)[0]
    src_d = source.depth[py[pi], px[pi]]
    vis_flat[pi] = (src_d > 0) & (np.abs(src_d - zs[pi]) <= depth_tol)
    out = np.zeros(query.depth.shape, dtype=bool)
    out[vq, uq] = vis_flat
    return out


def view_overlap(query: RgbdFrame, source: RgbdFrame,
                 depth_tol: float = 0.10) -> float:
    """Fraction of the query's valid-depth pixels visible in the source."""
    valid = query.depth > 0
    if not valid.any():
        raise ValueError("query frame has no valid depth")
    return float(visibility_mask(query, source, depth_tol).sum() / valid.sum())


def unobserved_mask(query: RgbdFrame, sources, depth_tol: float = 0.10) -> np.ndarray:
    """Valid query pixels seen by none of the source frames."""
    mask = query.depth > 0
    for s in sources:
        mask = mask & ~visibility_mask(query, s, depth_tol)
    return mask


@dataclass(frozen=True)
class TripletIndices:
    """One mined (source, source, query) combination, as indices into the input."""

    query: int
    sources: tuple
    source_overlaps: tuple
    union_overlap: float


def select_triplets(frames, max_single: float = 0.50, min_union: float = 0.65,
                    max_union: float = 0.70, source_pair_max: float = 0.01,
                    depth_tol: float = 0.10, max_per_query: int = 3):
    """Mine (source, source, query) triplets under the overlap rules.

    Rules: the two sources overlap each other at most source_pair_max (in both
    directions); each source covers strictly less than max_single of the
    query; together they cover a union fraction inside [min_union, max_union].
    Enumeration runs in a canonical frame order so the result is invariant to
    the order of the input list.
    """
    frames = list(frames)
    n = len(frames)
    canon = sorted(range(n), key=lambda i: (frames[i].pose.matrix().tobytes(),
                                            frames[i].depth.tobytes()))
    valid_counts = [int((f.depth > 0).sum()) for f in frames]
    masks = {}

    def mask(q, s):
        if (q, s) not in masks:
            masks[(q, s)] = visibility_mask(frames[q], frames[s], depth_tol)
        return masks[(q, s)]

    def overlap(q, s):
        return mask(q, s).sum() / valid_counts[q]

    out = []
    for q in canon:
        found = 0
        for ii in range(n):
            if found >= max_per_query:
                break
            for jj in range(ii + 1, n):
                i, j = canon[ii], canon[jj]
                if q in (i, j):
                    continue
                if overlap(i, j) > source_pair_max or overlap(j, i) > source_pair_max:
                    continue
                ov_i, ov_j = overlap(q, i), overlap(q, j)
                if ov_i >= max_single or ov_j >= max_single:
                    continue
                union = (mask(q, i) | mask(q, j)).sum() / valid_counts[q]
                if not (min_union <= union <= max_union):
                    continue
                out.append(TripletIndices(q, (i, j), (float(ov_i), float(ov_j)),
                                          float(union)))
                found += 1
                if found >= max_per_query:
                    break
    return out
