"""Cameras, poses, rays, RGB-D frames, point clouds, and voxel coordinates.

Conventions used everywhere in this package:

  - Camera frame is x-right, y-down, z-forward. Depth images store z-depth
    (distance along the optical axis), not ray length.
  - Pixel (u, v) samples the image plane at (u + 0.5, v + 0.5); integer pixel
    indices address pixel centers through that offset.
  - Poses are world-from-camera: p_world = R @ p_cam + t.
  - Voxel coordinate (i, j, k) covers the half-open world cube
    [origin + c * voxel_size, origin + (c + 1) * voxel_size).
  - All geometry math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_POSE_TOL = 1e-6


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; fx/fy/cx/cy in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def halved(self) -> "CameraIntrinsics":
        """Intrinsics of the same camera at half resolution."""
        if self.width % 2 or self.height % 2:
            raise ValueError("image size must be even to halve")
        return CameraIntrinsics(self.fx / 2, self.fy / 2, self.cx / 2, self.cy / 2,
                                self.width // 2, self.height // 2)


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray    # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _POSE_TOL:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > _POSE_TOL:
            raise ValueError("pose matrix last row must be [0 0 0 1]")
        return Pose(m[:3, :3], m[:3, 3])

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) to world frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse_transform(self, pts: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,), unit

    def __post_init__(self):
        o = _frozen(self.origin)
        d = _frozen(self.direction)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("ray needs 3-vector origin and direction")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RgbdFrame:
    """Posed RGB-D frame; rgb in [0, 1], depth in meters with 0 = invalid."""

    rgb: np.ndarray    # (H, W, 3)
    depth: np.ndarray  # (H, W)
    intrinsics: CameraIntrinsics
    pose: Pose

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        depth = _frozen(self.depth)
        h, w = self.intrinsics.height, self.intrinsics.width
        if rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {rgb.shape} does not match intrinsics {(h, w, 3)}")
        if depth.shape != (h, w):
            raise ValueError(f"depth shape {depth.shape} does not match intrinsics {(h, w)}")
        if rgb.min() < 0 or rgb.max() > 1:
            raise ValueError("rgb values must lie in [0, 1]")
        if depth.min() < 0 or not np.all(np.isfinite(depth)):
            raise ValueError("depth values must be finite and non-negative")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray     # (N, 3) in [0, 1]

    def __post_init__(self):
        p = _frozen(self.positions)
        c = _frozen(self.colors)
        if p.ndim != 2 or p.shape[1] != 3 or c.shape != p.shape:
            raise ValueError("positions and colors must both be (N, 3)")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class FeatureImage:
    """Rendered image carrying rgb, depth, opacity, and a per-pixel feature map."""

    rgb: np.ndarray      # (h, w, 3)
    depth: np.ndarray    # (h, w), z-depth meters
    opacity: np.ndarray  # (h, w) in [0, 1]
    feature: np.ndarray  # (h, w, d)

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        depth = _frozen(self.depth)
        opacity = _frozen(self.opacity)
        feature = _frozen(self.feature)
        hw = rgb.shape[:2]
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be (h, w, 3)")
        if depth.shape != hw or opacity.shape != hw or feature.shape[:2] != hw:
            raise ValueError("all channels must share the same spatial shape")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "opacity", opacity)
        object.__setattr__(self, "feature", feature)


def _normalized_pixel_dirs(u, v, intr: CameraIntrinsics):
    """Camera-frame unit directions for pixel coords; also returns the z factor.

    The z factor converts distance along the (unit) ray into z-depth.
    """
    x = (np.asarray(u, dtype=np.float64) + 0.5 - intr.cx) / intr.fx
    y = (np.asarray(v, dtype=np.float64) + 0.5 - intr.cy) / intr.fy
    z = np.ones_like(x)
    d = np.stack([x, y, z], axis=-1)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / norm, 1.0 / norm[..., 0]


def pixel_ray(u: float, v: float, intrinsics: CameraIntrinsics, pose: Pose) -> Ray:
    """World-space ray through pixel (u, v); samples the center at (u+0.5, v+0.5)."""
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ValueError(f"pixel ({u}, {v}) outside image bounds")
    d_cam, _ = _normalized_pixel_dirs(u, v, intrinsics)
    d_world = pose.rotation @ d_cam
    return Ray(pose.translation, d_world / np.linalg.norm(d_world))


def pixel_ray_grid(intrinsics: CameraIntrinsics, pose: Pose):
    """Rays for every pixel of a view.

    Returns (origin (3,), directions (H, W, 3) world-frame unit,
    z_factor (H, W)) where z_factor * t converts ray length t to z-depth.
    """
    v, u = np.meshgrid(np.arange(intrinsics.height), np.arange(intrinsics.width), indexing="ij")
    d_cam, zf = _normalized_pixel_dirs(u, v, intrinsics)
    d_world = d_cam @ pose.rotation.T
    return pose.translation.copy(), d_world, zf


def project(points: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """Project world points into a view.

    Returns (uv (N, 2) continuous pixel-index coords, z (N,) camera z-depth).
    Points behind the camera get z <= 0; callers must mask on z.
    """
    cam = pose.inverse_transform(np.asarray(points, dtype=np.float64))
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[..., 0] / z + intrinsics.cx - 0.5
        v = intrinsics.fy * cam[..., 1] / z + intrinsics.cy - 0.5
    return np.stack([u, v], axis=-1), z


def back_project(frame: RgbdFrame) -> PointCloud:
    """Lift a frame's valid-depth pixels to a world-space colored point cloud.

    Point order is row-major over valid pixels.
    """
    intr = frame.intrinsics
    v, u = np.nonzero(frame.depth > 0)
    z = frame.depth[v, u]
    x = (u + 0.5 - intr.cx) / intr.fx * z
    y = (v + 0.5 - intr.cy) / intr.fy * z
    cam = np.stack([x, y, z], axis=-1)
    return PointCloud(frame.pose.transform(cam), frame.rgb[v, u])


def fuse_frames(frames) -> PointCloud:
    """Concatenate back-projected frames in input order."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame to fuse")
    clouds = [back_project(f) for f in frames]
    return PointCloud(np.concatenate([c.positions for c in clouds]),
                      np.concatenate([c.colors for c in clouds]))


def world_to_voxel(points: np.ndarray, origin: np.ndarray, voxel_size: float) -> np.ndarray:
    """Map world points (..., 3) to integer voxel coords; boundaries go to the upper cell."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    points = np.asarray(points, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    return np.floor((points - origin) / voxel_size).astype(np.int64)


def grid_origin(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Canonical grid origin: floor of the min corner minus one voxel of padding."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("cannot derive an origin from an empty point set")
    return np.floor(points.reshape(-1, 3).min(axis=0)) - voxel_size
