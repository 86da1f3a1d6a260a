"""Differentiable sparse-voxel volume renderer.

Rays are clipped to the bounding box of the occupied cells, walked cell
by cell with an axis-stepping traversal, and sampled at fixed spacing
inside every occupied cell they cross.  Each sample decodes a density
and a color from trilinearly interpolated vertex features through small
MLPs; front-to-back compositing turns the samples into per-ray color,
depth, opacity, and feature outputs.

Conventions follow core: float64 throughout, unit ray directions, and
z-depth in images (per-ray outputs stay in ray-length t; render_view
applies the pixel z-factor).  Compositing derives transmittance from a
cumulative sum of optical depths, so per ray the sample weights plus the
final transmittance telescope to one up to rounding.  Early termination
zeroes the optical depth of samples past the cutoff instead of slicing
them away, which keeps that identity and the tape layout intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GatherPlan, Tape, Var
from .core import CameraIntrinsics, FeatureImage, Pose, pixel_ray_grid
from .sparsegrid import (SparseFeatureGrid, SparseVoxelSet, corner_weights,
                         pack_coords, rows_of)


@dataclass(frozen=True)
class RenderConfig:
    """Knobs for sampling and compositing."""

    step_size: float | None = None   # meters between samples, None = cell / 4
    max_samples: int = 256           # per-ray cap, nearest samples win
    eps_transmit: float = 1e-3       # stop once transmittance drops below this
    background: tuple = (0.0, 0.0, 0.0)
    use_viewdir: bool = True
    view_freqs: int = 4
    jitter: bool = False             # uniform in-step offsets instead of midpoints
    chunk_rays: int = 4096           # render_view batching

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.eps_transmit < 1:
            raise ValueError("eps_transmit must be in [0, 1)")
        if self.max_samples < 1:
            raise ValueError("max_samples must be at least 1")

    def resolved_step(self, cell_size: float) -> float:
        return self.step_size if self.step_size is not None else cell_size / 4


@dataclass(frozen=True)
class RayHits:
    """Occupied cells crossed by each ray, grouped by ray, ascending in t."""

    ray_index: np.ndarray  # (M,) int64
    cells: np.ndarray      # (M, 3) int64
    t_enter: np.ndarray    # (M,)
    t_exit: np.ndarray     # (M,)
    n_rays: int


@dataclass(frozen=True)
class RaySampleBatch:
    """Point samples drawn inside hit intervals, grouped like RayHits."""

    ray_index: np.ndarray  # (S,) int64
    cells: np.ndarray      # (S, 3) int64
    t: np.ndarray          # (S,)
    delta: np.ndarray      # (S,)
    positions: np.ndarray  # (S, 3) world
    n_rays: int


def _empty_hits(n_rays: int) -> RayHits:
    z = np.zeros(0, dtype=np.int64)
    return RayHits(z, z.reshape(0, 3), np.zeros(0), np.zeros(0), n_rays)


def intersect_voxels(voxels: SparseVoxelSet, origins: np.ndarray,
                     dirs: np.ndarray) -> RayHits:
    """March every ray through the occupied cells it crosses.

    Intervals are clipped to t >= 0 and kept only when t_exit > t_enter,
    so grazing contacts drop out.  Rays may start inside the grid.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = len(origins)
    if len(voxels) == 0 or n_rays == 0:
        return _empty_hits(n_rays)

    cs = voxels.cell_size()
    org = voxels.origin
    cmin = voxels.coords.min(axis=0)
    cmax = voxels.coords.max(axis=0)
    lo = org + cmin * cs
    hi = org + (cmax + 1) * cs

    zero = dirs == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(zero, np.inf, 1.0 / dirs)
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    inside = (origins >= lo) & (origins <= hi)
    t0ax = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    t1ax = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(t0ax.max(axis=1), 0.0)
    t1 = t1ax.min(axis=1)

    active = t1 > t0
    cell = np.zeros((n_rays, 3), dtype=np.int64)
    start = origins[active] + t0[active, None] * dirs[active]
    cell[active] = np.clip(
        np.floor((start - org) / cs).astype(np.int64), cmin, cmax)
    t_cur = t0.copy()
    step = np.sign(dirs).astype(np.int64)
    fwd = (dirs > 0).astype(np.int64)

    out_ray, out_cell, out_te, out_tx = [], [], [], []
    # a ray crosses at most the grid extent per axis; +3 guards fp edge starts
    for _ in range(int((cmax - cmin + 1).sum()) + 3):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        c = cell[idx]
        o = origins[idx]
        nb = org + (c + fwd[idx]) * cs
        with np.errstate(invalid="ignore"):
            tax = np.where(zero[idx], np.inf, (nb - o) * inv[idx])
        ax = np.argmin(tax, axis=1)
        t_exit = tax[np.arange(len(idx)), ax]
        te = t_cur[idx]
        tx = np.minimum(t_exit, t1[idx])
        emit = voxels.contains(c) & (tx > te)
        if emit.any():
            out_ray.append(idx[emit])
            out_cell.append(c[emit])
            out_te.append(te[emit])
            out_tx.append(tx[emit])
        c[np.arange(len(idx)), ax] += step[idx][np.arange(len(idx)), ax]
        cell[idx] = c
        t_cur[idx] = t_exit
        alive = (t_exit < t1[idx]) & np.all((c >= cmin) & (c <= cmax), axis=1)
        active[idx] = alive

    if not out_ray:
        return _empty_hits(n_rays)
    ray = np.concatenate(out_ray)
    order = np.argsort(ray, kind="stable")  # per-ray ascending t is preserved
    return RayHits(ray[order], np.concatenate(out_cell)[order],
                   np.concatenate(out_te)[order],
                   np.concatenate(out_tx)[order], n_rays)


def sample_ray(hits: RayHits, origins: np.ndarray, dirs: np.ndarray,
               step_size: float, max_samples: int = 256,
               rng: np.random.Generator | None = None) -> RaySampleBatch:
    """Draw samples at uniform steps inside every hit interval.

    Each interval gets ceil(length / step_size) samples at sub-step
    midpoints (or uniform offsets when an rng is passed), so delta sums
    back to the interval length.  Per ray, only the nearest max_samples
    survive.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    m = len(hits.ray_index)
    if m == 0:
        z = np.zeros(0, dtype=np.int64)
        return RaySampleBatch(z, z.reshape(0, 3), np.zeros(0), np.zeros(0),
                              np.zeros((0, 3)), hits.n_rays)

    length = hits.t_exit - hits.t_enter
    n = np.maximum(np.ceil(length / step_size - 1e-12).astype(np.int64), 1)
    # cap at max_samples per ray, counting from the nearest interval
    csum = np.cumsum(n)
    _, seg_first, seg_inv = np.unique(hits.ray_index, return_index=True,
                                      return_inverse=True)
    before_seg = (csum - n)[seg_first]
    before = csum - n - before_seg[seg_inv]
    take = np.clip(max_samples - before, 0, n)

    total = int(take.sum())
    hit_of = np.repeat(np.arange(m), take)
    first = np.cumsum(take) - take
    j = np.arange(total) - np.repeat(first, take)
    dt = length / n
    off = rng.uniform(0.0, 1.0, total) if rng is not None else 0.5
    t = hits.t_enter[hit_of] + (j + off) * dt[hit_of]
    ray = hits.ray_index[hit_of]
    pos = origins[ray] + t[:, None] * dirs[ray]
    return RaySampleBatch(ray, hits.cells[hit_of], t, dt[hit_of], pos,
                          hits.n_rays)


def view_encoding(dirs: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """Raw direction plus sin/cos at octave frequencies 1, 2, 4, ..."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    parts = [dirs]
    for k in range(n_freqs):
        s = dirs * (2.0 ** k)
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=1)


class RadianceDecoder:
    """Density and color MLPs over interpolated vertex features.

    disentangled=True splits a 32-channel feature into 8 density channels
    and 24 color channels with independent 2-hidden-layer MLPs.  With
    disentangled=False one shared trunk reads every channel and a single
    linear head produces each output.  The view direction joins the color
    branch as a sinusoidal encoding when use_viewdir is set.
    """

    def __init__(self, store: ad.ParamStore, prefix: str, feature_dim: int = 32,
                 hidden: int = 64, disentangled: bool = True,
                 use_viewdir: bool = True, view_freqs: int = 4,
                 rng: np.random.Generator | None = None):
        if disentangled and feature_dim != 32:
            raise ValueError("disentangled decoding expects 32 feature channels")
        self.store = store
        self.prefix = prefix
        self.feature_dim = feature_dim
        self.disentangled = disentangled
        self.use_viewdir = use_viewdir
        self.view_freqs = view_freqs
        self.view_dim = 3 + 6 * view_freqs if use_viewdir else 0

        def dense(name, n_in, n_out):
            store.add(f"{prefix}{name}/w", (n_in, n_out), rng)
            store.add(f"{prefix}{name}/b", (n_out,), init="zeros")

        if disentangled:
            dense("alpha/l0", 8, hidden)
            dense("alpha/l1", hidden, hidden)
            dense("alpha/l2", hidden, 1)
            dense("rgb/l0", 24 + self.view_dim, hidden)
            dense("rgb/l1", hidden, hidden)
            dense("rgb/l2", hidden, 3)
        else:
            dense("trunk/l0", feature_dim, hidden)
            dense("trunk/l1", hidden, hidden)
            dense("alpha/head", hidden, 1)
            dense("rgb/head", hidden + self.view_dim, 3)

    def _layer(self, tape: Tape, x: Var, name: str) -> Var:
        w = tape.param(self.store, f"{self.prefix}{name}/w")
        b = tape.param(self.store, f"{self.prefix}{name}/b")
        return ad.matmul(x, w) + b

    def decode(self, tape: Tape, features: Var, dirs: np.ndarray):
        """Per-sample (density, color); dirs is (S, 3) numpy."""
        n = features.value.shape[0]
        if features.value.shape[1] != self.feature_dim:
            raise ValueError("feature width does not match the decoder")
        enc = None
        if self.use_viewdir:
            enc = tape.constant(view_encoding(dirs, self.view_freqs))
        if self.disentangled:
            h = ad.relu(self._layer(tape, features[:, :8], "alpha/l0"))
            h = ad.relu(self._layer(tape, h, "alpha/l1"))
            sigma = ad.softplus(self._layer(tape, h, "alpha/l2")).reshape(n)
            cin = features[:, 8:]
            if enc is not None:
                cin = ad.concat([cin, enc], axis=1)
            h = ad.relu(self._layer(tape, cin, "rgb/l0"))
            h = ad.relu(self._layer(tape, h, "rgb/l1"))
            rgb = ad.sigmoid(self._layer(tape, h, "rgb/l2"))
        else:
            h = ad.relu(self._layer(tape, features, "trunk/l0"))
            h = ad.relu(self._layer(tape, h, "trunk/l1"))
            sigma = ad.softplus(self._layer(tape, h, "alpha/head")).reshape(n)
            hc = ad.concat([h, enc], axis=1) if enc is not None else h
            rgb = ad.sigmoid(self._layer(tape, hc, "rgb/head"))
        return sigma, rgb


def interpolate_features(tape: Tape, features: Var, vertices: SparseVoxelSet,
                         batch: RaySampleBatch) -> Var:
    """Trilinear vertex-feature interpolation at the sample positions.

    features rows align with vertices.coords.  Lattice points absent from
    the vertex set contribute a zero feature.
    """
    corners, w = corner_weights(batch.positions, batch.cells, vertices.origin,
                                vertices.voxel_size)
    rows = rows_of(vertices.keys, pack_coords(corners)).reshape(-1, 8)
    plan = GatherPlan(rows, len(vertices))
    vals = ad.gather(features, plan)                      # (S, 8, C)
    return (vals * w[:, :, None]).sum(axis=1)


def composite(tape: Tape, batch: RaySampleBatch, sigma: Var, rgb: Var,
              cfg: RenderConfig, extras: dict[str, Var] | None = None):
    """Front-to-back alpha compositing over a padded (ray, sample) layout.

    Returns a dict of Vars: rgb (R,3), depth_t (R,) opacity-normalized
    expected ray length, opacity (R,), transmittance (R,), plus one
    composited entry per extras item.  Per ray the sample weights and the
    final transmittance sum to one up to float64 rounding.
    """
    n_rays = batch.n_rays
    counts = np.bincount(batch.ray_index, minlength=n_rays)
    smax = max(int(counts.max()) if counts.size else 0, 1)
    starts = np.cumsum(counts) - counts
    slot = np.arange(smax)
    pad_idx = np.where(slot[None, :] < counts[:, None],
                       starts[:, None] + slot[None, :], -1)
    plan = GatherPlan(pad_idx, len(batch.ray_index))

    sd = ad.gather(sigma * batch.delta, plan)             # (R, S) zero-padded
    if cfg.eps_transmit > 0.0:
        # prefix mask: keep a sample only while the transmittance entering
        # it is still above threshold; zeroed optical depth freezes T there
        c_np = np.cumsum(sd.value, axis=1)
        keep = np.exp(sd.value - c_np) >= cfg.eps_transmit
        sd = sd * keep.astype(np.float64)
    c = sd.cumsum(axis=1)
    t_excl = ad.exp(sd - c)
    alpha = 1.0 - ad.exp(-sd)
    w = t_excl * alpha
    trans = ad.exp(-c[:, -1])

    opacity = w.sum(axis=1)
    w3 = w.reshape(n_rays, smax, 1)
    out_rgb = (ad.gather(rgb, plan) * w3).sum(axis=1)
    background = np.asarray(cfg.background, dtype=np.float64)
    if np.any(background != 0.0):
        out_rgb = out_rgb + trans.reshape(n_rays, 1) * background
    t_pad = plan.take(batch.t)
    depth_t = (w * t_pad).sum(axis=1) / ad.clip(opacity, lo=1e-8)

    out = {"rgb": out_rgb, "depth_t": depth_t, "opacity": opacity,
           "transmittance": trans}
    for name, val in (extras or {}).items():
        out[name] = (ad.gather(val, plan) * w3).sum(axis=1)
    return out


def render_rays(embeddings: SparseFeatureGrid, voxels: SparseVoxelSet,
                origins: np.ndarray, dirs: np.ndarray,
                decoder: RadianceDecoder, cfg: RenderConfig,
                tape: Tape | None = None, features: Var | None = None,
                rng: np.random.Generator | None = None,
                want_feature: bool = True):
    """Render arbitrary rays against a vertex-feature grid.

    embeddings must be a vertex-kind grid on the voxel lattice of
    `voxels`.  Pass a tape plus a features Var to keep gradients flowing
    into upstream producers; otherwise the stored features act as
    constants on a throwaway tape.
    """
    if embeddings.kind != "vertex":
        raise ValueError("renderer needs vertex-kind embeddings")
    if tape is None:
        tape = Tape()
    if features is None:
        features = tape.constant(embeddings.features)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)

    step = cfg.resolved_step(voxels.cell_size())
    hits = intersect_voxels(voxels, origins, dirs)
    batch = sample_ray(hits, origins, dirs, step, cfg.max_samples,
                       rng if cfg.jitter else None)
    d = embeddings.channels
    if len(batch.ray_index):
        feats = interpolate_features(tape, features, embeddings, batch)
        sigma, rgb = decoder.decode(tape, feats, dirs[batch.ray_index])
    else:
        feats = tape.constant(np.zeros((0, d)))
        sigma = tape.constant(np.zeros(0))
        rgb = tape.constant(np.zeros((0, 3)))
    extras = {"feature": feats} if want_feature else None
    out = composite(tape, batch, sigma, rgb, cfg, extras)
    out["tape"] = tape
    return out


def render_view(embeddings: SparseFeatureGrid, voxels: SparseVoxelSet,
                intrinsics: CameraIntrinsics, pose: Pose,
                decoder: RadianceDecoder, cfg: RenderConfig,
                tape: Tape | None = None, features: Var | None = None,
                rng: np.random.Generator | None = None):
    """Render one ray per half-resolution pixel.

    Without a tape this runs chunked inference and returns a
    FeatureImage whose depth is z-depth.  With a tape it renders all
    rays in one differentiable pass and returns the render_rays dict
    plus the flattened z-factor under "z_factor".
    """
    half = intrinsics.halved()
    origin, dgrid, zf = pixel_ray_grid(half, pose)
    h, w = dgrid.shape[:2]
    dirs = dgrid.reshape(-1, 3)
    origins = np.broadcast_to(origin, dirs.shape)
    if tape is not None:
        out = render_rays(embeddings, voxels, origins, dirs, decoder, cfg,
                          tape=tape, features=features, rng=rng)
        out["z_factor"] = zf.reshape(-1)
        out["shape"] = (h, w)
        return out

    n = len(dirs)
    rgb = np.zeros((n, 3))
    t_exp = np.zeros(n)
    opacity = np.zeros(n)
    feat = np.zeros((n, embeddings.channels))
    for at in range(0, n, cfg.chunk_rays):
        sl = slice(at, min(at + cfg.chunk_rays, n))
        out = render_rays(embeddings, voxels, origins[sl], dirs[sl], decoder,
                          cfg, rng=rng)
        rgb[sl] = out["rgb"].value
        t_exp[sl] = out["depth_t"].value
        opacity[sl] = out["opacity"].value
        feat[sl] = out["feature"].value
    depth = t_exp.reshape(h, w) * zf
    return FeatureImage(rgb.reshape(h, w, 3), depth, opacity.reshape(h, w),
                        feat.reshape(h, w, -1))
