"""Staged training, inference, and checkpointing for the full system.

Training runs in four phases over one shared parameter store: (1) the
point encoder and radiance decoders on ray reconstruction, (2) the
geometry completion net on paired partial/full occupancies, (3) the
vertex inpainting net on paired partial/full embeddings, (4) the 2D
upsampler against a patch critic on mined triplets.  Each phase updates
only its own tensors; everything else stays bitwise frozen.

Data order is round-robin and all sampling flows through one seeded
generator, so a fixed seed reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Var, load_checkpoint, save_checkpoint
from .completion import (GeometryNet, TextureNet, InpaintInput, InpaintSample,
                         complete_geometry, geometry_level_losses,
                         inpaint_texture, pad_features, texture_loss)
from .core import (CameraIntrinsics, PointCloud, Pose, RgbdFrame, FeatureImage,
                   fuse_frames, grid_origin, pixel_ray_grid)
from .encoder import prepare_encoding, register_encoder_params, run_encoder
from .renderer import (RadianceDecoder, RenderConfig, intersect_voxels,
                       render_rays, render_view)
from .refine2d import DiscriminatorNet, UpsamplerNet, bilinear_upsample, upsample
from .sparsegrid import SparseFeatureGrid, SparseVoxelSet, vertex_set, voxelize

_META_PREFIX = "meta/"


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches shared by training and inference.

    The ablation ladder: use_encoder=False falls back to raw per-vertex
    point colors (3 channels) with a single shared decoder trunk;
    disentangled splits the 32-channel embedding into separate density
    and color decoders and therefore requires the encoder; refine bolts
    the 2D upsampler onto the coarse render.
    """

    voxel_size: float = 0.10
    use_encoder: bool = True
    disentangled: bool = True
    refine: bool = True
    use_viewdir: bool = True
    decoder_hidden: int = 64

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.disentangled and not self.use_encoder:
            raise ValueError("disentangled decoding needs encoder embeddings")

    @property
    def feature_dim(self) -> int:
        return 32 if self.use_encoder else 3

    def tag(self) -> str:
        parts = ["B"]
        if self.use_encoder:
            parts.append("E")
        if self.disentangled:
            parts.append("D")
        if self.refine:
            parts.append("R")
        return "+".join(parts)

    @staticmethod
    def from_tag(tag: str, **kw) -> "ModelConfig":
        order = ("B", "E", "D", "R")
        tag = tag.strip().upper()
        if tag not in order:
            raise ValueError(f"unknown ablation tag {tag!r}")
        level = order.index(tag)
        return ModelConfig(use_encoder=level >= 1, disentangled=level >= 2,
                           refine=level >= 3, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PhaseConfig:
    phase: int
    steps: int
    rays_per_step: int = 1024
    lr: float = 1e-3
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.1
    lambda_gan: float = 0.01
    unfreeze_renderer: bool = False

    def __post_init__(self):
        if self.phase not in (1, 2, 3, 4):
            raise ValueError("phase must be 1..4")
        if self.steps < 0 or self.rays_per_step < 1 or self.lr <= 0:
            raise ValueError("invalid steps, ray count, or learning rate")
        if min(self.lambda_rgb, self.lambda_depth, self.lambda_gan) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.unfreeze_renderer and self.phase != 4:
            raise ValueError("the renderer can only unfreeze in phase 4")


@dataclass(frozen=True)
class Triplet:
    """Two posed source views and the query view they must reconstruct."""

    s1: RgbdFrame
    s2: RgbdFrame
    q: RgbdFrame

    def __post_init__(self):
        if not (self.s1.intrinsics == self.s2.intrinsics == self.q.intrinsics):
            raise ValueError("triplet frames must share intrinsics")

    @property
    def sources(self) -> tuple:
        return (self.s1, self.s2)


# -- checkpointing ---------------------------------------------------------------


@dataclass
class Checkpoint:
    """Parameter snapshot plus phase, step, and the producing config."""

    tensors: dict
    phase: int
    step: int
    config: ModelConfig

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def save(self, path):
        clash = [n for n in self.tensors if n.startswith(_META_PREFIX)]
        if clash:
            raise ValueError(f"reserved tensor names in checkpoint: {clash}")
        merged = dict(self.tensors)
        merged[f"{_META_PREFIX}phase"] = np.array([float(self.phase)])
        merged[f"{_META_PREFIX}step"] = np.array([float(self.step)])
        raw = np.frombuffer(self.config.to_json().encode(), dtype=np.uint8)
        merged[f"{_META_PREFIX}config_json"] = raw.astype(np.float64)
        save_checkpoint(path, merged)

    @staticmethod
    def load(path) -> "Checkpoint":
        state = load_checkpoint(path)
        try:
            phase = int(state.pop(f"{_META_PREFIX}phase")[0])
            step = int(state.pop(f"{_META_PREFIX}step")[0])
            raw = state.pop(f"{_META_PREFIX}config_json")
        except KeyError as e:
            raise ValueError(f"checkpoint is missing metadata tensor {e}")
        cfg = ModelConfig(**json.loads(raw.astype(np.uint8).tobytes().decode()))
        return Checkpoint(state, phase, step, cfg)


class Model:
    """All learned components registered on one parameter store."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        d = config.feature_dim
        if config.use_encoder:
            register_encoder_params(self.store, rng)
        self.decoder = RadianceDecoder(
            self.store, "dec/", feature_dim=d, hidden=config.decoder_hidden,
            disentangled=config.disentangled, use_viewdir=config.use_viewdir,
            rng=rng)
        self.geometry = GeometryNet(self.store, "geo/", rng=rng)
        self.texture = TextureNet(self.store, "tex/", rng=rng, feature_dim=d)
        self.upsampler = UpsamplerNet(self.store, "ups/", rng=rng, feature_dim=d)
        self.disc = DiscriminatorNet(self.store, "disc/", rng=rng)

    def render_config(self, **kw) -> RenderConfig:
        kw.setdefault("use_viewdir", self.config.use_viewdir)
        return RenderConfig(**kw)

    def embed(self, cloud: PointCloud, origin: np.ndarray, tape: Tape | None = None):
        """(vertex grid, embeddings Var, layout); honors the encoder toggle."""
        vs = self.config.voxel_size
        if tape is None:
            tape = Tape()
        layout = prepare_encoding(cloud, vs, origin)
        if self.config.use_encoder:
            emb = run_encoder(tape, self.store, layout)
        else:
            emb = tape.constant(layout.vertex_colors)
        grid = SparseFeatureGrid(layout.vertices.coords, vs, origin,
                                 features=emb.value, kind="vertex")
        return grid, emb, layout

    def snapshot(self, phase: int, step: int) -> Checkpoint:
        return Checkpoint(self.store.state_dict(), phase, step, self.config)

    def restore(self, ckpt: Checkpoint):
        if ckpt.config != self.config:
            raise ValueError("checkpoint was produced by a different config")
        self.store.load_state(ckpt.tensors)

    @classmethod
    def from_checkpoint(cls, path) -> "Model":
        ckpt = Checkpoint.load(path)
        model = cls(ckpt.config, seed=0)
        model.restore(ckpt)
        return model


def phase_param_names(model: Model, phase: int,
                      unfreeze_renderer: bool = False) -> list:
    groups = {1: ["enc/", "dec/"], 2: ["geo/"], 3: ["tex/"],
              4: ["ups/", "disc/"]}[phase]
    if phase == 4 and unfreeze_renderer:
        groups.append("dec/")
    names = []
    for g in groups:
        names.extend(model.store.names(g))
    return names


# -- data preparation ------------------------------------------------------------


def downsample_rgbd(frame: RgbdFrame):
    """Half-resolution targets: 2x2 mean RGB, first-valid depth per block.

    Depth blocks scan top-left, top-right, bottom-left, bottom-right and
    keep the first positive sample; all-invalid blocks stay at 0.
    """
    h, w = frame.depth.shape
    if h % 2 or w % 2:
        raise ValueError("frame dimensions must be even")
    rgb = frame.rgb.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
    d = frame.depth
    out = np.zeros((h // 2, w // 2))
    for block in (d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2]):
        out = np.where(out > 0, out, block)
    return rgb, out


@dataclass(frozen=True)
class SceneSample:
    """One training scene: posed views plus their fused cloud."""

    frames: tuple
    cloud: PointCloud
    origin: np.ndarray


def build_scene_sample(frames, voxel_size: float) -> SceneSample:
    cloud = fuse_frames(frames)
    if len(cloud) == 0:
        raise ValueError("fused cloud is empty")
    return SceneSample(tuple(frames), cloud,
                       grid_origin(cloud.positions, voxel_size))


def make_geometry_pair(scene, source_frames, voxel_size: float,
                       gt_fn=None) -> tuple:
    """(sources-only occupancy, full occupancy) on a shared lattice.

    gt_fn defaults to the procedural scene's analytic shell occupancy.
    """
    from .scenes import gt_occupancy
    cloud = fuse_frames(source_frames)
    if len(cloud) == 0:
        raise ValueError("fused source cloud is empty")
    origin = grid_origin(cloud.positions, voxel_size)
    observed = voxelize(cloud, voxel_size, origin)
    observed = SparseVoxelSet(observed.coords, voxel_size, origin)
    gt = (gt_fn or gt_occupancy)(scene, voxel_size, origin)
    return observed, gt.union(observed)


def make_inpaint_sample(model: Model, source_frames, all_frames) -> InpaintSample:
    """Pair partial-cloud embeddings with full-cloud targets, shared lattice."""
    vs = model.config.voxel_size
    full_cloud = fuse_frames(all_frames)
    if len(full_cloud) == 0:
        raise ValueError("fused cloud is empty")
    origin = grid_origin(full_cloud.positions, vs)
    src_cloud = fuse_frames(source_frames)
    if len(src_cloud) == 0:
        raise ValueError("fused source cloud is empty")
    grid_src, _, _ = model.embed(src_cloud, origin)
    _, emb_full, layout_full = model.embed(full_cloud, origin)
    vertices = layout_full.vertices
    padded = pad_features(grid_src, vertices)
    plans = model.texture.plan(vertices)
    return InpaintSample(vertices, padded, emb_full.value, plans)


# -- training --------------------------------------------------------------------


def _expect_phase(cfg: PhaseConfig, phase: int):
    if cfg.phase != phase:
        raise ValueError(f"config is for phase {cfg.phase}, not {phase}")


def _log(log, step: int, phase: int, terms: dict):
    if log is not None:
        cells = [str(step), str(phase)]
        cells += [f"{k}={v:.8g}" for k, v in terms.items()]
        log.write("\t".join(cells) + "\n")


def train_phase1(model: Model, scenes, cfg: PhaseConfig, seed: int = 0,
                 on_step=None, log=None,
                 render_cfg: RenderConfig | None = None) -> Checkpoint:
    """Fit encoder and decoders by ray reconstruction on complete scenes."""
    _expect_phase(cfg, 1)
    if not scenes:
        raise ValueError("no training scenes")
    store = model.store
    names = phase_param_names(model, 1)
    rcfg = render_cfg or model.render_config()
    rng = np.random.default_rng(seed)
    vs = model.config.voxel_size

    prep = []
    for sc in scenes:
        layout = prepare_encoding(sc.cloud, vs, sc.origin)
        views = []
        for fr in sc.frames:
            eye, dirs, zf = pixel_ray_grid(fr.intrinsics.halved(), fr.pose)
            rgb_t, d_t = downsample_rgbd(fr)
            views.append((eye, dirs.reshape(-1, 3), zf.reshape(-1),
                          rgb_t.reshape(-1, 3), d_t.reshape(-1)))
        prep.append((sc, layout, views))

    done = 0
    for step in range(cfg.steps):
        sc, layout, views = prep[step % len(prep)]
        eye, dirs, zf, rgb_t, d_t = views[int(rng.integers(len(views)))]
        valid = np.nonzero(d_t > 0)[0]
        if len(valid) == 0:
            warnings.warn(f"phase 1 step {step}: view has no valid depth; skipped")
            done = step + 1
            continue
        k = min(cfg.rays_per_step, len(valid))
        pick = rng.choice(valid, size=k, replace=False)
        origins = np.broadcast_to(eye, (k, 3))
        hits = intersect_voxels(layout.occupied, origins, dirs[pick])
        hit = np.zeros(k, dtype=bool)
        hit[hits.ray_index] = True
        if not hit.any():
            warnings.warn(f"phase 1 step {step}: no rays intersect; batch skipped")
            done = step + 1
            continue
        sel = pick[hit]

        tape = Tape()
        if model.config.use_encoder:
            emb = run_encoder(tape, store, layout)
        else:
            emb = tape.constant(layout.vertex_colors)
        grid = SparseFeatureGrid(layout.vertices.coords, vs, sc.origin,
                                 features=emb.value, kind="vertex")
        out = render_rays(grid, layout.occupied,
                          np.broadcast_to(eye, (len(sel), 3)), dirs[sel],
                          model.decoder, rcfg, tape=tape, features=emb,
                          want_feature=False)
        rgb_term = ad.square(out["rgb"] - tape.constant(rgb_t[sel])).sum() \
            / float(len(sel))
        zhat = out["depth_t"] * tape.constant(zf[sel])
        depth_term = ad.absolute(zhat - tape.constant(d_t[sel])).mean()
        loss = rgb_term * cfg.lambda_rgb + depth_term * cfg.lambda_depth
        ad.adam_step(store, ad.backward(loss), lr=cfg.lr, names=names)

        terms = {"rgb": float(rgb_term.value),
                 "depth": float(depth_term.value),
                 "total": float(loss.value)}
        _log(log, step, 1, terms)
        done = step + 1
        if on_step is not None and on_step(step, terms):
            break
    return model.snapshot(1, done)


def train_phase2(model: Model, pairs, cfg: PhaseConfig, seed: int = 0,
                 on_step=None, log=None) -> Checkpoint:
    """Fit the geometry net on (partial, full) occupancy pairs."""
    _expect_phase(cfg, 2)
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no occupancy pairs")
    names = phase_param_names(model, 2)
    done = 0
    for step in range(cfg.steps):
        observed, gt = pairs[step % len(pairs)]
        tape = Tape()
        result = model.geometry.complete(observed, tape=tape, guide=gt)
        level_losses = geometry_level_losses(result, gt)
        loss = level_losses[0]
        for term in level_losses[1:]:
            loss = loss + term
        ad.adam_step(model.store, ad.backward(loss), lr=cfg.lr, names=names)
        terms = {"total": float(loss.value),
                 "finest": float(level_losses[-1].value)}
        _log(log, step, 2, terms)
        done = step + 1
        if on_step is not None and on_step(step, terms):
            break
    return model.snapshot(2, done)


def train_phase3(model: Model, samples, cfg: PhaseConfig, seed: int = 0,
                 on_step=None, log=None) -> Checkpoint:
    """Fit the inpainting net to reproduce full-cloud embeddings."""
    _expect_phase(cfg, 3)
    samples = list(samples)
    if not samples:
        raise ValueError("no inpainting samples")
    names = phase_param_names(model, 3)
    done = 0
    for step in range(cfg.steps):
        s = samples[step % len(samples)]
        tape = Tape()
        pred = inpaint_texture(model.texture, tape, s.plans, s.padded)
        loss = texture_loss(pred, s.target, s.padded.mask)
        ad.adam_step(model.store, ad.backward(loss), lr=cfg.lr, names=names)
        terms = {"l1": float(loss.value)}
        _log(log, step, 3, terms)
        done = step + 1
        if on_step is not None and on_step(step, terms):
            break
    return model.snapshot(3, done)


@dataclass
class _TripletPrep:
    rep: "SceneRepr"
    frame: RgbdFrame
    rgb_half: np.ndarray
    depth_half: np.ndarray
    coarse_input: np.ndarray | None  # (hw, 3+d), frozen-renderer cache
    coarse_terms: tuple | None       # (rgb, depth) floats when frozen


def train_phase4(model: Model, triplets, cfg: PhaseConfig, seed: int = 0,
                 on_step=None, log=None,
                 render_cfg: RenderConfig | None = None) -> Checkpoint:
    """Adversarial refinement on triplets; 3D stages stay frozen.

    With unfreeze_renderer the decoder MLPs join the generator update and
    the coarse reconstruction terms become live; otherwise the coarse
    render is cached per triplet and only the 2D nets move.
    """
    _expect_phase(cfg, 4)
    triplets = list(triplets)
    if not triplets:
        raise ValueError("no triplets")
    store = model.store
    gen_names = phase_param_names(model, 4, cfg.unfreeze_renderer)
    disc_names = [n for n in gen_names if n.startswith("disc/")]
    gen_names = [n for n in gen_names if not n.startswith("disc/")]
    rcfg = render_cfg or model.render_config()

    prep = []
    for t in triplets:
        rep = build_representation(model, t.sources)
        eye, dirs, _ = pixel_ray_grid(t.q.intrinsics.halved(), t.q.pose)
        dirs = dirs.reshape(-1, 3)
        hits = intersect_voxels(rep.voxels, np.broadcast_to(eye, dirs.shape), dirs)
        if len(hits.ray_index) == 0:
            warnings.warn("phase 4: query view sees no completed voxel; "
                          "triplet skipped")
            continue
        rgb_half, depth_half = downsample_rgbd(t.q)
        coarse_input = coarse_terms = None
        if not cfg.unfreeze_renderer:
            coarse = render_view(rep.grid, rep.voxels, t.q.intrinsics,
                                 t.q.pose, model.decoder, rcfg)
            coarse_input = np.concatenate(
                [coarse.rgb.reshape(-1, 3),
                 coarse.feature.reshape(-1, model.config.feature_dim)], axis=1)
            coarse_terms = _coarse_recon_np(coarse, rgb_half, depth_half)
        prep.append(_TripletPrep(rep, t.q, rgb_half, depth_half,
                                 coarse_input, coarse_terms))
    if not prep:
        raise ValueError("every triplet was degenerate")

    done = 0
    for step in range(cfg.steps):
        p = prep[step % len(prep)]
        h2, w2 = p.rgb_half.shape[:2]
        tape = Tape()
        if cfg.unfreeze_renderer:
            out = render_view(p.rep.grid, p.rep.voxels, p.frame.intrinsics,
                              p.frame.pose, model.decoder, rcfg, tape=tape)
            rgb_v, feat_v = out["rgb"], out["feature"]
            rgb_term = ad.square(
                rgb_v - tape.constant(p.rgb_half.reshape(-1, 3))).sum() \
                / float(h2 * w2)
            dvalid = p.depth_half.reshape(-1) > 0
            zhat = out["depth_t"] * tape.constant(out["z_factor"])
            resid = zhat[dvalid] - tape.constant(p.depth_half.reshape(-1)[dvalid])
            depth_term = ad.absolute(resid).mean() if dvalid.any() \
                else tape.constant(np.zeros(()))
            x = ad.concat([rgb_v, feat_v], axis=1)
            g_extra = rgb_term * cfg.lambda_rgb + depth_term * cfg.lambda_depth
            rgb_val, depth_val = float(rgb_term.value), float(depth_term.value)
        else:
            x = tape.constant(p.coarse_input)
            g_extra = None
            rgb_val, depth_val = p.coarse_terms

        fake = model.upsampler.forward(tape, x, (h2, w2))
        from .refine2d import gan_losses
        loss_d, loss_g = gan_losses(tape, model.disc, p.frame.rgb, fake,
                                    (2 * h2, 2 * w2))
        g_total = loss_g * cfg.lambda_gan
        if g_extra is not None:
            g_total = g_total + g_extra
        d_grads = ad.backward(loss_d)
        g_grads = ad.backward(g_total)
        ad.adam_step(store, d_grads, lr=cfg.lr, names=disc_names)
        ad.adam_step(store, g_grads, lr=cfg.lr, names=gen_names)

        total = (cfg.lambda_rgb * rgb_val + cfg.lambda_depth * depth_val
                 + cfg.lambda_gan * float(loss_g.value))
        terms = {"rgb": rgb_val, "depth": depth_val,
                 "gan_g": float(loss_g.value), "gan_d": float(loss_d.value),
                 "total": total}
        _log(log, step, 4, terms)
        done = step + 1
        if on_step is not None and on_step(step, terms):
            break
    return model.snapshot(4, done)


def _coarse_recon_np(coarse: FeatureImage, rgb_half: np.ndarray,
                     depth_half: np.ndarray) -> tuple:
    n = rgb_half.shape[0] * rgb_half.shape[1]
    rgb = float(((coarse.rgb - rgb_half) ** 2).sum() / n)
    dvalid = depth_half > 0
    depth = float(np.abs(coarse.depth[dvalid] - depth_half[dvalid]).mean()) \
        if dvalid.any() else 0.0
    return rgb, depth


# -- inference -------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRepr:
    """Completed, inpainted 3D state shared by every render of a scene."""

    voxels: SparseVoxelSet     # completed occupancy
    vertices: SparseVoxelSet
    grid: SparseFeatureGrid    # inpainted vertex embeddings
    observed: SparseVoxelSet
    origin: np.ndarray


def build_representation(model: Model, frames) -> SceneRepr:
    """Fuse, embed, complete, and inpaint once for a set of source views."""
    vs = model.config.voxel_size
    cloud = fuse_frames(frames)
    if len(cloud) == 0:
        raise ValueError("fused cloud is empty")
    origin = grid_origin(cloud.positions, vs)
    grid, _, layout = model.embed(cloud, origin)
    completed = complete_geometry(model.geometry, layout.occupied)
    vertices = vertex_set(completed)
    padded = pad_features(grid, vertices)
    plans = model.texture.plan(vertices)
    pred = inpaint_texture(model.texture, Tape(), plans, padded)
    full_grid = SparseFeatureGrid(vertices.coords, vs, origin,
                                  features=pred.value, kind="vertex")
    return SceneRepr(completed, vertices, full_grid, layout.occupied, origin)


def _bilinear_rgb(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    tape = Tape()
    out = bilinear_upsample(tape, tape.constant(img.reshape(-1, 3)), h, w)
    return out.value.reshape(2 * h, 2 * w, 3)


def _finish(model: Model, coarse: FeatureImage) -> np.ndarray:
    if model.config.refine:
        return upsample(coarse, model.upsampler)
    return _bilinear_rgb(coarse.rgb)


def infer(model: Model, sources, query_pose: Pose,
          render_cfg: RenderConfig | None = None):
    """(full-res rgb, coarse render, completed voxels) for one query pose."""
    sources = list(sources)
    if not sources:
        raise ValueError("need at least one source view")
    rep = build_representation(model, sources)
    rcfg = render_cfg or model.render_config()
    coarse = render_view(rep.grid, rep.voxels, sources[0].intrinsics,
                         query_pose, model.decoder, rcfg)
    return _finish(model, coarse), coarse, rep.voxels


def render_trajectory(model: Model, sources, poses,
                      render_cfg: RenderConfig | None = None) -> list:
    """Render an ordered pose list against one shared 3D representation."""
    poses = list(poses)
    if len(poses) < 2:
        raise ValueError("a trajectory needs at least two poses")
    sources = list(sources)
    rep = build_representation(model, sources)
    rcfg = render_cfg or model.render_config()
    frames = []
    for pose in poses:
        coarse = render_view(rep.grid, rep.voxels, sources[0].intrinsics,
                             pose, model.decoder, rcfg)
        frames.append(_finish(model, coarse))
    return frames


def interpolate_poses(a: Pose, b: Pose, count: int) -> list:
    """count poses from a to b: lerped translation, slerped rotation.

    The endpoints are returned as-is so they match the inputs exactly.
    """
    if count < 2:
        raise ValueError("need at least the two endpoint poses")
    slerp = Slerp([0.0, 1.0],
                  Rotation.from_matrix(np.stack([a.rotation, b.rotation])))
    out = []
    for t in np.linspace(0.0, 1.0, count):
        if t == 0.0:
            out.append(a)
        elif t == 1.0:
            out.append(b)
        else:
            rot = slerp(t).as_matrix()
            out.append(Pose(rot, (1.0 - t) * a.translation + t * b.translation))
    return out
