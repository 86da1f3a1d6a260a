"""Scene completion: occupancy growth and embedding inpainting.

Two networks live here.  The geometry net reads the observed occupancy
as constant-one features, downsamples it three times (strides 2, 4, 8),
and walks back up: at each decoder level a dilating sparse conv grows
candidate cells, a transposed conv emits their children, an occupancy
head scores every candidate, and pruning keeps the confident ones.  All
candidates are clipped to a padded bounding box of the observation so
generation cannot run away, and the observed cells are always kept at
the finest level.  During training a ground-truth guide set can be
unioned into the kept rows so deeper levels stay supervised; passing
keep_masks replays a frozen structure, which keeps the loss smooth for
finite-difference checks.

The texture net is a vertex-lattice U-Net over a fixed vertex set:
embedding plus inpaint-mask channels in, same coordinates out, with
transposed upsamplings restricted to the lattice points seen on the way
down and skip connections matched by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import GatherPlan, ParamStore, Tape, Var
from .sparsegrid import (ConvPlan, SparseFeatureGrid, SparseVoxelSet,
                         UpsamplePlan, pack_coords, plan_downsample,
                         plan_stride1, plan_upsample, rows_of)


def padded_bounds(observed: SparseVoxelSet, pad_cells: int = 4):
    """Inclusive finest-level cell range the completion may write into."""
    lo = observed.coords.min(axis=0) - pad_cells
    hi = observed.coords.max(axis=0) + pad_cells
    return lo, hi


def _clip_mask(coords: np.ndarray, lo: np.ndarray, hi: np.ndarray,
               shift: int) -> np.ndarray:
    # Arithmetic right shift floors toward -inf, matching child coverage.
    return np.all((coords >= (lo >> shift)) & (coords <= (hi >> shift)), axis=1)


def coarsen_to(gt: SparseVoxelSet, stride: int) -> SparseVoxelSet:
    """Any-child-occupied coarsening chained until the target stride."""
    out = gt
    while out.stride < stride:
        out = out.coarsened()
    if out.stride != stride:
        raise ValueError("stride must be a power-of-two multiple of gt's")
    return out


@dataclass(frozen=True)
class GeometryLevel:
    """One decoder level: candidate cells, their logits, and what survived."""

    stride: int
    coords: np.ndarray  # (M, 3) in units of `stride` finest cells
    logits: Var         # (M,)
    kept: np.ndarray    # (M,) bool


@dataclass(frozen=True)
class GeometryResult:
    levels: tuple        # GeometryLevel at strides 4, 2, 1
    completed: SparseVoxelSet

    def keep_masks(self):
        return [lvl.kept for lvl in self.levels]


class GeometryNet:
    """Occupancy completion net; parameters live under a store prefix."""

    def __init__(self, store: ParamStore, prefix: str = "geo/",
                 rng: np.random.Generator | None = None,
                 channels: tuple = (16, 32, 48)):
        self.store = store
        self.prefix = prefix
        self.channels = channels
        c1, c2, c3 = channels

        def conv(name, kv, cin, cout):
            store.add(f"{prefix}{name}/w", (kv, cin, cout), rng)
            store.add(f"{prefix}{name}/b", (cout,), init="zeros")

        conv("down1", 8, 1, c1)
        conv("down2", 8, c1, c2)
        conv("down3", 8, c2, c3)
        conv("bott1", 27, c3, c3)
        conv("bott2", 27, c3, c3)
        conv("upA", 8, c3, c2)
        conv("headA", 1, c2, 1)
        conv("dilB", 27, c2, c2)
        conv("upB", 8, c2, c1)
        conv("headB", 1, c1, 1)
        conv("dilC", 27, c1, c1)
        conv("upC", 8, c1, c1)
        conv("headC", 1, c1, 1)

    def _w(self, tape, name):
        return (tape.param(self.store, f"{self.prefix}{name}/w"),
                tape.param(self.store, f"{self.prefix}{name}/b"))

    def _head(self, tape, name, x: Var) -> Var:
        w, b = self._w(tape, name)
        return (ad.matmul(x, w.reshape(-1, 1)) + b).reshape(x.value.shape[0])

    def _dilate(self, tape, name, coords, x, lo, hi, shift):
        plan = plan_stride1(coords, dilate=True)
        keep = _clip_mask(plan.out_coords, lo, hi, shift)
        w, b = self._w(tape, name)
        return plan.out_coords[keep], ad.leaky_relu(plan.apply(x, w, b)[keep])

    def _emerge(self, tape, name, coords, x, lo, hi, shift, skip):
        """Transposed conv to the child level, clipped, plus a skip add."""
        plan = plan_upsample(coords)
        keep = _clip_mask(plan.out_coords, lo, hi, shift)
        w, b = self._w(tape, name)
        z = plan.apply(x, w, b)[keep]
        out_coords = plan.out_coords[keep]
        if skip is not None:
            sc, sx = skip
            rows = rows_of(pack_coords(sc), pack_coords(out_coords))
            z = z + ad.gather(sx, GatherPlan(rows, len(sc)))
        return out_coords, z

    def complete(self, observed: SparseVoxelSet, tape: Tape | None = None,
                 guide: SparseVoxelSet | None = None, threshold: float = 0.5,
                 pad_cells: int = 4, keep_masks=None) -> GeometryResult:
        """Grow a completed occupancy superset of the observed cells.

        guide unions ground-truth cells into the kept rows (training);
        keep_masks replays a previously sampled structure verbatim.
        """
        if len(observed) == 0:
            raise ValueError("cannot complete an empty observation")
        if observed.stride != 1:
            raise ValueError("completion expects a finest-level voxel set")
        if tape is None:
            tape = Tape()
        lo, hi = padded_bounds(observed, pad_cells)

        x = tape.constant(np.ones((len(observed), 1)))
        coords = observed.coords
        skips = {}
        for i, name in enumerate(("down1", "down2", "down3")):
            plan = plan_downsample(coords)
            w, b = self._w(tape, name)
            x = ad.leaky_relu(plan.apply(x, w, b))
            coords = plan.out_coords
            skips[2 ** (i + 1)] = (coords, x)

        coords, x = self._dilate(tape, "bott1", coords, x, lo, hi, 3)
        coords, x = self._dilate(tape, "bott2", coords, x, lo, hi, 3)

        levels = []

        def decide(stride, coords, z, idx):
            logits = self._head(tape, "head" + "ABC"[idx], z)
            if keep_masks is not None:
                kept = np.asarray(keep_masks[idx], dtype=bool)
                if kept.shape != (len(coords),):
                    raise ValueError("keep mask does not match candidate count")
                kept = kept.copy()
            else:
                kept = expit(logits.value) > threshold
                if guide is not None:
                    kept |= coarsen_to(guide, stride).contains(coords)
            levels.append(GeometryLevel(stride, coords, logits, kept))
            return kept

        coords, z = self._emerge(tape, "upA", coords, x, lo, hi, 2, skips[4])
        kept = decide(4, coords, z, 0)
        coords, x = coords[kept], ad.leaky_relu(z[kept])

        coords, x = self._dilate(tape, "dilB", coords, x, lo, hi, 2)
        coords, z = self._emerge(tape, "upB", coords, x, lo, hi, 1, skips[2])
        kept = decide(2, coords, z, 1)
        coords, x = coords[kept], ad.leaky_relu(z[kept])

        coords, x = self._dilate(tape, "dilC", coords, x, lo, hi, 1)
        coords, z = self._emerge(tape, "upC", coords, x, lo, hi, 0, None)
        kept = decide(1, coords, z, 2)

        cells = SparseVoxelSet(coords[kept], observed.voxel_size,
                               observed.origin)
        return GeometryResult(tuple(levels), cells.union(observed))


def complete_geometry(net: GeometryNet, observed: SparseVoxelSet,
                      threshold: float = 0.5,
                      pad_cells: int = 4) -> SparseVoxelSet:
    """Inference-mode completion: just the finished occupancy set."""
    return net.complete(observed, threshold=threshold,
                        pad_cells=pad_cells).completed


def geometry_level_losses(result: GeometryResult, gt: SparseVoxelSet) -> tuple:
    """Mean binary cross entropy per level, coarsest first.

    Targets come from any-child coarsening of the ground truth; every
    level must carry at least one candidate cell.
    """
    terms = []
    for lvl in result.levels:
        if len(lvl.coords) == 0:
            raise ValueError(f"no candidate cells at stride {lvl.stride}")
        labels = coarsen_to(gt, lvl.stride).contains(lvl.coords).astype(
            np.float64)
        x = lvl.logits
        # Stable BCE from logits: y*softplus(-x) + (1-y)*softplus(x).
        bce = labels * ad.softplus(-x) + (1.0 - labels) * ad.softplus(x)
        terms.append(bce.mean())
    return tuple(terms)


def geometry_loss(result: GeometryResult, gt: SparseVoxelSet) -> Var:
    """Equal-weight sum of the per-level cross entropies."""
    total = None
    for term in geometry_level_losses(result, gt):
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class InpaintInput:
    """Embeddings aligned to the completed vertex set, plus the new-row mask."""

    features: np.ndarray  # (M, d), zeros on unobserved rows
    mask: np.ndarray      # (M,) float, 0 = observed, 1 = newly generated


def pad_features(observed: SparseFeatureGrid,
                 completed_vertices: SparseVoxelSet) -> InpaintInput:
    """Scatter observed vertex embeddings into the completed vertex set."""
    if len(observed) == 0:
        raise ValueError("no observed vertices to pad from")
    rows = rows_of(completed_vertices.keys, pack_coords(observed.coords))
    if np.any(rows < 0):
        raise ValueError("observed vertex missing from completed set")
    m = len(completed_vertices)
    features = np.zeros((m, observed.channels))
    features[rows] = observed.features
    mask = np.ones(m)
    mask[rows] = 0.0
    return InpaintInput(features, mask)


@dataclass(frozen=True)
class TexturePlans:
    """Lattice plans for one fixed vertex set; rebuild when the set changes."""

    n_vertices: int
    conv0: ConvPlan
    down1: ConvPlan
    conv1: ConvPlan
    down2: ConvPlan
    conv2: ConvPlan
    up1_plan: UpsamplePlan
    up1_rows: np.ndarray   # child rows landing on the stride-2 lattice
    conv3: ConvPlan
    up0_plan: UpsamplePlan
    up0_rows: np.ndarray
    conv4: ConvPlan


class TextureNet:
    """Embedding inpainting U-Net over a fixed vertex lattice."""

    def __init__(self, store: ParamStore, prefix: str = "tex/",
                 rng: np.random.Generator | None = None,
                 feature_dim: int = 32,
                 channels: tuple = (32, 48, 64)):
        self.store = store
        self.prefix = prefix
        self.feature_dim = feature_dim
        c0, c1, c2 = channels

        def conv(name, kv, cin, cout):
            store.add(f"{prefix}{name}/w", (kv, cin, cout), rng)
            store.add(f"{prefix}{name}/b", (cout,), init="zeros")

        conv("stem", 27, feature_dim + 1, c0)
        conv("down1", 8, c0, c1)
        conv("conv1", 27, c1, c1)
        conv("down2", 8, c1, c2)
        conv("conv2", 27, c2, c2)
        conv("up1", 8, c2, c1)
        conv("conv3", 27, c1, c1)
        conv("up0", 8, c1, c0)
        conv("conv4", 27, c0, c0)
        store.add(f"{prefix}out/w", (c0, feature_dim), rng)
        store.add(f"{prefix}out/b", (feature_dim,), init="zeros")

    def plan(self, vertices: SparseVoxelSet) -> TexturePlans:
        """Precompute every lattice plan for this vertex set."""
        conv0 = plan_stride1(vertices.coords, dilate=False)
        down1 = plan_downsample(vertices.coords)
        conv1 = plan_stride1(down1.out_coords, dilate=False)
        down2 = plan_downsample(down1.out_coords)
        conv2 = plan_stride1(down2.out_coords, dilate=False)

        def restrict(up_plan, target_coords):
            # Every target is a child of its own parent, so all rows exist.
            rows = rows_of(pack_coords(up_plan.out_coords),
                           pack_coords(target_coords))
            if np.any(rows < 0):
                raise AssertionError("upsampling lost a lattice vertex")
            return rows

        up1 = plan_upsample(down2.out_coords)
        up0 = plan_upsample(down1.out_coords)
        return TexturePlans(
            n_vertices=len(vertices), conv0=conv0, down1=down1, conv1=conv1,
            down2=down2, conv2=conv2, up1_plan=up1,
            up1_rows=restrict(up1, down1.out_coords), conv3=conv1,
            up0_plan=up0, up0_rows=restrict(up0, vertices.coords),
            conv4=conv0)

    def _w(self, tape, name):
        return (tape.param(self.store, f"{self.prefix}{name}/w"),
                tape.param(self.store, f"{self.prefix}{name}/b"))

    def forward(self, tape: Tape, plans: TexturePlans, features: Var) -> Var:
        """features is (M, d+1): embeddings with the mask channel appended."""
        w, b = self._w(tape, "stem")
        s0 = ad.leaky_relu(plans.conv0.apply(features, w, b))

        w, b = self._w(tape, "down1")
        x = ad.leaky_relu(plans.down1.apply(s0, w, b))
        w, b = self._w(tape, "conv1")
        s1 = ad.leaky_relu(plans.conv1.apply(x, w, b))

        w, b = self._w(tape, "down2")
        x = ad.leaky_relu(plans.down2.apply(s1, w, b))
        w, b = self._w(tape, "conv2")
        x = ad.leaky_relu(plans.conv2.apply(x, w, b))

        w, b = self._w(tape, "up1")
        grown = plans.up1_plan.apply(x, w, b)
        x = ad.gather(grown, GatherPlan(plans.up1_rows,
                                        grown.value.shape[0])) + s1
        w, b = self._w(tape, "conv3")
        x = ad.leaky_relu(plans.conv3.apply(ad.leaky_relu(x), w, b))

        w, b = self._w(tape, "up0")
        grown = plans.up0_plan.apply(x, w, b)
        x = ad.gather(grown, GatherPlan(plans.up0_rows,
                                        grown.value.shape[0])) + s0
        w, b = self._w(tape, "conv4")
        x = ad.leaky_relu(plans.conv4.apply(ad.leaky_relu(x), w, b))

        w, b = self._w(tape, "out")
        return ad.matmul(x, w) + b


def inpaint_texture(net: TextureNet, tape: Tape, plans: TexturePlans,
                    padded: InpaintInput) -> Var:
    """Fill new-vertex embeddings; observed rows pass through untouched."""
    if plans.n_vertices != padded.features.shape[0]:
        raise ValueError("plans were built for a different vertex set")
    f0 = tape.constant(padded.features)
    mask_col = padded.mask[:, None]
    inp = ad.concat([f0, tape.constant(mask_col)], axis=1)
    pred = net.forward(tape, plans, inp)
    return pred * mask_col + f0 * (1.0 - mask_col)


def texture_loss(pred: Var, target: np.ndarray, mask: np.ndarray) -> Var:
    """Mean over masked rows of the per-row L1 embedding distance."""
    weights = (np.asarray(mask) > 0).astype(np.float64)
    if not np.any(weights):
        return pred.sum() * 0.0
    row_l1 = ad.absolute(pred - target).sum(axis=1)
    return (row_l1 * weights).sum() / weights.sum()


@dataclass(frozen=True)
class InpaintSample:
    """One training sample: padded inputs, target embeddings, cached plans."""

    vertices: SparseVoxelSet
    padded: InpaintInput
    target: np.ndarray  # (M, d) embeddings of the fully observed scene
    plans: TexturePlans
