"""Point-cloud encoder: fused RGB-D points to vertex embeddings.

The cloud is voxelized, each lattice vertex starts from the mean color of
the points inside its up-to-8 incident voxels, and a stack of sparse
residual blocks over the vertex lattice turns those colors into d-channel
embeddings.  The output lattice is exactly vertex_set(voxelize(cloud)),
so downstream consumers can rely on row alignment with that set.

All convolutions are kernel-3 submanifold, so one gather plan serves the
whole stack; prepare_encoding builds it once per lattice and run_encoder
replays it against the current parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Var
from .core import PointCloud
from .sparsegrid import (OFFSETS2, ConvPlan, SparseFeatureGrid, SparseVoxelSet,
                         pack_coords, plan_stride1, rows_of, vertex_set,
                         voxelize_stats)

CHANNELS = 32
BLOCKS = 4


def register_encoder_params(store: ParamStore, rng: np.random.Generator,
                            prefix: str = "enc/", channels: int = CHANNELS,
                            blocks: int = BLOCKS):
    """Add the lift, residual-block, and output tensors to the store."""
    store.add(f"{prefix}lift/w", (3, channels), rng)
    store.add(f"{prefix}lift/b", (channels,), init="zeros")
    for i in range(blocks):
        for conv in ("c1", "c2"):
            store.add(f"{prefix}block{i}/{conv}/w", (27, channels, channels), rng)
            store.add(f"{prefix}block{i}/{conv}/b", (channels,), init="zeros")
    store.add(f"{prefix}out/w", (channels, channels), rng)
    store.add(f"{prefix}out/b", (channels,), init="zeros")


@dataclass(frozen=True)
class EncodingLayout:
    """Frozen geometry of one cloud: lattice, inputs, and the conv plan."""

    occupied: SparseVoxelSet
    vertices: SparseVoxelSet
    vertex_colors: np.ndarray  # (V, 3) incident-point mean color, zero if none
    conv_plan: ConvPlan


def prepare_encoding(cloud: PointCloud, voxel_size: float,
                     origin: np.ndarray) -> EncodingLayout:
    """Voxelize a cloud and precompute everything the encoder reuses."""
    if len(cloud.positions) == 0:
        raise ValueError("cannot encode an empty cloud")
    coords, colors, counts = voxelize_stats(cloud, voxel_size, origin)
    occupied = SparseVoxelSet(coords, voxel_size, origin)
    vertices = vertex_set(occupied)

    # pool point colors onto corners: each occupied voxel hands its color sum
    # to all 8 corner vertices, then every vertex normalizes by point count
    corner = (coords[:, None, :] + OFFSETS2[None, :, :]).reshape(-1, 3)
    rows = rows_of(vertices.keys, pack_coords(corner))
    weight = np.repeat(counts.astype(np.float64), 8)
    vsum = np.zeros((len(vertices), 3))
    np.add.at(vsum, rows, colors.repeat(8, axis=0) * weight[:, None])
    vcount = np.zeros(len(vertices))
    np.add.at(vcount, rows, weight)
    vertex_colors = vsum / vcount[:, None]

    return EncodingLayout(occupied, vertices, vertex_colors,
                          plan_stride1(vertices.coords, dilate=False))


def run_encoder(tape: Tape, store: ParamStore, layout: EncodingLayout,
                prefix: str = "enc/", blocks: int = BLOCKS) -> Var:
    """Differentiable forward pass; returns (V, d) embeddings as a Var."""
    p = lambda name: tape.param(store, f"{prefix}{name}")
    x = ad.matmul(tape.constant(layout.vertex_colors), p("lift/w")) + p("lift/b")
    for i in range(blocks):
        h = layout.conv_plan.apply(x, p(f"block{i}/c1/w"), p(f"block{i}/c1/b"))
        h = layout.conv_plan.apply(ad.leaky_relu(h), p(f"block{i}/c2/w"),
                                   p(f"block{i}/c2/b"))
        x = x + h
    return ad.matmul(x, p("out/w")) + p("out/b")


def encode(store: ParamStore, cloud: PointCloud, voxel_size: float,
           origin: np.ndarray, tape: Tape | None = None,
           prefix: str = "enc/"):
    """Full encode: returns (vertex feature grid, embeddings Var, layout)."""
    layout = prepare_encoding(cloud, voxel_size, origin)
    if tape is None:
        tape = Tape()
    emb = run_encoder(tape, store, layout, prefix)
    grid = SparseFeatureGrid(layout.vertices.coords, voxel_size,
                             np.asarray(origin, dtype=np.float64),
                             features=emb.value, kind="vertex")
    return grid, emb, layout
