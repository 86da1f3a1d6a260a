"""2D refinement: a doubling upsampler and a patch discriminator.

The upsampler runs three 3x3 convs on the (3+d)-channel coarse render,
doubles resolution with nearest-neighbor copying, runs two more convs,
and adds the 3-channel result onto a bilinear upsample of the coarse
RGB.  The final conv initializes to zero, so a fresh net reproduces the
bilinear upsample exactly; outputs clamp to [0, 1] with no sigmoid.

The discriminator is a fully convolutional stack of kernel-4 layers
(strides 2, 2, 2, 1, 1) emitting a patch-logit map with a receptive
field of about 70 px.  The two stride-1 layers pad by 2 so the map
never collapses to zero size on small training crops.  Losses follow
the hinge formulation; the fake branch of the discriminator loss is
detached.

Images pass through convolutions as (rows, channels) matrices with a
per-shape gather plan; index -1 in a plan is an implicit zero row, which
doubles as zero padding.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GatherPlan, ParamStore, Tape, Var
from .core import FeatureImage


def conv_image_plan(h: int, w: int, kernel: int, stride: int,
                    pad: int) -> tuple:
    """Gather plan for an im2col convolution over an (h, w) image."""
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("convolution output would be empty")
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    ky, kx = np.meshgrid(np.arange(kernel), np.arange(kernel), indexing="ij")
    ry = (stride * oy[:, :, None, None] + ky[None, None] - pad)
    rx = (stride * ox[:, :, None, None] + kx[None, None] - pad)
    inside = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
    idx = np.where(inside, ry * w + rx, -1).reshape(oh * ow, kernel * kernel)
    return oh, ow, GatherPlan(idx, h * w)


def nearest_plan(h: int, w: int) -> GatherPlan:
    """Row map for 2x nearest-neighbor upsampling."""
    oy, ox = np.meshgrid(np.arange(2 * h), np.arange(2 * w), indexing="ij")
    return GatherPlan(((oy // 2) * w + ox // 2).reshape(-1), h * w)


def bilinear_plan(h: int, w: int):
    """Rows and weights for 2x bilinear upsampling, half-pixel centers."""

    def axis(n):
        c = np.clip(np.arange(2 * n) / 2.0 - 0.25, 0.0, n - 1.0)
        i0 = np.floor(c).astype(np.int64)
        f = c - i0
        return i0, np.minimum(i0 + 1, n - 1), f

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    rows = np.stack([
        (y0[:, None] * w + x0[None, :]),
        (y0[:, None] * w + x1[None, :]),
        (y1[:, None] * w + x0[None, :]),
        (y1[:, None] * w + x1[None, :]),
    ], axis=-1).reshape(-1, 4)
    wy = np.stack([1 - fy, fy], axis=-1)
    wx = np.stack([1 - fx, fx], axis=-1)
    weights = np.stack([
        wy[:, None, 0] * wx[None, :, 0],
        wy[:, None, 0] * wx[None, :, 1],
        wy[:, None, 1] * wx[None, :, 0],
        wy[:, None, 1] * wx[None, :, 1],
    ], axis=-1).reshape(-1, 4)
    return GatherPlan(rows, h * w), weights


def bilinear_upsample(tape: Tape, x: Var, h: int, w: int) -> Var:
    plan, weights = bilinear_plan(h, w)
    return (ad.gather(x, plan) * weights[:, :, None]).sum(axis=1)


def _conv(tape, store, prefix, name, x, plan):
    w = tape.param(store, f"{prefix}{name}/w")
    b = tape.param(store, f"{prefix}{name}/b")
    kv, cin, cout = w.value.shape
    m = plan.idx.shape[0]
    patches = ad.gather(x, plan).reshape(m, kv * cin)
    return ad.matmul(patches, w.reshape(kv * cin, cout)) + b


class UpsamplerNet:
    """Resolution doubler; parameters live under a store prefix."""

    def __init__(self, store: ParamStore, prefix: str = "ups/",
                 rng: np.random.Generator | None = None,
                 feature_dim: int = 32, hidden: int = 32):
        self.store = store
        self.prefix = prefix
        self.feature_dim = feature_dim
        cin = 3 + feature_dim

        def conv(name, c_in, c_out, init="xavier"):
            store.add(f"{prefix}{name}/w", (9, c_in, c_out), rng, init=init)
            store.add(f"{prefix}{name}/b", (c_out,), init="zeros")

        conv("c1", cin, hidden)
        conv("c2", hidden, hidden)
        conv("c3", hidden, hidden)
        conv("c4", hidden, hidden)
        # Zero residual at init: a fresh net is exactly the bilinear upsample.
        conv("c5", hidden, 3, init="zeros")
        self._plans = {}

    def _plan(self, h, w):
        key = (h, w)
        if key not in self._plans:
            _, _, coarse = conv_image_plan(h, w, 3, 1, 1)
            _, _, full = conv_image_plan(2 * h, 2 * w, 3, 1, 1)
            self._plans[key] = (coarse, full, nearest_plan(h, w))
        return self._plans[key]

    def forward(self, tape: Tape, x: Var, shape: tuple) -> Var:
        """x is (h*w, 3+d) with RGB in the first three columns."""
        h, w = shape
        if x.value.shape != (h * w, 3 + self.feature_dim):
            raise ValueError("upsampler input has the wrong channel count")
        coarse, full, nn = self._plan(h, w)
        t = ad.leaky_relu(_conv(tape, self.store, self.prefix, "c1", x, coarse))
        t = ad.leaky_relu(_conv(tape, self.store, self.prefix, "c2", t, coarse))
        t = ad.leaky_relu(_conv(tape, self.store, self.prefix, "c3", t, coarse))
        t = ad.gather(t, nn)
        t = ad.leaky_relu(_conv(tape, self.store, self.prefix, "c4", t, full))
        residual = _conv(tape, self.store, self.prefix, "c5", t, full)
        base = bilinear_upsample(tape, x[:, :3], h, w)
        return ad.clip(base + residual, 0.0, 1.0)


def upsample(coarse: FeatureImage, net: UpsamplerNet) -> np.ndarray:
    """Double the coarse render's resolution; returns (2h, 2w, 3) RGB."""
    h, w = coarse.rgb.shape[:2]
    stacked = np.concatenate([coarse.rgb, coarse.feature], axis=2)
    tape = Tape()
    out = net.forward(tape, tape.constant(stacked.reshape(h * w, -1)), (h, w))
    return out.value.reshape(2 * h, 2 * w, 3)


class DiscriminatorNet:
    """Patch critic over RGB images; returns a flat logit map."""

    LAYERS = ((3, 16, 2, 1), (16, 32, 2, 1), (32, 64, 2, 1),
              (64, 64, 1, 2), (64, 1, 1, 2))

    def __init__(self, store: ParamStore, prefix: str = "disc/",
                 rng: np.random.Generator | None = None):
        self.store = store
        self.prefix = prefix
        for i, (cin, cout, _, _) in enumerate(self.LAYERS, start=1):
            store.add(f"{prefix}c{i}/w", (16, cin, cout), rng)
            store.add(f"{prefix}c{i}/b", (cout,), init="zeros")
        self._plans = {}

    def _plan(self, h, w):
        key = (h, w)
        if key not in self._plans:
            plans = []
            ch, cw = h, w
            for _, _, stride, pad in self.LAYERS:
                ch, cw, plan = conv_image_plan(ch, cw, 4, stride, pad)
                plans.append(plan)
            self._plans[key] = plans
        return self._plans[key]

    def forward(self, tape: Tape, x: Var, shape: tuple) -> Var:
        h, w = shape
        if x.value.shape != (h * w, 3):
            raise ValueError("discriminator expects (h*w, 3) RGB rows")
        plans = self._plan(h, w)
        for i, plan in enumerate(plans, start=1):
            x = _conv(tape, self.store, self.prefix, f"c{i}", x, plan)
            if i < len(plans):
                x = ad.leaky_relu(x)
        return x.reshape(x.value.shape[0])


def gan_losses(tape: Tape, disc: DiscriminatorNet, real: np.ndarray,
               fake: Var, shape: tuple) -> tuple:
    """Hinge losses: (critic loss, generator loss).

    The critic's fake branch is detached, so loss_d trains only the
    discriminator and loss_g reaches the generator through fake.
    """
    h, w = shape
    if real.shape != (h, w, 3):
        raise ValueError("real and fake images must share dimensions")
    d_real = disc.forward(tape, tape.constant(real.reshape(-1, 3)), shape)
    d_fake_det = disc.forward(tape, tape.constant(fake.value), shape)
    loss_d = ad.relu(1.0 - d_real).mean() + ad.relu(1.0 + d_fake_det).mean()
    loss_g = disc.forward(tape, fake, shape).mean() * -1.0
    return loss_d, loss_g
