"""Image and depth quality metrics with full-frame and region variants.

SSIM has a single implementation: mask-weighted window statistics under
an 11x11 Gaussian window (sigma 1.5, k1 0.01, k2 0.03, dynamic range 1).
The full-frame value is just the all-ones mask.  Region evaluation crops
to the mask's bounding box (grown to hold at least one window), weights
every window's moments by the mask so off-region pixels never enter the
statistics, and averages the windows that carry any mask mass.

PSNR caps at a 99 dB sentinel so perfect reconstructions keep aggregates
finite.  The depth threshold metric counts pixels whose ratio in either
direction stays under 1.25; non-positive depths on either side fail the
pixel.  An empty region reports absent values (None), never zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03

METRIC_COLUMNS = ("psnr", "ssim", "depth_rmse", "delta125")


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth dims differ")
    return pred, gt


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over [0,1] images, capped at 99."""
    pred, gt = _check_pair(pred, gt)
    err = (pred - gt) ** 2
    if mask is not None:
        if mask.shape != pred.shape[:2]:
            raise ValueError("mask dims differ from image dims")
        if not np.any(mask):
            raise ValueError("empty mask")
        err = err[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(err))
    if mse == 0.0:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g2 = np.outer(g, g)
    return g2 / g2.sum()


def _mask_bbox(mask: np.ndarray, shape) -> tuple:
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1

    def grow(lo, hi, n):
        while hi - lo < WINDOW:
            if lo > 0:
                lo -= 1
            elif hi < n:
                hi += 1
            else:
                raise ValueError(f"image too small for an {WINDOW}x{WINDOW} window")
        return lo, hi

    y0, y1 = grow(y0, y1, shape[0])
    x0, x1 = grow(x0, x1, shape[1])
    return y0, y1, x0, x1


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mask-weighted structural similarity; mask=None means the full frame."""
    pred, gt = _check_pair(pred, gt)
    h, w = pred.shape[:2]
    if mask is None:
        mask = np.ones((h, w))
    else:
        if mask.shape != (h, w):
            raise ValueError("mask dims differ from image dims")
        if not np.any(mask):
            raise ValueError("empty mask")
    if h < WINDOW or w < WINDOW:
        raise ValueError(f"image too small for an {WINDOW}x{WINDOW} window")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]

    y0, y1, x0, x1 = _mask_bbox(mask, (h, w))
    m = np.asarray(mask, dtype=np.float64)[y0:y1, x0:x1]
    g = gaussian_window()
    c1, c2 = K1 ** 2, K2 ** 2

    mass = correlate2d(m, g, mode="valid")
    keep = mass > 1e-12
    if not np.any(keep):
        raise ValueError("mask carries no window mass")
    channel_vals = []
    for c in range(pred.shape[2]):
        x = pred[y0:y1, x0:x1, c]
        y = gt[y0:y1, x0:x1, c]

        def wmean(a):
            return correlate2d(m * a, g, mode="valid")[keep] / mass[keep]

        mx, my = wmean(x), wmean(y)
        sxx = wmean(x * x) - mx ** 2
        syy = wmean(y * y) - my ** 2
        sxy = wmean(x * y) - mx * my
        val = (((2 * mx * my + c1) * (2 * sxy + c2))
               / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)))
        channel_vals.append(val.mean())
    return float(np.mean(channel_vals))


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  valid: np.ndarray) -> tuple:
    """(RMSE meters, fraction with two-sided ratio < 1.25) over valid pixels."""
    pred, gt = _check_pair(pred, gt)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != pred.shape:
        raise ValueError("mask dims differ from depth dims")
    if not np.any(valid):
        raise ValueError("empty mask")
    dp, dg = pred[valid], gt[valid]
    rmse = float(np.sqrt(np.mean((dp - dg) ** 2)))
    pos = (dp > 0) & (dg > 0)
    ratio = np.full(dp.shape, np.inf)
    ratio[pos] = np.maximum(dp[pos] / dg[pos], dg[pos] / dp[pos])
    return rmse, float(np.mean(ratio < 1.25))


@dataclass
class EvalReport:
    """Per-image metric rows plus their mean, full frame and region split."""

    names: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # dict: column -> float | None

    def add(self, name: str, row: dict):
        self.names.append(name)
        self.rows.append(dict(row))

    def columns(self) -> list:
        cols = []
        for scope in ("full", "masked"):
            for metric in METRIC_COLUMNS:
                cols.append(f"{scope}_{metric}")
        return cols

    def aggregate(self) -> dict:
        out = {}
        for col in self.columns():
            vals = [r[col] for r in self.rows
                    if r.get(col) is not None and np.isfinite(r[col])]
            out[col] = float(np.mean(vals)) if vals else None
        return out

    def to_tsv(self) -> str:
        cols = self.columns()
        lines = ["\t".join(["image"] + cols)]

        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        for name, row in zip(self.names, self.rows):
            lines.append("\t".join([name] + [fmt(row.get(c)) for c in cols]))
        agg = self.aggregate()
        lines.append("\t".join(["mean"] + [fmt(agg[c]) for c in cols]))
        return "\n".join(lines) + "\n"


def masked_eval(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                pred_depth: np.ndarray | None = None,
                gt_depth: np.ndarray | None = None,
                depth_valid: np.ndarray | None = None) -> dict:
    """One report row: every metric over the full frame and over the mask.

    An empty mask leaves the masked column absent (None), not zero.
    """
    pred, gt = _check_pair(pred, gt)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError("mask dims differ from image dims")
    row = {
        "full_psnr": psnr(pred, gt),
        "full_ssim": ssim(pred, gt),
        "full_depth_rmse": None,
        "full_delta125": None,
        "masked_psnr": None,
        "masked_ssim": None,
        "masked_depth_rmse": None,
        "masked_delta125": None,
    }
    have_depth = pred_depth is not None and gt_depth is not None
    if have_depth:
        if depth_valid is None:
            depth_valid = np.ones(pred.shape[:2], dtype=bool)
        rmse, delta = depth_metrics(pred_depth, gt_depth, depth_valid)
        row["full_depth_rmse"] = rmse
        row["full_delta125"] = delta
    if np.any(mask):
        row["masked_psnr"] = psnr(pred, gt, mask)
        row["masked_ssim"] = ssim(pred, gt, mask)
        if have_depth and np.any(depth_valid & mask):
            rmse, delta = depth_metrics(pred_depth, gt_depth,
                                        depth_valid & mask)
            row["masked_depth_rmse"] = rmse
            row["masked_delta125"] = delta
    return row
