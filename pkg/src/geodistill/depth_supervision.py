"""Depth training signals for a categorical depth head.

Two losses, both returning analytic gradients with respect to the
raw logits:

* a dense binary cross-entropy against one-hot binned ground truth, and
* a relative-depth loss that anchors each foreground target at a
  reference pixel and penalizes errors in depth differences, so only
  the target's internal depth structure is supervised.

Reference selection is non-differentiable: the chosen index is frozen
during the backward pass while the reference pixel's depth still
carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, SkippedTargetError
from .geometry import ForegroundDepthSet
from .numerics import LossResult, as_tensor, check_finite

BCE_CLAMP = 1e-7

REFERENCE_STRATEGIES = (
    "all_to_adaptive_smallest_error",
    "all_to_adaptive_highest_conf",
    "all_to_certain_3d_center",
    "all_to_certain_2d_center",
    "one_to_one",
)

LOSS_REDUCTIONS = ("mean", "sum")


@dataclass
class DepthBins:
    """Discretization of the depth range into ``count`` ordered bins.

    ``uniform`` places centers at equal-width cell midpoints;
    ``spacing_increasing`` does the same in log-depth, so bin width
    grows with distance.  Centers are strictly increasing and lie
    inside [d_min, d_max].
    """

    count: int
    mode: str = "uniform"
    d_min: float = 1.0
    d_max: float = 60.0
    centers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.count < 2:
            raise ContractError("need at least 2 depth bins")
        if not (0.0 < self.d_min < self.d_max):
            raise ContractError("require 0 < d_min < d_max")
        if self.mode not in ("uniform", "spacing_increasing"):
            raise ConfigError(f"unknown bin mode {self.mode!r}")
        if self.centers is None:
            half_steps = np.arange(self.count) + 0.5
            if self.mode == "uniform":
                width = (self.d_max - self.d_min) / self.count
                self.centers = self.d_min + half_steps * width
            else:
                log_width = np.log(self.d_max / self.d_min) / self.count
                self.centers = self.d_min * np.exp(half_steps * log_width)
        self.centers = as_tensor(self.centers)
        if self.centers.shape != (self.count,):
            raise ContractError("centers length must equal the bin count")
        if np.any(np.diff(self.centers) <= 0):
            raise ContractError("bin centers must be strictly increasing")
        if self.centers[0] < self.d_min or self.centers[-1] > self.d_max:
            raise ContractError("bin centers must lie within [d_min, d_max]")


@dataclass
class CategoricalDepthMap:
    """Per-pixel logits over depth bins; probabilities derived on demand."""

    logits: np.ndarray
    _probs: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.logits = as_tensor(self.logits)
        if self.logits.ndim != 3:
            raise ContractError(f"logits must be (D, H, W), got shape {self.logits.shape}")
        check_finite(self.logits, "logits")

    @property
    def num_bins(self) -> int:
        return self.logits.shape[0]

    @property
    def probs(self) -> np.ndarray:
        if self._probs is None:
            z = self.logits - np.max(self.logits, axis=0, keepdims=True)
            e = np.exp(z)
            self._probs = e / np.sum(e, axis=0, keepdims=True)
        return self._probs


@dataclass
class ReferenceSelection:
    """How the anchor pixel of each target is chosen.

    ``signed_reference_error`` switches the smallest-error strategy from
    argmin of |gt - pred| to argmin of the signed difference gt - pred.
    """

    strategy: str = "all_to_adaptive_smallest_error"
    signed_reference_error: bool = False

    def __post_init__(self):
        if self.strategy not in REFERENCE_STRATEGIES:
            raise ConfigError(f"unknown reference strategy {self.strategy!r}")


def _softmax_block(logit_block: np.ndarray) -> np.ndarray:
    z = logit_block - np.max(logit_block, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _expected_depth(prob_block: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum(prob_block * centers, axis=-1)


def continuous_depth(probs, bins: DepthBins) -> float:
    """Expectation of the bin centers under one pixel's distribution."""
    probs = as_tensor(probs).reshape(-1)
    if probs.shape != bins.centers.shape:
        raise ContractError("probs length must equal the bin count")
    total = float(np.sum(probs))
    if abs(total - 1.0) > 1e-9:
        raise ContractError(f"probs sum to {total!r}, expected 1 within 1e-9")
    return float(_expected_depth(probs, bins.centers))


def continuous_depth_map(depthmap: CategoricalDepthMap, bins: DepthBins) -> np.ndarray:
    """Per-pixel expected depth of a full categorical map, shape (H, W)."""
    d, h, w = depthmap.logits.shape
    if d != bins.count:
        raise ContractError("depth map bin count disagrees with bins")
    flat = depthmap.probs.reshape(d, h * w).T
    return _expected_depth(flat, bins.centers).reshape(h, w)


def select_reference(
    fds: ForegroundDepthSet,
    pred_depth,
    sel: ReferenceSelection,
    conf=None,
) -> int:
    """Pick the reference pixel of one target; returns its index into
    ``fds.pixels``.

    ``pred_depth`` holds the predicted continuous depth per set pixel,
    ``conf`` the per-pixel peak bin probability (only needed by the
    highest-confidence strategy).  Ties resolve to the first pixel in
    row-major order, which is the storage order of the set.
    """
    if fds.skipped:
        raise SkippedTargetError(f"target {fds.target_index} has fewer than 2 pixels")
    if sel.strategy == "one_to_one":
        raise ValueError("the pairwise strategy uses no reference pixel")
    pred_depth = as_tensor(pred_depth).reshape(-1)
    if pred_depth.shape[0] != len(fds):
        raise ContractError("pred_depth length must match the pixel set")

    if sel.strategy == "all_to_adaptive_smallest_error":
        err = fds.gt_depth - pred_depth
        if not sel.signed_reference_error:
            err = np.abs(err)
        return int(np.argmin(err))
    if sel.strategy == "all_to_adaptive_highest_conf":
        if conf is None:
            raise ValueError("highest-confidence selection needs per-pixel conf")
        conf = as_tensor(conf).reshape(-1)
        if conf.shape[0] != len(fds):
            raise ContractError("conf length must match the pixel set")
        return int(np.argmax(conf))
    if sel.strategy == "all_to_certain_3d_center":
        if fds.center_uv is not None:
            # pixel (x, y) covers [x, x+1) x [y, y+1); measure from its center
            cx, cy = fds.center_uv[0] - 0.5, fds.center_uv[1] - 0.5
        else:
            cx, cy = np.mean(fds.pixels[:, 0]), np.mean(fds.pixels[:, 1])
        return _nearest_pixel(fds.pixels, cx, cy)
    # all_to_certain_2d_center
    cx, cy = np.mean(fds.pixels[:, 0]), np.mean(fds.pixels[:, 1])
    return _nearest_pixel(fds.pixels, cx, cy)


def _nearest_pixel(pixels: np.ndarray, cx: float, cy: float) -> int:
    dx = pixels[:, 0] - cx
    dy = pixels[:, 1] - cy
    return int(np.argmin(dx * dx + dy * dy))


def _ref_index(fds: ForegroundDepthSet, ref: Union[int, Sequence[int]]) -> int:
    if isinstance(ref, (int, np.integer)):
        idx = int(ref)
        if not 0 <= idx < len(fds):
            raise ValueError(f"reference index {idx} outside the pixel set")
        return idx
    x, y = int(ref[0]), int(ref[1])
    hits = np.nonzero((fds.pixels[:, 0] == x) & (fds.pixels[:, 1] == y))[0]
    if hits.size == 0:
        raise ValueError(f"reference pixel ({x}, {y}) is not in the set")
    return int(hits[0])


def relative_depths(
    fds: ForegroundDepthSet, pred_depth, ref
) -> Tuple[np.ndarray, np.ndarray]:
    """Depths of one target re-expressed relative to the reference pixel.

    ``ref`` may be an index into the set or an (x, y) pixel pair.  Both
    returned channels are exactly 0 at the reference pixel.
    """
    idx = _ref_index(fds, ref)
    pred_depth = as_tensor(pred_depth).reshape(-1)
    if pred_depth.shape[0] != len(fds):
        raise ContractError("pred_depth length must match the pixel set")
    return pred_depth - pred_depth[idx], fds.gt_depth - fds.gt_depth[idx]


def _anchored_residual_core(
    d: np.ndarray, gt: np.ndarray, ref: int, reduction: str
) -> Tuple[float, np.ndarray]:
    """Loss and d-gradient of the anchored squared-residual objective.

    The reference index is a constant of the backward pass; d[ref]
    still receives gradient through every residual it appears in.
    """
    e = (d - d[ref]) - (gt - gt[ref])
    denom = float(e.size) if reduction == "mean" else 1.0
    value = float(np.sum(e * e)) / denom
    grad_d = 2.0 * e / denom
    grad_d[ref] -= 2.0 * float(np.sum(e)) / denom
    return value, grad_d


def _pairwise_residual_core(
    d: np.ndarray, gt: np.ndarray, reduction: str
) -> Tuple[float, np.ndarray]:
    """Loss and d-gradient over all ordered pixel pairs (p, q), p != q."""
    e_mat = (d[:, None] - d[None, :]) - (gt[:, None] - gt[None, :])
    n = d.size
    denom = float(n * (n - 1)) if reduction == "mean" else 1.0
    value = float(np.sum(e_mat * e_mat)) / denom
    grad_d = 4.0 * np.sum(e_mat, axis=1) / denom
    return value, grad_d


def _depth_grad_to_logits(
    grad_d: np.ndarray, probs: np.ndarray, depths: np.ndarray, centers: np.ndarray
) -> np.ndarray:
    """Chain a per-pixel depth gradient through softmax expectation."""
    return probs * (grad_d[:, None] * (centers[None, :] - depths[:, None]))


def inner_depth_loss(
    targets: List[ForegroundDepthSet],
    depthmap: CategoricalDepthMap,
    bins: DepthBins,
    sel: ReferenceSelection,
    loss_reduction: str = "mean",
) -> LossResult:
    """Relative-depth loss over all non-skipped targets.

    Per target, predicted continuous depths and ground truth are both
    anchored at the selected reference pixel (or compared over all
    ordered pairs for the pairwise strategy) and squared residuals are
    reduced per ``loss_reduction``, then summed over targets.  The
    gradient is with respect to the full logits tensor; overlapping
    targets accumulate.
    """
    if loss_reduction not in LOSS_REDUCTIONS:
        raise ConfigError(f"unknown loss reduction {loss_reduction!r}")
    if bins.count != depthmap.num_bins:
        raise ContractError("depth map bin count disagrees with bins")
    d, h, w = depthmap.logits.shape
    grad_hw = np.zeros((h * w, d))
    total = 0.0
    used = 0
    centers = bins.centers
    logits_hw = np.moveaxis(depthmap.logits, 0, -1).reshape(h * w, d)
    for fds in targets:
        if fds.skipped:
            continue
        flat = fds.pixels[:, 1] * w + fds.pixels[:, 0]
        block = logits_hw[flat]
        probs = _softmax_block(block)
        depths = _expected_depth(probs, centers)
        if sel.strategy == "one_to_one":
            value, grad_d = _pairwise_residual_core(depths, fds.gt_depth, loss_reduction)
        else:
            conf = np.max(probs, axis=1)
            ref = select_reference(fds, depths, sel, conf=conf)
            value, grad_d = _anchored_residual_core(depths, fds.gt_depth, ref, loss_reduction)
        np.add.at(grad_hw, flat, _depth_grad_to_logits(grad_d, probs, depths, centers))
        total += value
        used += 1
    grad = np.moveaxis(grad_hw.reshape(h, w, d), -1, 0)
    if used == 0:
        return LossResult(0.0, np.zeros_like(depthmap.logits), empty=True)
    return LossResult(total, grad, components={"targets_used": float(used)})


def assign_depth_bins(gt_values, bins: DepthBins) -> np.ndarray:
    """Indices of the nearest bin center; exact midpoints go to the lower bin."""
    gt_values = as_tensor(gt_values)
    midpoints = (bins.centers[:-1] + bins.centers[1:]) / 2.0
    return np.searchsorted(midpoints, gt_values, side="left")


def _bce_block(
    logit_block: np.ndarray, bin_idx: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Summed one-hot BCE of gathered pixels plus its logit gradient."""
    return _bce_from_probs(_softmax_block(logit_block), bin_idx)


def _bce_from_probs(
    probs: np.ndarray, bin_idx: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Summed one-hot BCE from softmax probabilities; gradient is w.r.t.
    the underlying logits.

    Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP]; clamped
    entries pass no gradient, matching the piecewise-constant clip.
    """
    n, d = probs.shape
    clamped = np.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    target = np.zeros((n, d))
    target[np.arange(n), bin_idx] = 1.0
    value = float(np.sum(-(target * np.log(clamped) + (1.0 - target) * np.log1p(-clamped))))
    grad_p = (-target / clamped + (1.0 - target) / (1.0 - clamped))
    grad_p *= (probs > BCE_CLAMP) & (probs < 1.0 - BCE_CLAMP)
    inner = np.sum(grad_p * probs, axis=1, keepdims=True)
    grad_block = probs * (grad_p - inner)
    return value, grad_block


def absolute_depth_loss(
    depthmap: CategoricalDepthMap,
    gt,
    valid,
    bins: DepthBins,
) -> LossResult:
    """Dense per-pixel BCE between the categorical map and binned ground
    truth, averaged over valid pixels; gradient w.r.t. the logits."""
    if bins.count != depthmap.num_bins:
        raise ContractError("depth map bin count disagrees with bins")
    d, h, w = depthmap.logits.shape
    gt = as_tensor(gt)
    valid = np.asarray(valid, dtype=bool)
    if gt.shape != (h, w) or valid.shape != (h, w):
        raise ContractError("gt and valid must both be (H, W)")
    flat = np.nonzero(valid.reshape(-1))[0]
    if flat.size == 0:
        return LossResult(0.0, np.zeros_like(depthmap.logits), empty=True)
    gt_flat = gt.reshape(-1)[flat]
    if np.any(gt_flat <= 0):
        raise ContractError("gt depth must be positive on valid pixels")
    logits_hw = np.moveaxis(depthmap.logits, 0, -1).reshape(h * w, d)
    bin_idx = assign_depth_bins(gt_flat, bins)
    value, grad_block = _bce_block(logits_hw[flat], bin_idx)
    n = float(flat.size)
    grad_hw = np.zeros((h * w, d))
    grad_hw[flat] = grad_block / n
    grad = np.moveaxis(grad_hw.reshape(h, w, d), -1, 0)
    return LossResult(value / n, grad, components={"valid_pixels": n})
