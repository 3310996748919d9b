"""The four training objectives and the relative depth-error metric.

Each loss is a scalar node in the reverse-mode graph, so anything reachable
from a DiffValue input picks up gradients. Inputs may equally be plain
arrays; the result is then a constant node. The two warp-based losses share
one masking rule: a pixel contributes only where the warped lookup lands
inside the moving image, and the masked L1 is a mean over contributing
entries, which keeps magnitudes comparable across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffValue, as_diff, grid_sample
from .field import DimensionError, FeatureField, InvariantError, bilinear_gather
from .gfm import MASK_SOLID, EmptyOverlap
from .projective import ProjectiveTransform, source_grid

__all__ = [
    "LOSS_CSV_HEADER",
    "LossWeights",
    "SceneSample",
    "format_loss_row",
    "group_consistency_loss",
    "mean_rel_depth_error",
    "photometric_loss",
    "smoothness_loss",
    "total_loss",
    "transform_grid",
]

LOSS_CSV_HEADER = "step,pho,grp,sheaf,sm,total"

# Placeholder position for past-horizon lookups; any in-range test rejects it.
FAR_OUTSIDE = -1e9


@dataclass(frozen=True)
class LossWeights:
    """Scale factors for the weighted objective; defaults are the tuned set."""

    lambda_pho: float = 1.0
    lambda_grp: float = 0.5
    lambda_sheaf: float = 0.1
    lambda_sm: float = 0.01

    def __post_init__(self):
        for name in ("lambda_pho", "lambda_grp", "lambda_sheaf", "lambda_sm"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class SceneSample:
    """One reference view, its source views, and the maps between them.

    ``transforms[i]`` sends reference pixel coordinates to coordinates in
    ``sources[i]``. The mask marks the region where comparisons count.
    Ground-truth depth is optional and only consulted by the error metric.
    """

    reference: FeatureField
    sources: tuple
    transforms: tuple
    mask: np.ndarray
    depth_gt: FeatureField | None = None

    def __post_init__(self):
        if self.reference.batch != 1:
            raise DimensionError("a scene holds exactly one reference image")
        if len(self.sources) != len(self.transforms):
            raise DimensionError(
                f"{len(self.sources)} sources but {len(self.transforms)} transforms")
        shape = self.reference.data.shape
        for i, s in enumerate(self.sources):
            if s.data.shape != shape:
                raise DimensionError(f"source {i} shape {s.data.shape} != {shape}")
        mask = np.asarray(self.mask, dtype=np.float64)
        if mask.shape != (self.reference.height, self.reference.width):
            raise DimensionError(f"mask shape {mask.shape} does not match the image")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise InvariantError("mask must be binary")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.depth_gt is not None:
            dg = self.depth_gt
            if (dg.height, dg.width) != (self.reference.height, self.reference.width):
                raise DimensionError("ground-truth depth does not match the image")

    def warp_grids(self) -> tuple:
        """Dense lookup positions into each source, one (2, H, W) array each."""
        h, w = self.reference.height, self.reference.width
        return tuple(transform_grid(t, h, w) for t in self.transforms)


def transform_grid(t: ProjectiveTransform, height: int, width: int) -> np.ndarray:
    """Positions t(x) for every pixel x of an H x W domain, shape (2, H, W).

    Points whose denominator vanishes are parked at FAR_OUTSIDE so the
    in-range validity test downstream rejects them without special cases.
    """
    su, sv, finite = source_grid(t.m, height, width)
    return np.stack([np.where(finite, su, FAR_OUTSIDE),
                     np.where(finite, sv, FAR_OUTSIDE)])


def _masked_warp_l1(target, moving, grid: np.ndarray, region) -> DiffValue:
    """Mean |target - resample(moving, grid)| over valid (and region) pixels."""
    target = as_diff(target)
    moving = as_diff(moving)
    if target.value.ndim != 4 or moving.value.ndim != 4:
        raise DimensionError("warp losses operate on (B, C, H, W) fields")
    b, c, h, w = moving.value.shape
    su, sv = grid[0], grid[1]
    valid = (su >= 0.0) & (su <= w - 1.0) & (sv >= 0.0) & (sv <= h - 1.0)
    if region is not None:
        valid = valid & (np.asarray(region) > 0.0)
    count = int(valid.sum())
    if count == 0:
        raise EmptyOverlap("no valid pixels left after masking")
    warped = grid_sample(moving, DiffValue(grid))
    resid = (target - warped).abs() * valid.astype(np.float64)
    return resid.sum() / float(count * b * c)


def photometric_loss(reference, sources, warps, region=None) -> DiffValue:
    """Mean over sources of the masked L1 against the warped source.

    ``warps[i]`` holds the dense positions in ``sources[i]`` to read for
    each reference pixel (what transform_grid produces for the map
    reference -> source i).
    """
    if len(sources) == 0:
        raise ValueError("photometric loss needs at least one source view")
    if len(sources) != len(warps):
        raise DimensionError(f"{len(sources)} sources but {len(warps)} warps")
    total = None
    for src, grid in zip(sources, warps):
        term = _masked_warp_l1(reference, src, np.asarray(grid, dtype=np.float64),
                               region)
        total = term if total is None else total + term
    return total / float(len(sources))


def group_consistency_loss(d_pred, d_pred_prime, g: ProjectiveTransform,
                           prime_mask: np.ndarray | None = None) -> DiffValue:
    """Masked L1 between d_pred and d_pred_prime pulled back through g.

    The second prediction came from a g-warped input; reading it at g(x)
    re-expresses it in the first prediction's coordinates, so agreement
    means the two predictions describe one underlying map.

    ``prime_mask`` marks where d_pred_prime holds real data (for a
    prediction made from a warped input, that warp's valid region). A
    lookup whose bilinear taps would blend masked pixels is dropped, the
    same solid-carrier rule the orbit extractor uses.
    """
    d_pred = as_diff(d_pred)
    if d_pred.value.ndim != 4:
        raise DimensionError("warp losses operate on (B, C, H, W) fields")
    _b, _c, h, w = d_pred.value.shape
    grid = transform_grid(g, h, w)
    region = None
    if prime_mask is not None:
        carrier = np.asarray(prime_mask, dtype=np.float64)[None, None]
        lifted, _ = bilinear_gather(carrier, grid[0], grid[1])
        region = lifted[0, 0] >= MASK_SOLID
    return _masked_warp_l1(d_pred, d_pred_prime, grid, region)


def smoothness_loss(depth, image: np.ndarray, gamma: float = 1.0) -> DiffValue:
    """Edge-weighted first-difference penalty on a depth map.

    Forward differences along each axis, each weighted by exp(-gamma *
    |image difference|) so depth may jump where the image does. The image
    gradient is averaged over channels when several are present. Each
    axis term is a mean over its difference positions; a global constant
    added to the depth changes nothing.
    """
    depth = as_diff(depth)
    if depth.value.ndim != 2:
        raise DimensionError(f"depth must be (H, W), got {depth.value.shape}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[1:] != depth.value.shape:
        raise DimensionError(
            f"image {img.shape} does not cover depth {depth.value.shape}")
    wx = np.exp(-gamma * np.abs(img[:, :, 1:] - img[:, :, :-1]).mean(axis=0))
    wy = np.exp(-gamma * np.abs(img[:, 1:, :] - img[:, :-1, :]).mean(axis=0))
    dx = (depth[:, 1:] - depth[:, :-1]).abs()
    dy = (depth[1:, :] - depth[:-1, :]).abs()
    return (dx * wx).mean() + (dy * wy).mean()


def total_loss(components, weights: LossWeights | None = None) -> DiffValue:
    """Weighted sum of (photometric, consistency, patch-energy, smoothness)."""
    weights = LossWeights() if weights is None else weights
    if len(components) != 4:
        raise ValueError(f"expected 4 components, got {len(components)}")
    parts = [as_diff(c) for c in components]
    for p in parts:
        if not np.all(np.isfinite(p.value)):
            raise ValueError("loss components must be finite")
        if p.value.size != 1:
            raise ValueError("loss components must be scalars")
    lams = (weights.lambda_pho, weights.lambda_grp,
            weights.lambda_sheaf, weights.lambda_sm)
    out = None
    for lam, p in zip(lams, parts):
        term = lam * p
        out = term if out is None else out + term
    return out


def mean_rel_depth_error(d_pred: np.ndarray, d_gt: np.ndarray,
                         mask: np.ndarray | None = None) -> float:
    """Mean |d_pred - d_gt| / d_gt over the masked pixels."""
    d_pred = np.asarray(d_pred, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_pred.shape != d_gt.shape:
        raise DimensionError(f"shape mismatch: {d_pred.shape} vs {d_gt.shape}")
    if mask is None:
        sel = np.ones(d_pred.shape, dtype=bool)
    else:
        sel = np.broadcast_to(np.asarray(mask) > 0.0, d_pred.shape)
    if not sel.any():
        raise EmptyOverlap("mask selects no pixels")
    if np.any(d_gt[sel] <= 0.0):
        raise ValueError("ground-truth depth must be positive inside the mask")
    return float(np.mean(np.abs(d_pred[sel] - d_gt[sel]) / d_gt[sel]))


def format_loss_row(step: int, pho: float, grp: float, sheaf: float,
                    sm: float, total: float) -> str:
    vals = ",".join(repr(float(v)) for v in (pho, grp, sheaf, sm, total))
    return f"{step},{vals}"
