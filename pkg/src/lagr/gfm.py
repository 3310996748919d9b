"""Orbit sampling over the projective group and attention-weighted pooling.

A small MLP reads the channel-mean descriptor of a field and emits K
projective transforms. The field is warped through each of them, the K
warped copies are blended with softmax attention weights, and a 1x1
channel mixer projects the blend. Keeping the mixer channel-only is what
lets the whole block commute with group actions on the input: spatial
kernels do not commute with warps, channel mixers do.

The second half of the module is the measurement side: fixed-parameter
extractors (one orbit-averaging, one plain convolution) and the
equivariance-error harness that compares extract-then-warp against
warp-then-extract on an interior crop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffValue, concat0, grid_sample, homography_grid, inv3, softmax
from .field import DimensionError, FeatureField, conv2d, random_smooth_field
from .projective import (
    DegenerateTransform,
    ProjectiveTransform,
    canonicalize,
    conjugate,
    identity,
    pixel_frame,
    random_perturbation,
    warp_field,
)

__all__ = [
    "ConstructiveOrbitExtractor",
    "ConvBaselineExtractor",
    "EmptyOverlap",
    "GfmOutput",
    "GfmParams",
    "attention_weights",
    "ee_margin",
    "ee_sweep",
    "equivariance_error",
    "generate_transforms",
    "gfm_forward",
    "gfm_forward_diff",
    "random_smooth_field",
    "sweep_curves",
    "sweep_to_csv",
]

MASK_SOLID = 1.0 - 1e-12


class EmptyOverlap(ValueError):
    """No jointly valid pixels survive masking and the interior crop."""


# --- parameters and the forward pass -----------------------------------------


@dataclass
class GfmParams:
    """Weights for the transform generator, attention head, and projection.

    ``w2 @ relu(w1 @ mu + b1) + b2`` yields 9*K numbers per batch item,
    reshaped to K raw 3x3 matrices and scale-normalized. ``attn_w @ mu +
    attn_b`` yields the K attention logits. ``w_proj`` mixes channels of the
    blended result.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    w_proj: np.ndarray
    k: int = 4

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        self.attn_w = np.asarray(self.attn_w, dtype=np.float64)
        self.attn_b = np.asarray(self.attn_b, dtype=np.float64)
        self.w_proj = np.asarray(self.w_proj, dtype=np.float64)
        hidden, channels = self.w1.shape
        if self.b1.shape != (hidden,):
            raise DimensionError(f"b1 must be ({hidden},), got {self.b1.shape}")
        if self.w2.shape != (9 * self.k, hidden):
            raise DimensionError(
                f"w2 must be ({9 * self.k}, {hidden}), got {self.w2.shape}")
        if self.b2.shape != (9 * self.k,):
            raise DimensionError(f"b2 must be ({9 * self.k},), got {self.b2.shape}")
        if self.attn_w.shape != (self.k, channels):
            raise DimensionError(
                f"attn_w must be ({self.k}, {channels}), got {self.attn_w.shape}")
        if self.attn_b.shape != (self.k,):
            raise DimensionError(f"attn_b must be ({self.k},), got {self.attn_b.shape}")
        if self.w_proj.ndim != 2 or self.w_proj.shape[1] != channels:
            raise DimensionError(
                f"w_proj must be (out, {channels}), got {self.w_proj.shape}")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, channels: int, out_channels: int | None = None, k: int = 4,
             hidden: int = 16, rng=None) -> "GfmParams":
        """Fresh parameters that start the orbit at the identity.

        b2 stacks K identity matrices and w2 is tiny, so early transforms
        stay invertible instead of collapsing to something degenerate.
        """
        rng = np.random.default_rng(rng)
        out_channels = channels if out_channels is None else out_channels
        return cls(
            w1=rng.standard_normal((hidden, channels)) / math.sqrt(channels),
            b1=np.zeros(hidden),
            w2=rng.standard_normal((9 * k, hidden)) * 1e-3,
            b2=np.tile(np.eye(3).ravel(), k),
            attn_w=np.zeros((k, channels)),
            attn_b=np.zeros(k),
            w_proj=rng.standard_normal((out_channels, channels)) / math.sqrt(channels),
            k=k,
        )


@dataclass
class GfmOutput:
    """Blended features plus the transforms and weights that produced them."""

    features: FeatureField
    transforms: list  # per batch item: list of K ProjectiveTransforms
    attention: np.ndarray  # (B, K), rows on the simplex

    def __post_init__(self):
        a = np.asarray(self.attention, dtype=np.float64)
        if (a < 0).any() or np.abs(a.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ValueError("attention rows must be non-negative and sum to 1")
        self.attention = a


def _pooled(f: FeatureField) -> np.ndarray:
    return f.data.mean(axis=(2, 3))


def generate_transforms(f: FeatureField, params: GfmParams) -> list:
    """K transforms per batch item, from the pooled channel descriptor.

    Raises DegenerateTransform with the batch and sample index attached when
    the raw matrix cannot be normalized.
    """
    if f.channels != params.channels:
        raise DimensionError(
            f"field has {f.channels} channels, params expect {params.channels}")
    mu = _pooled(f)  # (B, C)
    z = np.maximum(mu @ params.w1.T + params.b1, 0.0)
    raw = (z @ params.w2.T + params.b2).reshape(f.batch, params.k, 3, 3)
    out = []
    for i in range(f.batch):
        row = []
        for j in range(params.k):
            try:
                row.append(canonicalize(raw[i, j]))
            except DegenerateTransform as err:
                raise DegenerateTransform(
                    f"batch item {i}, orbit sample {j}: {err}") from err
        out.append(row)
    return out


def attention_weights(mu: np.ndarray, params: GfmParams) -> np.ndarray:
    """Simplex weights softmax(attn_w @ mu + attn_b) for one batch item."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (params.channels,):
        raise DimensionError(f"mu must be ({params.channels},), got {mu.shape}")
    logits = params.attn_w @ mu + params.attn_b
    e = np.exp(logits - logits.max())
    return e / e.sum()


def gfm_forward(f: FeatureField, params: GfmParams) -> GfmOutput:
    """Warp through each generated transform, blend, project channels.

    Pixels a warp cannot reach contribute zero to the blend; downstream
    consumers that care use the transforms to rebuild validity.
    """
    transforms = generate_transforms(f, params)
    mu = _pooled(f)
    out = np.empty((f.batch, params.w_proj.shape[0], f.height, f.width))
    attn = np.empty((f.batch, params.k))
    for i in range(f.batch):
        alpha = attention_weights(mu[i], params)
        attn[i] = alpha
        item = FeatureField(f.data[i:i + 1])
        agg = np.zeros((1, f.channels, f.height, f.width))
        for j, theta in enumerate(transforms[i]):
            agg += alpha[j] * warp_field(theta, item).field.data
        out[i] = np.einsum("oc,chw->ohw", params.w_proj, agg[0])
    return GfmOutput(FeatureField(out), transforms, attn)


def gfm_forward_diff(x: DiffValue, p: dict, k: int) -> DiffValue:
    """Differentiable twin of gfm_forward for the training path.

    ``p`` maps the GfmParams field names to DiffValue leaves. Transform
    entries feed the sampling grid, so generator weights receive gradients
    through pixel positions. Returns only the blended, projected features.
    """
    b, c, h, w = x.shape
    mu_all = x.mean(axis=(2, 3))  # (B, C)
    items = []
    for i in range(b):
        mu = mu_all[i]
        z = (p["w1"] @ mu + p["b1"]).relu()
        raw = p["w2"] @ z + p["b2"]  # (9K,)
        alpha = softmax(p["attn_w"] @ mu + p["attn_b"])
        xi = x[i:i + 1]
        agg = None
        for j in range(k):
            mj = raw[9 * j:9 * (j + 1)].reshape(3, 3)
            fro = (mj * mj).sum().sqrt()
            theta = mj / (fro + 1e-8)
            grid = homography_grid(inv3(theta), h, w)
            eta = grid_sample(xi, grid)
            term = alpha[j] * eta
            agg = term if agg is None else agg + term
        flat = p["w_proj"] @ agg.reshape(c, h * w)
        items.append(flat.reshape(1, -1, h, w))
    return items[0] if b == 1 else concat0(items)


# --- fixed extractors for the equivariance harness ----------------------------


class ConstructiveOrbitExtractor:
    """Orbit average with every knob frozen: the commutation testbed.

    Transforms are fixed small perturbations of the identity (stated in a
    unit-square frame, conjugated to the pixel frame of the bound size),
    attention is uniform, and the projection is a fixed random channel
    mixer. ``conjugated(g)`` returns the partner extractor whose orbit is
    g-conjugated, which is the configuration under which warping the input
    should commute with extraction.
    """

    def __init__(self, channels: int, height: int, width: int, k: int = 4,
                 seed: int = 0, spread: float = 0.05, out_channels: int | None = None):
        if k < 1:
            raise DimensionError("k must be at least 1")
        rng = np.random.default_rng(seed)
        unit = [identity()]
        while len(unit) < k:
            unit.append(random_perturbation(spread, rng))
        self.thetas = [pixel_frame(t, height, width) for t in unit]
        self.alpha = np.full(k, 1.0 / k)
        out_channels = channels if out_channels is None else out_channels
        self.w_proj = rng.standard_normal((out_channels, channels)) / math.sqrt(channels)
        self.channels = channels
        self.height = height
        self.width = width

    def _clone(self, thetas) -> "ConstructiveOrbitExtractor":
        dup = object.__new__(ConstructiveOrbitExtractor)
        dup.thetas = list(thetas)
        dup.alpha = self.alpha
        dup.w_proj = self.w_proj
        dup.channels = self.channels
        dup.height = self.height
        dup.width = self.width
        return dup

    def conjugated(self, g: ProjectiveTransform) -> "ConstructiveOrbitExtractor":
        return self._clone(conjugate(g, t) for t in self.thetas)

    def __call__(self, f: FeatureField) -> FeatureField:
        if (f.channels, f.height, f.width) != (self.channels, self.height, self.width):
            raise DimensionError(
                f"extractor bound to ({self.channels},{self.height},{self.width}), "
                f"got ({f.channels},{f.height},{f.width})")
        agg = np.zeros_like(f.data)
        for a, theta in zip(self.alpha, self.thetas):
            agg += a * warp_field(theta, f).field.data
        return FeatureField(np.einsum("oc,bchw->bohw", self.w_proj, agg))

    def propagate_mask(self, mask: np.ndarray) -> np.ndarray:
        """Pixels of the output whose every orbit sample read valid input."""
        out = np.ones(mask.shape, dtype=bool)
        carrier = FeatureField(mask.astype(np.float64)[None, None])
        for theta in self.thetas:
            wr = warp_field(theta, carrier)
            out &= (wr.field.data[0, 0] >= MASK_SOLID) & (wr.valid_mask > 0)
        return out


class ConvBaselineExtractor:
    """Plain 3x3 convolution with a fixed random kernel, for comparison."""

    def __init__(self, channels: int, out_channels: int | None = None, seed: int = 1):
        out_channels = channels if out_channels is None else out_channels
        rng = np.random.default_rng(seed)
        self.kernel = rng.standard_normal((out_channels, channels, 3, 3))
        self.kernel /= math.sqrt(channels * 9)
        self.channels = channels

    def __call__(self, f: FeatureField) -> FeatureField:
        return conv2d(f, self.kernel)

    def propagate_mask(self, mask: np.ndarray) -> np.ndarray:
        """Erode by the kernel radius: the zero pad contaminates one ring."""
        solid = mask >= MASK_SOLID
        padded = np.pad(solid, 1, mode="constant", constant_values=False)
        out = np.ones_like(solid)
        for dv in range(3):
            for du in range(3):
                out &= padded[dv:dv + solid.shape[0], du:du + solid.shape[1]]
        return out


# --- equivariance error --------------------------------------------------------


def equivariance_error(extractor, g: ProjectiveTransform, f: FeatureField,
                       interior_margin: int, extractor_warped=None) -> float:
    """Normalized L2 gap between extract-after-warp and warp-after-extract.

    ``extractor_warped`` is what runs on the warped input; it defaults to
    ``extractor`` and is the hook for handing in the g-conjugated partner.
    Validity propagates through both routes and the comparison happens on
    the jointly valid interior crop, ``interior_margin`` pixels in from
    every border. The denominator is the extractor's response to the
    unwarped field over the same crop.
    """
    if interior_margin < 0:
        raise ValueError("interior_margin must be non-negative")
    run_warped = extractor if extractor_warped is None else extractor_warped

    warped_in = warp_field(g, f)
    left = run_warped(warped_in.field)
    left_valid = run_warped.propagate_mask(warped_in.valid_mask)

    base = extractor(f)
    base_valid = extractor.propagate_mask(np.ones((f.height, f.width)))
    warped_out = warp_field(g, base)
    carrier = FeatureField(base_valid.astype(np.float64)[None, None])
    carried = warp_field(g, carrier)
    right_valid = (carried.field.data[0, 0] >= MASK_SOLID) & (carried.valid_mask > 0)

    joint = left_valid & right_valid & (warped_out.valid_mask > 0)
    m = interior_margin
    keep = np.zeros_like(joint)
    if f.height > 2 * m and f.width > 2 * m:
        keep[m:f.height - m, m:f.width - m] = True
    joint &= keep
    if not joint.any():
        raise EmptyOverlap("no valid pixels left after masking and cropping")

    diff = (left.data - warped_out.field.data) * joint
    num = float(np.linalg.norm(diff.ravel()))
    den_region = (base_valid & keep)
    den = float(np.linalg.norm((base.data * den_region).ravel()))
    if den == 0.0:
        raise EmptyOverlap("reference response is zero on the crop")
    return num / den


def ee_margin(sigma: float, height: int, width: int) -> int:
    """Interior margin for a perturbation of size sigma, capped so an 8-pixel
    core always survives."""
    margin = math.ceil(sigma * max(height, width)) + 2
    return min(margin, (min(height, width) - 8) // 2)


def ee_sweep(sigmas, n_seeds: int, height: int = 64, width: int = 64,
             channels: int = 4, k: int = 4, base_seed: int = 0) -> list:
    """Rows (sigma, seed, ee_orbit, ee_baseline) over a perturbation grid.

    Per seed the field and the perturbation direction are fixed across
    sigmas (only the amplitude scales), so each curve is a clean function
    of sigma. Trials whose overlap empties out record NaN.
    """
    orbit = ConstructiveOrbitExtractor(channels, height, width, k=k, seed=base_seed)
    conv = ConvBaselineExtractor(channels, seed=base_seed + 1)
    rows = []
    for sigma in sigmas:
        margin = ee_margin(sigma, height, width)
        for s in range(n_seeds):
            f = random_smooth_field(np.random.default_rng((base_seed, 7, s)),
                                    1, channels, height, width)
            g = pixel_frame(
                random_perturbation(sigma, np.random.default_rng((base_seed, 11, s))),
                height, width)
            try:
                ee_o = equivariance_error(orbit, g, f, margin,
                                          extractor_warped=orbit.conjugated(g))
            except EmptyOverlap:
                ee_o = math.nan
            try:
                ee_b = equivariance_error(conv, g, f, margin)
            except EmptyOverlap:
                ee_b = math.nan
            rows.append((float(sigma), s, ee_o, ee_b))
    return rows


def sweep_curves(rows) -> dict:
    """Per-sigma means of both columns, dropping seeds where either is NaN."""
    by_sigma: dict = {}
    for sigma, _seed, ee_o, ee_b in rows:
        by_sigma.setdefault(sigma, []).append((ee_o, ee_b))
    curves = {}
    for sigma, pairs in by_sigma.items():
        kept = [(o, b) for o, b in pairs if math.isfinite(o) and math.isfinite(b)]
        if not kept:
            raise EmptyOverlap(f"every seed at sigma={sigma} was dropped")
        curves[sigma] = (sum(o for o, _ in kept) / len(kept),
                         sum(b for _, b in kept) / len(kept))
    return curves


def sweep_to_csv(rows) -> str:
    lines = ["sigma,seed,ee_gfm,ee_baseline"]
    for sigma, seed, ee_o, ee_b in rows:
        lines.append(f"{repr(float(sigma))},{seed},{repr(float(ee_o))},{repr(float(ee_b))}")
    return "\n".join(lines) + "\n"
