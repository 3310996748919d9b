"""Graded convolution over a scale pyramid.

The output channels of one shared kernel are partitioned into D+1 contiguous
blocks, one per degree. Producing the degree-d output walks every split
d = l + (d - l): the pyramid level at degree d - l is convolved with the
kernel restricted to block l, the result is resized to level d's dims, and
the terms are summed before batch norm and ReLU. Zeroing a block therefore
removes exactly one degree from every sum it appears in, which is what the
provenance tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import DiffValue, conv2d as conv2d_diff, resize_bilinear as resize_diff
from .field import (
    BN_EPS,
    DimensionError,
    FeatureField,
    NormStats,
    batch_norm,
    conv2d,
    resize_bilinear,
)
from .formats import lagt1_bytes, parse_lagt1

__all__ = [
    "GradedKernelBank",
    "ScalePyramid",
    "bn_train_diff",
    "build_masks",
    "load_bank",
    "project_to_degree",
    "rcl_degree",
    "rcl_degree_presum",
    "rcl_fuse",
    "save_bank",
]


def build_masks(c_out: int, d_max: int) -> np.ndarray:
    """(D+1, C_out) binary masks: contiguous blocks of s = C_out // (D+1)
    channels, the last block absorbing the remainder."""
    if d_max < 0:
        raise DimensionError("maximum degree must be non-negative")
    if c_out < d_max + 1:
        raise DimensionError(
            f"{c_out} output channels cannot host {d_max + 1} degree blocks")
    s = c_out // (d_max + 1)
    masks = np.zeros((d_max + 1, c_out))
    for ell in range(d_max + 1):
        hi = (ell + 1) * s if ell < d_max else c_out
        masks[ell, ell * s:hi] = 1.0
    return masks


@dataclass
class ScalePyramid:
    """Fields indexed by degree, spatial dims halving per step."""

    levels: list

    def __post_init__(self):
        if not self.levels:
            raise DimensionError("a pyramid needs at least one level")
        h0, w0 = self.levels[0].height, self.levels[0].width
        for d, f in enumerate(self.levels):
            if not isinstance(f, FeatureField):
                raise DimensionError(f"level {d} is not a FeatureField")
            want = (max(h0 >> d, 1), max(w0 >> d, 1))
            if (f.height, f.width) != want:
                raise DimensionError(
                    f"level {d} has dims {(f.height, f.width)}, expected {want}")
            if f.height < 1 or f.width < 1:
                raise DimensionError(f"level {d} has no spatial extent")

    @property
    def depth(self) -> int:
        return len(self.levels) - 1


@dataclass
class GradedKernelBank:
    """Shared kernel, degree masks, per-degree norm state, fuse weights.

    ``adapter`` is the degree-shared 1x1 channel map applied to every
    pyramid level before convolution; None means the levels already carry
    C_in channels.
    """

    w: np.ndarray
    d_max: int
    fuse_weights: np.ndarray
    adapter: np.ndarray | None = None
    norms: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 4:
            raise DimensionError(f"kernel must be rank 4, got rank {self.w.ndim}")
        c_out = self.w.shape[0]
        self.masks = build_masks(c_out, self.d_max)
        self.fuse_weights = np.asarray(self.fuse_weights, dtype=np.float64)
        if self.fuse_weights.shape != (self.d_max + 1,):
            raise DimensionError(
                f"need {self.d_max + 1} fuse weights, got {self.fuse_weights.shape}")
        if self.adapter is not None:
            self.adapter = np.asarray(self.adapter, dtype=np.float64)
            if self.adapter.ndim != 2 or self.adapter.shape[0] != self.w.shape[1]:
                raise DimensionError(
                    f"adapter must be ({self.w.shape[1]}, source channels), "
                    f"got {self.adapter.shape}")
        if not self.norms:
            self.norms = [NormStats.identity(c_out) for _ in range(self.d_max + 1)]
        if len(self.norms) != self.d_max + 1:
            raise DimensionError(
                f"need {self.d_max + 1} norm states, got {len(self.norms)}")

    @property
    def c_out(self) -> int:
        return self.w.shape[0]

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w.shape[2]

    def masked_kernel(self, ell: int) -> np.ndarray:
        return self.w * self.masks[ell][:, None, None, None]

    @classmethod
    def init(cls, c_in: int, c_out: int, kernel_size: int, d_max: int,
             source_channels: int | None = None, rng=None) -> "GradedKernelBank":
        rng = np.random.default_rng(rng)
        w = rng.standard_normal((c_out, c_in, kernel_size, kernel_size))
        w /= np.sqrt(c_in * kernel_size * kernel_size)
        adapter = None
        if source_channels is not None and source_channels != c_in:
            adapter = rng.standard_normal((c_in, source_channels)) / np.sqrt(source_channels)
        return cls(w, d_max, np.full(d_max + 1, 1.0 / (d_max + 1)), adapter)


def project_to_degree(pyramid: ScalePyramid, source_degree: int,
                      bank: GradedKernelBank) -> FeatureField:
    """The pyramid level at ``source_degree`` mapped to the bank's C_in."""
    if not 0 <= source_degree <= pyramid.depth:
        raise DimensionError(
            f"degree {source_degree} outside pyramid range 0..{pyramid.depth}")
    level = pyramid.levels[source_degree]
    if bank.adapter is None:
        if level.channels != bank.c_in:
            raise DimensionError(
                f"level has {level.channels} channels, kernel expects {bank.c_in} "
                "and the bank carries no adapter")
        return level
    if level.channels != bank.adapter.shape[1]:
        raise DimensionError(
            f"level has {level.channels} channels, adapter expects "
            f"{bank.adapter.shape[1]}")
    return FeatureField(np.einsum("oc,bchw->bohw", bank.adapter, level.data))


def rcl_degree_presum(pyramid: ScalePyramid, bank: GradedKernelBank,
                      d: int) -> FeatureField:
    """The graded sum for degree d, before normalization and activation.

    Term l convolves the degree-(d-l) projection with kernel block l and
    resizes to level d's dims, so every term satisfies l + (d-l) = d.
    """
    if not 0 <= d <= bank.d_max:
        raise DimensionError(f"degree {d} outside bank range 0..{bank.d_max}")
    if d > pyramid.depth:
        raise DimensionError(f"pyramid has no level {d}")
    target = pyramid.levels[d]
    acc = None
    for ell in range(d + 1):
        src = project_to_degree(pyramid, d - ell, bank)
        term = conv2d(src, bank.masked_kernel(ell))
        term = resize_bilinear(term, target.height, target.width)
        acc = term.data if acc is None else acc + term.data
    return FeatureField(acc)


def rcl_degree(pyramid: ScalePyramid, bank: GradedKernelBank, d: int,
               training: bool = False) -> FeatureField:
    pre = rcl_degree_presum(pyramid, bank, d)
    normed = batch_norm(pre, bank.norms[d], mode="train" if training else "eval")
    return normed.map(lambda x: np.maximum(x, 0.0))


def rcl_fuse(degree_outputs: list, bank: GradedKernelBank, target_h: int,
             target_w: int) -> FeatureField:
    """Weighted sum of all degree outputs resized to a common resolution."""
    if len(degree_outputs) != bank.d_max + 1:
        raise DimensionError(
            f"need {bank.d_max + 1} degree outputs, got {len(degree_outputs)}")
    acc = None
    for weight, out in zip(bank.fuse_weights, degree_outputs):
        up = resize_bilinear(out, target_h, target_w)
        term = weight * up.data
        acc = term if acc is None else acc + term
    return FeatureField(acc)


# --- differentiable twin ------------------------------------------------------


def bn_train_diff(x: DiffValue, gamma: DiffValue, beta: DiffValue) -> DiffValue:
    """Train-mode batch norm on (B,C,H,W): batch stats, biased variance."""
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = (var + BN_EPS) ** -0.5
    return gamma.reshape(1, -1, 1, 1) * (centered * inv) + beta.reshape(1, -1, 1, 1)


def rcl_degree_diff(levels: list, bank_shape: GradedKernelBank, p: dict,
                    d: int) -> DiffValue:
    """Differentiable degree-d forward. ``levels`` are DiffValues matching a
    pyramid; ``p`` holds leaves "w", optionally "adapter", and per-degree
    "gamma{d}", "beta{d}". Masks and dims come from ``bank_shape``."""
    target_h, target_w = levels[d].shape[2], levels[d].shape[3]
    acc = None
    for ell in range(d + 1):
        src = levels[d - ell]
        if "adapter" in p:
            kernel = p["adapter"].reshape(*p["adapter"].shape, 1, 1)
            src = conv2d_diff(src, kernel)
        mask = bank_shape.masks[ell][:, None, None, None]
        term = conv2d_diff(src, p["w"] * mask)
        term = resize_diff(term, target_h, target_w)
        acc = term if acc is None else acc + term
    normed = bn_train_diff(acc, p[f"gamma{d}"], p[f"beta{d}"])
    return normed.relu()


# --- serialization -------------------------------------------------------------


def save_bank(path, bank: GradedKernelBank) -> None:
    """Kernel in the binary tensor container, scalars in a sidecar header."""
    import pathlib

    path = pathlib.Path(path)
    path.write_bytes(lagt1_bytes(bank.w))
    fuse = " ".join(repr(float(v)) for v in bank.fuse_weights)
    lines = [
        f"c_out {bank.c_out}",
        f"c_in {bank.c_in}",
        f"kernel_size {bank.kernel_size}",
        f"d_max {bank.d_max}",
        f"fuse_weights {fuse}",
    ]
    path.with_suffix(path.suffix + ".meta").write_text("\n".join(lines) + "\n")


def load_bank(path) -> GradedKernelBank:
    import pathlib

    path = pathlib.Path(path)
    w = parse_lagt1(path.read_bytes())
    meta = {}
    for line in path.with_suffix(path.suffix + ".meta").read_text().splitlines():
        key, _, rest = line.partition(" ")
        meta[key] = rest
    want = (int(meta["c_out"]), int(meta["c_in"]),
            int(meta["kernel_size"]), int(meta["kernel_size"]))
    if w.shape != want:
        raise DimensionError(f"stored kernel is {w.shape}, header says {want}")
    fuse = np.array([float(v) for v in meta["fuse_weights"].split()])
    return GradedKernelBank(w, int(meta["d_max"]), fuse)
