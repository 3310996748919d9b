"""Dense feature fields and the spatial primitives built on them.

Everything downstream moves data around as a ``FeatureField``: a rank-4
float64 array laid out (batch, channel, height, width). The four operations
here (bilinear point sampling, same-padded cross-correlation, align-corners
bilinear resize, batch normalization) are the only spatial primitives the
rest of the package is allowed to use, so their conventions are pinned down
once:

* pixel coordinates are (u, v) = (column, row); the valid domain is
  Omega = [0, W-1] x [0, H-1],
* samples outside Omega read zeros and are reported invalid,
* resize maps target index t to source position t * (S-1) / (T-1),
* all arithmetic is float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "BorderRule",
    "DimensionError",
    "FeatureField",
    "GridPoint",
    "InvariantError",
    "NormStats",
    "batch_norm",
    "bilinear_sample",
    "conv2d",
    "random_smooth_field",
    "resize_bilinear",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INTEGRAL_SNAP_TOL = 1e-12


def snap_integral(x: np.ndarray) -> np.ndarray:
    """Round coordinates that are integral up to accumulated roundoff.

    Projective position arithmetic carries a few ulps of noise, enough to
    push a boundary sample to -1e-16 and flip its in-domain test. A
    position within 1e-12 of an integer is an intended integer in every
    use this package has, so grid builders snap before any domain test or
    tap split.
    """
    x = np.asarray(x, dtype=np.float64)
    nearest = np.round(x)
    return np.where(np.abs(x - nearest) <= INTEGRAL_SNAP_TOL, nearest, x)


class DimensionError(ValueError):
    """Shapes or sizes that cannot be operated on."""


class InvariantError(ValueError):
    """A domain-type invariant was violated."""


class BorderRule(enum.Enum):
    """How samples outside Omega resolve.

    Only zero padding is defined: out-of-domain taps contribute nothing and
    the point is flagged invalid in the returned mask.
    """

    ZERO = "zero"


class GridPoint(NamedTuple):
    """A (possibly fractional) pixel location: u is the column, v the row."""

    u: float
    v: float


@dataclass(frozen=True)
class FeatureField:
    """Immutable rank-4 (B, C, H, W) float64 array.

    Construction copies nothing it does not have to, but always ends with a
    read-only float64 view so fields can be shared across threads.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"expected rank-4 (B, C, H, W) data, got rank {arr.ndim}")
        if arr.size and not np.isfinite(arr).all():
            raise InvariantError("field entries must be finite")
        if not arr.flags.owndata or arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def map(self, fn) -> "FeatureField":
        """Apply an array function and rewrap (used for pointwise maps)."""
        return FeatureField(np.asarray(fn(self.data), dtype=np.float64))


@dataclass
class NormStats:
    """Per-channel affine weights and running statistics for batch_norm.

    ``gamma``/``beta`` scale and shift, ``mu``/``var`` hold the running
    mean and (biased) variance updated in train mode. Variances must stay
    non-negative.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.var = np.asarray(self.var, dtype=np.float64).reshape(-1)
        n = self.gamma.shape[0]
        if not (self.beta.shape[0] == self.mu.shape[0] == self.var.shape[0] == n):
            raise InvariantError("norm stats must all have the channel length")
        if np.any(self.var < 0):
            raise InvariantError("running variance must be non-negative")

    @classmethod
    def identity(cls, channels: int) -> "NormStats":
        """gamma=1, beta=0, running stats (0, 1)."""
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    def copy(self) -> "NormStats":
        return NormStats(self.gamma.copy(), self.beta.copy(), self.mu.copy(), self.var.copy())


# ---------------------------------------------------------------------------
# raw kernels (shared with the autodiff layer, which needs the same forward
# arithmetic with plain arrays)
# ---------------------------------------------------------------------------

def bilinear_gather(data: np.ndarray, su: np.ndarray, sv: np.ndarray):
    """Sample ``data`` (B, C, H, W) at fractional columns su / rows sv.

    Returns ``(values, valid)`` where values has shape (B, C) + su.shape and
    valid is the boolean in-domain indicator per point. Taps that fall off
    the array contribute zero, so values decay smoothly to zero outside.
    """
    b, c, h, w = data.shape
    su = np.asarray(su, dtype=np.float64)
    sv = np.asarray(sv, dtype=np.float64)
    valid = (su >= 0.0) & (su <= w - 1.0) & (sv >= 0.0) & (sv <= h - 1.0)

    u0 = np.floor(su).astype(np.int64)
    v0 = np.floor(sv).astype(np.int64)
    fu = su - u0
    fv = sv - v0

    out = np.zeros((b, c) + su.shape, dtype=np.float64)
    for dv in (0, 1):
        for du in (0, 1):
            uu = u0 + du
            vv = v0 + dv
            wgt = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv)
            inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            uc = np.clip(uu, 0, w - 1)
            vc = np.clip(vv, 0, h - 1)
            tap = data[:, :, vc, uc]  # (B, C) + pts
            out += tap * (wgt * inside)
    return out, valid


def conv2d_raw(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation of (B,Cin,H,W) with (Cout,Cin,k,k)."""
    k = kernel.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (B, Cin, H, W, k, k); kernel: (Cout, Cin, k, k)
    return np.einsum("bcyxij,ocij->boyx", win, kernel, optimize=True)


def resize_matrix(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix R (dst x src) for the align-corners map.

    Target index t reads source position t*(src-1)/(dst-1); a single-row
    target (dst == 1) reads position 0.
    """
    r = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        r[:, 0] = 1.0
        return r
    for t in range(dst):
        pos = 0.0 if dst == 1 else t * (src - 1) / (dst - 1)
        i0 = min(int(np.floor(pos)), src - 2)
        f = pos - i0
        r[t, i0] = 1.0 - f
        r[t, i0 + 1] = f
    return r


def resize_raw(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    rh = resize_matrix(x.shape[2], target_h)
    rw = resize_matrix(x.shape[3], target_w)
    return np.einsum("ay,bcyx,dx->bcad", rh, x, rw, optimize=True)


def bn_normalize(x: np.ndarray, mean: np.ndarray, var: np.ndarray,
                 gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    cview = (1, -1, 1, 1)
    xn = (x - mean.reshape(cview)) / np.sqrt(var.reshape(cview) + BN_EPS)
    return gamma.reshape(cview) * xn + beta.reshape(cview)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def bilinear_sample(
    field: FeatureField,
    pts: Sequence[GridPoint],
    border: BorderRule = BorderRule.ZERO,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a field at a list of points.

    Parameters
    ----------
    field:
        Source field; must be non-empty.
    pts:
        Points (u=column, v=row); fractional positions interpolate the four
        surrounding pixels with tensor-product triangular weights.
    border:
        Out-of-domain policy; only ``BorderRule.ZERO`` exists.

    Returns
    -------
    values : ndarray, shape (B, C, len(pts))
    valid : ndarray of bool, shape (len(pts),)
        False exactly where the point lies outside Omega.
    """
    if field.data.size == 0:
        raise DimensionError("cannot sample an empty field")
    if border is not BorderRule.ZERO:
        raise ValueError(f"unsupported border rule: {border!r}")
    su = np.array([p.u for p in pts], dtype=np.float64)
    sv = np.array([p.v for p in pts], dtype=np.float64)
    if su.size and not (np.isfinite(su).all() and np.isfinite(sv).all()):
        raise InvariantError("sample points must be finite")
    values, valid = bilinear_gather(field.data, su, sv)
    return values, valid


def conv2d(input: FeatureField, kernel: np.ndarray, padding: str = "same") -> FeatureField:
    """Same-padded 2D cross-correlation.

    ``kernel`` has shape (C_out, C_in, k, k) with k odd; zero padding keeps
    the spatial dims. The operation is linear in both arguments.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if padding != "same":
        raise ValueError("only 'same' padding is defined")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError("kernel must be (C_out, C_in, k, k)")
    if kernel.shape[2] % 2 != 1:
        raise DimensionError("kernel size must be odd")
    if kernel.shape[1] != input.channels:
        raise DimensionError(
            f"kernel expects {kernel.shape[1]} input channels, field has {input.channels}"
        )
    return FeatureField(conv2d_raw(input.data, kernel))


def resize_bilinear(input: FeatureField, target_h: int, target_w: int) -> FeatureField:
    """Bilinear resize with the align-corners convention (corners map to corners)."""
    if target_h < 1 or target_w < 1:
        raise DimensionError("resize targets must be >= 1")
    return FeatureField(resize_raw(input.data, target_h, target_w))


def random_smooth_field(rng, batch: int, channels: int, height: int,
                        width: int, base: int = 8) -> FeatureField:
    """Band-limited random field: coarse normal noise upsampled bilinearly."""
    rng = np.random.default_rng(rng)
    coarse = rng.standard_normal((batch, channels, base, base))
    return FeatureField(resize_raw(coarse, height, width))


def batch_norm(input: FeatureField, stats: NormStats, mode: str = "eval",
               momentum: float = BN_MOMENTUM) -> FeatureField:
    """Per-channel batch normalization.

    Train mode normalizes with the batch mean and biased variance over the
    (B, H, W) axes and moves the running stats toward them by ``momentum``;
    eval mode normalizes with the running stats. Either way the output is
    ``gamma * normalized + beta``.
    """
    if stats.gamma.shape[0] != input.channels:
        raise DimensionError(
            f"stats carry {stats.gamma.shape[0]} channels, field has {input.channels}"
        )
    if np.any(stats.var < 0):
        raise InvariantError("running variance must be non-negative")
    if mode == "train":
        mean = input.data.mean(axis=(0, 2, 3))
        var = input.data.var(axis=(0, 2, 3))
        stats.mu = (1.0 - momentum) * stats.mu + momentum * mean
        stats.var = (1.0 - momentum) * stats.var + momentum * var
    elif mode == "eval":
        mean, var = stats.mu, stats.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return FeatureField(bn_normalize(input.data, mean, var, stats.gamma, stats.beta))
