"""Frequency-domain measurement tools.

Everything here serves one question: how much high-frequency content
survives when shifted copies of a field are fused. The pieces are a 2D
DFT with a slow reference path, log power spectra averaged over integer
radius rings, interpolation kernels built to carry a prescribed mass and
centroid, a log-log fit of the kernel's phase error order, and a fusion
benchmark that pits a moment-matched correction against plain addition
of misaligned copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import DimensionError, InvariantError

__all__ = [
    "DIRECT_DFT_LIMIT",
    "ExactSpectralMatch",
    "FusionTrial",
    "KernelMoments",
    "LPSD_EPS",
    "MOMENT_TOL",
    "PARSEVAL_TOL",
    "RadialProfile",
    "SLOPE_OMEGA_HI",
    "SLOPE_OMEGA_LO",
    "Spectrum",
    "ZeroVarianceError",
    "aas",
    "dft2",
    "fusion_trial",
    "kernel_moments",
    "kernel_spectrum",
    "lpsd",
    "moment_match_kernel",
    "profile_to_csv",
    "ring_map",
    "spectral_error_slope",
]

DIRECT_DFT_LIMIT = 64
LPSD_EPS = 1e-8
PARSEVAL_TOL = 1e-6
MOMENT_TOL = 1e-12
SLOPE_OMEGA_LO = 1e-3
SLOPE_OMEGA_HI = 1e-1
EXACT_MATCH_TOL = 1e-14


class ExactSpectralMatch(Exception):
    """The kernel reproduces the target phase exactly, so the error curve
    is identically zero and no slope can be fitted."""


class ZeroVarianceError(ValueError):
    """A fusion texture with no variance has an empty spectrum to compare."""


@dataclass(frozen=True)
class Spectrum:
    """DFT coefficients of a single-channel field.

    ``shifted`` records whether the quadrants have been swapped so the
    zero-frequency bin sits at (H//2, W//2) instead of (0, 0).
    """

    coeffs: np.ndarray
    shifted: bool


@dataclass(frozen=True)
class RadialProfile:
    """Per-ring means of a field, binned by integer distance from center.

    Ring r collects the bins with r - 0.5 <= sqrt(u^2 + v^2) < r + 0.5,
    so every bin lands in exactly one ring and the counts sum to H*W.
    """

    radii: np.ndarray
    values: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class KernelMoments:
    """Mass and centroid of a kernel, offsets measured from its center.

    ``m1`` is ordered (x, y): column offset first, row offset second.
    """

    m0: float
    m1: np.ndarray


@dataclass(frozen=True)
class FusionTrial:
    """Outcome of one misaligned-copy fusion comparison.

    ``margin`` is the mean advantage of the matched fusion's ring profile
    over the identity fusion's across the upper half of the radius range;
    the trial succeeds when it is positive.
    """

    delta: np.ndarray
    margin: float
    success: bool
    identity_profile: RadialProfile
    matched_profile: RadialProfile


def _as_plane(values: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"{what} must be a nonempty 2-D array, got shape "
                             f"{arr.shape}")
    return arr


def dft2(values: np.ndarray, shift: bool = False) -> Spectrum:
    """2D DFT of a single-channel field.

    Uses the direct definition, S[u, v] = sum_xy f[x, y] *
    exp(-2i*pi*(u*x/H + v*y/W)), whenever both dims are at most
    DIRECT_DFT_LIMIT, and the fast algorithm above that; the two paths
    agree to 1e-9 and the property tests hold them together. Raises
    InvariantError if the result fails Parseval against the input, which
    would mean the transform itself is broken.

    shift=True swaps quadrants so the zero-frequency bin moves to the
    center, which is what the radial profile downstream expects.
    """
    arr = _as_plane(values, "dft2 input")
    h, w = arr.shape
    if max(h, w) <= DIRECT_DFT_LIMIT:
        eh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
        ew = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
        coeffs = eh @ arr @ ew.T
    else:
        coeffs = np.fft.fft2(arr)
    spatial = float(np.sum(arr * arr))
    spectral = float(np.sum(np.abs(coeffs) ** 2)) / (h * w)
    gap = abs(spatial - spectral)
    if gap > PARSEVAL_TOL * max(1.0, abs(spatial)):
        raise InvariantError(
            f"Parseval violated: {spatial} spatial vs {spectral} spectral")
    if shift:
        coeffs = np.fft.fftshift(coeffs)
    return Spectrum(coeffs=coeffs, shifted=shift)


def lpsd(spectrum: Spectrum) -> np.ndarray:
    """log(|S|^2 + 1e-8), the floor keeping empty bins finite."""
    if not spectrum.shifted:
        raise InvariantError("lpsd expects a center-shifted spectrum")
    return np.log(np.abs(spectrum.coeffs) ** 2 + LPSD_EPS)


def ring_map(shape: tuple[int, int]) -> np.ndarray:
    """Integer ring index of every bin: floor(distance + 0.5) measured
    from the center bin (H//2, W//2)."""
    h, w = shape
    if h < 1 or w < 1:
        raise DimensionError(f"ring map needs a nonempty shape, got {shape}")
    dv = np.arange(h) - h // 2
    du = np.arange(w) - w // 2
    rho = np.hypot(dv[:, None], du[None, :])
    return np.floor(rho + 0.5).astype(int)


def aas(lpsd_values: np.ndarray) -> RadialProfile:
    """Azimuthal average: mean of a center-shifted LPSD plane over each
    integer radius ring."""
    plane = _as_plane(lpsd_values, "aas input")
    rings = ring_map(plane.shape)
    n_rings = int(rings.max()) + 1
    counts = np.bincount(rings.ravel(), minlength=n_rings)
    sums = np.bincount(rings.ravel(), weights=plane.ravel(),
                       minlength=n_rings)
    if int(counts.sum()) != plane.size:
        raise InvariantError("ring bins must partition the plane")
    return RadialProfile(radii=np.arange(n_rings), values=sums / counts,
                         counts=counts)


def _check_kernel(kernel: np.ndarray) -> np.ndarray:
    arr = np.asarray(kernel, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"kernel must be square, got shape {arr.shape}")
    if arr.shape[0] % 2 != 1:
        raise DimensionError("kernel side must be odd so the center is a bin")
    return arr


def kernel_moments(kernel: np.ndarray) -> KernelMoments:
    """Mass and first moment of a square odd-sided kernel, tap offsets
    counted from the middle bin."""
    arr = _check_kernel(kernel)
    k = arr.shape[0]
    n = np.arange(k) - (k - 1) // 2
    m0 = float(arr.sum())
    mx = float((arr * n[None, :]).sum())
    my = float((arr * n[:, None]).sum())
    return KernelMoments(m0=m0, m1=np.array([mx, my]))


def moment_match_kernel(delta, k: int = 3) -> np.ndarray:
    """Smallest-support kernel with unit mass and centroid exactly at
    ``delta`` = (dx, dy).

    Per axis this is two-tap linear interpolation: weight 1 - frac at
    floor(d) and frac at floor(d) + 1, offsets from the center bin. The
    outer product of the two axes then carries the requested centroid.
    Components must satisfy |d| <= (k - 1) / 2 to fit, and the achieved
    moments are re-measured and required to match to 1e-12.
    """
    d = np.asarray(delta, dtype=float)
    if d.shape != (2,) or not np.all(np.isfinite(d)):
        raise DimensionError(f"delta must be a finite 2-vector, got {delta!r}")
    if k < 1 or k % 2 != 1:
        raise DimensionError(f"kernel side must be odd and positive, got {k}")
    c = (k - 1) // 2
    if np.any(np.abs(d) > c):
        raise ValueError(
            f"delta {tuple(d)} exceeds the offsets a {k}x{k} kernel can hold")
    axes = []
    for comp in d:
        taps = np.zeros(k)
        base = int(np.floor(comp))
        frac = comp - base
        taps[c + base] = 1.0 - frac
        if frac > 0.0:
            taps[c + base + 1] = frac
        axes.append(taps)
    kernel = np.outer(axes[1], axes[0])
    moments = kernel_moments(kernel)
    if abs(moments.m0 - 1.0) > MOMENT_TOL or np.any(
            np.abs(moments.m1 - d) > MOMENT_TOL):
        raise InvariantError(
            f"constructed kernel misses its moments: {moments} vs {tuple(d)}")
    return kernel


def kernel_spectrum(kernel: np.ndarray, omega) -> np.ndarray:
    """Continuous transfer function sum_n w[n] exp(-i<omega, n>) with taps
    indexed from the kernel center; omega is (..., 2) in radians per
    pixel, ordered (x, y) like the moment vector."""
    arr = _check_kernel(kernel)
    k = arr.shape[0]
    n = np.arange(k) - (k - 1) // 2
    om = np.asarray(omega, dtype=float)
    if om.shape[-1] != 2:
        raise DimensionError(f"omega must have a trailing pair, got shape "
                             f"{om.shape}")
    flat = om.reshape(-1, 2)
    out = np.zeros(flat.shape[0], dtype=complex)
    for iy in range(k):
        for ix in range(k):
            if arr[iy, ix] == 0.0:
                continue
            phase = flat[:, 0] * n[ix] + flat[:, 1] * n[iy]
            out += arr[iy, ix] * np.exp(-1j * phase)
    return out.reshape(om.shape[:-1])


def spectral_error_slope(kernel: np.ndarray, delta,
                         omega_grid: np.ndarray | None = None) -> float:
    """Order of the kernel's phase error at low frequency.

    Along the unit direction of ``delta`` (falling back to +x when delta
    is zero) the error E(t) = |w_hat(t*e) - exp(-i*t*<e, delta>)| is
    evaluated on a grid of magnitudes inside [1e-3, 1e-1] and log E is
    fitted against log t by least squares; the slope is the exponent of
    the leading error term. A plain interpolation tap comes out near 1,
    a moment-matched kernel near 2. Raises ExactSpectralMatch when the
    error vanishes identically and there is nothing to fit.
    """
    d = np.asarray(delta, dtype=float)
    if d.shape != (2,) or not np.all(np.isfinite(d)):
        raise DimensionError(f"delta must be a finite 2-vector, got {delta!r}")
    if omega_grid is None:
        mags = np.logspace(np.log10(SLOPE_OMEGA_LO), np.log10(SLOPE_OMEGA_HI),
                           25)
    else:
        mags = np.asarray(omega_grid, dtype=float)
        if mags.ndim != 1 or mags.size < 2:
            raise DimensionError("omega_grid must be a 1-D grid of at least "
                                 "two magnitudes")
        if np.any(mags < SLOPE_OMEGA_LO * (1 - 1e-12)) or np.any(
                mags > SLOPE_OMEGA_HI * (1 + 1e-12)):
            raise ValueError("omega magnitudes must stay inside "
                             f"[{SLOPE_OMEGA_LO}, {SLOPE_OMEGA_HI}]")
    norm = float(np.hypot(d[0], d[1]))
    direction = d / norm if norm > 0.0 else np.array([1.0, 0.0])
    points = mags[:, None] * direction[None, :]
    target = np.exp(-1j * points @ d)
    errors = np.abs(kernel_spectrum(kernel, points) - target)
    if float(errors.max()) < EXACT_MATCH_TOL:
        raise ExactSpectralMatch(
            "kernel matches the target phase exactly on the whole grid")
    fit = np.polyfit(np.log(mags), np.log(errors), 1)
    return float(fit[0])


def _shift_periodic(values: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Translate a field by a real-valued offset with a spectral phase
    ramp, wrapping at the borders. Fast transforms are fine here: this
    builds the trial input, it is not the spectrum under test."""
    h, w = values.shape
    fu = np.fft.fftfreq(w)[None, :]
    fv = np.fft.fftfreq(h)[:, None]
    ramp = np.exp(-2j * np.pi * (fu * delta[0] + fv * delta[1]))
    return np.real(np.fft.ifft2(np.fft.fft2(values) * ramp))


def fusion_trial(rng: np.random.Generator, size: int = 64,
                 kernel_size: int = 3,
                 shift_range: tuple[float, float] = (0.5, 0.9),
                 texture: np.ndarray | None = None) -> FusionTrial:
    """Fuse two misaligned copies of a texture, with and without the
    moment-matched correction, and compare high-frequency retention.

    The texture (white noise unless one is supplied) is shifted by a
    subpixel offset drawn per component from ``shift_range``. The
    identity fusion adds the copies as they are; the matched fusion
    first runs the shifted copy through the kernel whose centroid is the
    negated offset, applied as a periodic convolution. Both fusions are
    reduced to ring profiles of their LPSD, and the trial succeeds when
    the matched profile is higher on average over the upper half of the
    radius range, rings (rmax + 1) // 2 and beyond. Offsets below half a
    pixel leave too little cancellation in band for the comparison to be
    meaningful, which is why the default range starts at 0.5.
    """
    lo, hi = float(shift_range[0]), float(shift_range[1])
    c = (kernel_size - 1) // 2
    if not (0.0 < lo <= hi):
        raise ValueError(f"shift range must be positive and ordered, got "
                         f"({lo}, {hi})")
    if hi > c:
        raise ValueError(f"shifts up to {hi} exceed what a {kernel_size}x"
                         f"{kernel_size} correction kernel can represent")
    if texture is None:
        texture = rng.standard_normal((size, size))
    else:
        texture = _as_plane(texture, "fusion texture")
    if float(texture.std()) == 0.0:
        raise ZeroVarianceError("fusion texture has zero variance")
    h, w = texture.shape
    delta = rng.uniform(lo, hi, size=2)
    moved = _shift_periodic(texture, delta)

    identity_fused = texture + moved
    correction = moment_match_kernel(-delta, kernel_size)
    fu = 2 * np.pi * np.fft.fftfreq(w)
    fv = 2 * np.pi * np.fft.fftfreq(h)
    grid = np.stack(np.meshgrid(fu, fv, indexing="xy"), axis=-1)
    transfer = kernel_spectrum(correction, grid)
    corrected = np.real(np.fft.ifft2(np.fft.fft2(moved) * transfer))
    matched_fused = texture + corrected

    identity_profile = aas(lpsd(dft2(identity_fused, shift=True)))
    matched_profile = aas(lpsd(dft2(matched_fused, shift=True)))
    rmax = int(identity_profile.radii[-1])
    upper = identity_profile.radii >= (rmax + 1) // 2
    margin = float(np.mean(matched_profile.values[upper]
                           - identity_profile.values[upper]))
    return FusionTrial(delta=delta, margin=margin, success=margin > 0.0,
                       identity_profile=identity_profile,
                       matched_profile=matched_profile)


def profile_to_csv(profile: RadialProfile) -> str:
    """Rows of r,mean_lpsd,count with full-precision values."""
    lines = ["r,mean_lpsd,count"]
    for r, v, c in zip(profile.radii, profile.values, profile.counts):
        lines.append(f"{int(r)},{repr(float(v))},{int(c)}")
    return "\n".join(lines) + "\n"
