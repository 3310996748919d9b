"""Planar projective transforms and their action on feature fields.

A homography is a 3x3 real matrix taken up to scale. To make "up to scale"
concrete every transform is stored in canonical form: divided by its
Frobenius norm (plus a small epsilon) and sign-flipped so the entry of
largest magnitude is positive. Points embed as ι(u, v) = (u, v, 1), map
through the matrix, and come back via division by the third coordinate;
fields pull back through the inverse map with bilinear sampling, which is
the induced action on images.

3x3 inverses are closed-form (adjugate over determinant), so near-singular
matrices are rejected by tolerance instead of surfacing as numerical noise
downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FeatureField, GridPoint, bilinear_gather, snap_integral

__all__ = [
    "DegenerateTransform",
    "PointAtInfinity",
    "ProjectiveTransform",
    "WarpResult",
    "apply_point",
    "canonicalize",
    "compose",
    "conjugate",
    "identity",
    "invert",
    "load_transform",
    "pixel_frame",
    "random_perturbation",
    "save_transform",
    "scaling",
    "source_grid",
    "translation",
    "warp_field",
]

CANON_EPS = 1e-8
DET_TOL = 1e-6
HORIZON_TOL = 1e-6
NORM_TOL = 1e-9

_MAX_RETRIES = 64


class DegenerateTransform(ValueError):
    """Matrix is (numerically) non-invertible or has no usable scale."""


class PointAtInfinity(ValueError):
    """The mapped point has a vanishing third homogeneous coordinate."""


@dataclass(frozen=True)
class ProjectiveTransform:
    """A canonical-form homography.

    Do not build raw matrices with this constructor unless they are already
    canonical; :func:`canonicalize` is the factory that gets you there.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise DegenerateTransform(f"expected a 3x3 matrix, got {m.shape}")
        if not np.isfinite(m).all():
            raise DegenerateTransform("matrix entries must be finite")
        fro = float(np.linalg.norm(m))
        if abs(fro - 1.0) > 1e-9:
            raise DegenerateTransform(
                f"matrix is not canonical (Frobenius norm {fro:.12f}); use canonicalize()"
            )
        if abs(_det3(m)) < DET_TOL:
            raise DegenerateTransform("matrix is numerically singular")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @property
    def matrix(self) -> np.ndarray:
        return self.m


@dataclass(frozen=True)
class WarpResult:
    """A warped field plus the per-pixel validity of its source lookups.

    ``valid_mask`` is (H, W) with entry 0 exactly where the source point fell
    outside the field domain (or behind the horizon); the warped field holds
    zeros there.
    """

    field: FeatureField
    valid_mask: np.ndarray


def _det3(m: np.ndarray) -> float:
    return float(
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def adjugate(m: np.ndarray) -> np.ndarray:
    """Adjugate of a 3x3 matrix: adj(m) @ m = det(m) * I."""
    out = np.empty((3, 3), dtype=np.float64)
    out[0, 0] = m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]
    out[0, 1] = m[0, 2] * m[2, 1] - m[0, 1] * m[2, 2]
    out[0, 2] = m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]
    out[1, 0] = m[1, 2] * m[2, 0] - m[1, 0] * m[2, 2]
    out[1, 1] = m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
    out[1, 2] = m[0, 2] * m[1, 0] - m[0, 0] * m[1, 2]
    out[2, 0] = m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]
    out[2, 1] = m[0, 1] * m[2, 0] - m[0, 0] * m[2, 1]
    out[2, 2] = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return out


def canonicalize(m: np.ndarray) -> ProjectiveTransform:
    """Scale a raw 3x3 matrix to its canonical representative.

    The matrix is divided by (Frobenius norm + 1e-8), rescaled exactly onto
    the unit sphere (the epsilon only guards the division), and negated if
    its largest-magnitude entry is negative, making scale comparisons
    between transforms deterministic. Zero-norm or near-singular input
    raises :class:`DegenerateTransform`.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise DegenerateTransform(f"expected a 3x3 matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise DegenerateTransform("matrix entries must be finite")
    fro = float(np.linalg.norm(m))
    if fro < NORM_TOL:
        raise DegenerateTransform(f"Frobenius norm {fro} below {NORM_TOL}")
    mc = m / (fro + CANON_EPS)
    mc = mc / np.linalg.norm(mc)
    peak = np.unravel_index(np.argmax(np.abs(mc)), mc.shape)
    if mc[peak] < 0:
        mc = -mc
    if abs(_det3(mc)) < DET_TOL:
        raise DegenerateTransform("matrix is numerically singular after scaling")
    return ProjectiveTransform(mc)


def identity() -> ProjectiveTransform:
    return canonicalize(np.eye(3))


def translation(du: float, dv: float) -> ProjectiveTransform:
    """Shift by du columns and dv rows."""
    m = np.eye(3)
    m[0, 2] = du
    m[1, 2] = dv
    return canonicalize(m)


def scaling(sx: float, sy: float) -> ProjectiveTransform:
    m = np.diag([float(sx), float(sy), 1.0])
    return canonicalize(m)


def compose(a: ProjectiveTransform, b: ProjectiveTransform) -> ProjectiveTransform:
    """The transform applying b first, then a."""
    return canonicalize(a.m @ b.m)


def invert(t: ProjectiveTransform) -> ProjectiveTransform:
    """Projective inverse; the adjugate is the inverse up to scale."""
    return canonicalize(adjugate(t.m))


def conjugate(g: ProjectiveTransform, theta: ProjectiveTransform) -> ProjectiveTransform:
    """g . theta . g^-1, canonicalized.

    The adjugate stands in for g^-1 (the det(g) factor it carries is a
    global scale and canonicalization removes it).
    """
    return canonicalize(g.m @ theta.m @ adjugate(g.m))


def apply_point(t: ProjectiveTransform, p: GridPoint) -> GridPoint:
    """Map a point: embed, multiply, dehomogenize."""
    h = t.m @ np.array([p.u, p.v, 1.0])
    if abs(h[2]) < HORIZON_TOL:
        raise PointAtInfinity(f"point {tuple(p)} maps to the line at infinity")
    return GridPoint(h[0] / h[2], h[1] / h[2])


def source_grid(minv: np.ndarray, height: int, width: int):
    """Source coordinates (su, sv) of every target pixel under ``minv``.

    ``minv`` is the inverse matrix of the transform being applied. Returns
    float arrays (H, W) plus a boolean mask that is False where the
    denominator vanished (those coordinates are placeholders). The matrix is
    normalized by its largest entry first; for pure integer translations this
    keeps the grid exactly integral.
    """
    m = np.asarray(minv, dtype=np.float64)
    scale = np.max(np.abs(m))
    if scale == 0.0:
        raise DegenerateTransform("zero matrix has no pixel action")
    m = m / scale
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    x = m[0, 0] * us + m[0, 1] * vs + m[0, 2]
    y = m[1, 0] * us + m[1, 1] * vs + m[1, 2]
    z = m[2, 0] * us + m[2, 1] * vs + m[2, 2]
    finite = np.abs(z) >= HORIZON_TOL / scale  # tolerance rescaled to normalized units
    zsafe = np.where(finite, z, 1.0)
    return snap_integral(x / zsafe), snap_integral(y / zsafe), finite


def warp_field(t: ProjectiveTransform, f: FeatureField) -> WarpResult:
    """Pull a field back through ``t``: output(p) = f(t^-1 . p).

    Linear in the field. Pixels whose source point leaves the domain (or
    whose denominator vanishes) are zero and flagged 0 in the mask.
    """
    minv = adjugate(t.m)
    if abs(_det3(t.m)) < DET_TOL:
        raise DegenerateTransform("transform is not invertible")
    su, sv, finite = source_grid(minv, f.height, f.width)
    values, inside = bilinear_gather(f.data, su, sv)
    mask = (inside & finite)
    out = values * mask
    return WarpResult(FeatureField(out), mask.astype(np.float64))


def pixel_frame(t: ProjectiveTransform, height: int, width: int) -> ProjectiveTransform:
    """Conjugate a unit-square-frame transform into pixel coordinates.

    ``t`` is read as acting on the unit square [0,1]^2; the result acts on
    [0, W-1] x [0, H-1] the same way, geometrically. A translation entry of
    0.1 therefore displaces by about a tenth of the image, independent of
    resolution.
    """
    s = np.diag([1.0 / max(width - 1, 1), 1.0 / max(height - 1, 1), 1.0])
    sinv = np.diag([float(max(width - 1, 1)), float(max(height - 1, 1)), 1.0])
    return canonicalize(sinv @ t.m @ s)


def random_perturbation(sigma: float, rng_seed) -> ProjectiveTransform:
    """Identity plus uniform noise: g = I + N, N_ij ~ U(-sigma, sigma), g33 = 1.

    Deterministic for a fixed seed. Degenerate draws are retried a bounded
    number of times (only relevant for large sigma).
    """
    if not (0.0 <= sigma < 1.0):
        raise ValueError(f"sigma must lie in [0, 1), got {sigma}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for _ in range(_MAX_RETRIES):
        noise = rng.uniform(-sigma, sigma, size=(3, 3))
        g = np.eye(3) + noise
        g[2, 2] = 1.0
        try:
            return canonicalize(g)
        except DegenerateTransform:
            continue
    raise DegenerateTransform(
        f"no invertible perturbation found in {_MAX_RETRIES} draws at sigma={sigma}"
    )


# ---------------------------------------------------------------------------
# text serialization: 9 whitespace-separated decimals, row-major
# ---------------------------------------------------------------------------

def transform_to_text(t: ProjectiveTransform) -> str:
    rows = [" ".join(repr(float(v)) for v in row) for row in t.m]
    return "\n".join(rows) + "\n"


def transform_from_text(text: str) -> ProjectiveTransform:
    parts = text.split()
    if len(parts) != 9:
        raise DegenerateTransform(f"expected 9 values, got {len(parts)}")
    m = np.array([float(p) for p in parts], dtype=np.float64).reshape(3, 3)
    try:
        return ProjectiveTransform(m)  # round-trip of a canonical matrix
    except DegenerateTransform:
        return canonicalize(m)


def save_transform(path, t: ProjectiveTransform) -> None:
    from pathlib import Path

    Path(path).write_text(transform_to_text(t), encoding="ascii")


def load_transform(path) -> ProjectiveTransform:
    from pathlib import Path

    return transform_from_text(Path(path).read_text(encoding="ascii"))
