"""Patch covers, the patch-lattice graph, propagation, and the energy.

A field's spatial domain is covered by overlapping sliding windows on a
regular lattice. Patches become graph nodes, lattice 4-neighbors become
edges, and per-patch feature means become node vectors. Two rounds of
renormalized-adjacency propagation smooth those vectors, and the Laplacian
quadratic form measures how far from patchwise-constant they are. The
energy is computed twice on every call, as the explicit pairwise sum and
as the trace form, and the call fails loudly if the two drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffValue
from .field import DimensionError, FeatureField, InvariantError, random_smooth_field

__all__ = [
    "CochainFeatures",
    "PatchCover",
    "PatchGraph",
    "build_cover",
    "build_nerve",
    "consistency_stats",
    "gcn_forward",
    "inconsistency_trial",
    "make_inconsistent_field",
    "pearson",
    "restrict",
    "sheaf_energy",
    "sheaf_energy_diff",
    "stats_to_csv",
]


@dataclass(frozen=True)
class PatchCover:
    """Sliding windows (row0, col0, height, width) on a regular lattice."""

    patches: tuple
    grid_dims: tuple
    patch_size: int
    stride: int

    @property
    def count(self) -> int:
        return len(self.patches)


@dataclass(frozen=True)
class PatchGraph:
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    renormalized: np.ndarray

    @property
    def count(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class CochainFeatures:
    """One (N, C) row block of per-patch vectors for each batch item."""

    v: np.ndarray  # (B, N, C)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim != 3:
            raise DimensionError(f"cochain must be (B, N, C), got {v.shape}")
        object.__setattr__(self, "v", v)


def _axis_positions(size: int, patch: int, stride: int) -> list:
    positions = list(range(0, size - patch + 1, stride))
    if positions[-1] != size - patch:
        positions.append(size - patch)
    return positions


def build_cover(height: int, width: int, patch: int, stride: int) -> PatchCover:
    """Windows at every lattice position, clamped so the last one touches
    the edge; every pixel ends up inside at least one window."""
    if patch > min(height, width):
        raise DimensionError(
            f"patch {patch} exceeds the {height}x{width} domain")
    if not 1 <= stride <= patch:
        raise DimensionError(f"stride must be in [1, {patch}], got {stride}")
    rows = _axis_positions(height, patch, stride)
    cols = _axis_positions(width, patch, stride)
    patches = tuple((r, c, patch, patch) for r in rows for c in cols)
    return PatchCover(patches, (len(rows), len(cols)), patch, stride)


def build_nerve(cover: PatchCover) -> PatchGraph:
    """Lattice 4-neighborhood graph with Laplacian and the self-loop
    renormalization D~^(-1/2) (A+I) D~^(-1/2)."""
    rows, cols = cover.grid_dims
    n = rows * cols
    a = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                a[i, i + 1] = a[i + 1, i] = 1.0
            if r + 1 < rows:
                a[i, i + cols] = a[i + cols, i] = 1.0
    degree = np.diag(a.sum(axis=1))
    laplacian = degree - a
    with_loops = a + np.eye(n)
    inv_sqrt = np.diag(1.0 / np.sqrt(with_loops.sum(axis=1)))
    renorm = inv_sqrt @ with_loops @ inv_sqrt
    return PatchGraph(a, degree, laplacian, renorm)


def restrict(f: FeatureField, cover: PatchCover) -> CochainFeatures:
    """Per-patch channel means: adaptive average pooling to one vector."""
    last = cover.patches[-1]
    if last[0] + last[2] > f.height or last[1] + last[3] > f.width:
        raise DimensionError("cover does not fit the field")
    v = np.empty((f.batch, cover.count, f.channels))
    for i, (r, c, h, w) in enumerate(cover.patches):
        v[:, i, :] = f.data[:, :, r:r + h, c:c + w].mean(axis=(2, 3))
    return CochainFeatures(v)


def gcn_forward(cochain: CochainFeatures, graph: PatchGraph, w1: np.ndarray,
                w2: np.ndarray) -> CochainFeatures:
    """relu(A^ . relu(A^ . V . w1) . w2), batched over the leading axis."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    v = cochain.v
    if v.shape[1] != graph.count:
        raise DimensionError(f"cochain has {v.shape[1]} rows, graph {graph.count}")
    if w1.shape[0] != v.shape[2] or w2.shape[0] != w1.shape[1]:
        raise DimensionError("propagation weight dims do not chain")
    h1 = np.maximum(np.einsum("ij,bjc->bic", graph.renormalized, v) @ w1, 0.0)
    h2 = np.maximum(np.einsum("ij,bjc->bic", graph.renormalized, h1) @ w2, 0.0)
    return CochainFeatures(h2)


def sheaf_energy(cochain: CochainFeatures, graph: PatchGraph,
                 batch: int | None = None) -> float:
    """1/(2BN) sum_ij A_ij ||h_i - h_j||^2, cross-checked against the trace
    form 1/(BN) Tr(H^T L H) on every call."""
    h = cochain.v
    b = h.shape[0] if batch is None else batch
    n = graph.count
    if h.shape[1] != n:
        raise DimensionError(f"cochain has {h.shape[1]} rows, graph {n}")
    pairwise = 0.0
    for i in range(n):
        for j in range(n):
            if graph.adjacency[i, j]:
                d = h[:, i, :] - h[:, j, :]
                pairwise += float((d * d).sum())
    pairwise /= 2.0 * b * n
    trace = 0.0
    for item in h:
        trace += float(np.trace(item.T @ graph.laplacian @ item))
    trace /= b * n
    if abs(pairwise - trace) > 1e-9 * max(1.0, abs(trace)):
        raise InvariantError(
            f"energy forms disagree: pairwise {pairwise!r} vs trace {trace!r}")
    return pairwise


def sheaf_energy_diff(h: DiffValue, graph: PatchGraph) -> DiffValue:
    """Trace-form energy 1/(BN) Tr(H^T L H) on a (B, N, C) DiffValue."""
    b, n, _c = h.shape
    if n != graph.count:
        raise DimensionError(f"cochain has {n} rows, graph {graph.count}")
    lap = DiffValue(graph.laplacian)
    total = None
    for i in range(b):
        item = h[i]  # (N, C)
        term = (item * (lap @ item)).sum()
        total = term if total is None else total + term
    return total / float(b * n)


def make_inconsistent_field(m: float, rng, height: int = 32, width: int = 32,
                            channels: int = 1, tile: int = 8):
    """A positive smooth field plus per-tile constant offsets of strength m.

    The offset pattern is piecewise constant on a non-overlapping tile grid
    and scaled so that its own restricted cochain carries unit energy on
    that grid. m then sweeps the injected inconsistency amplitude and is
    the only knob that moves the energy. Returns (corrupted, clean).
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"inconsistency magnitude must be in [0, 1], got {m}")
    rng = np.random.default_rng(rng)
    smooth = random_smooth_field(rng, 1, channels, height, width, base=4).data
    clean = 2.0 + 0.25 * smooth
    cover = build_cover(height, width, tile, tile)
    graph = build_nerve(cover)
    offsets = np.zeros_like(clean)
    pattern_energy = 0.0
    while pattern_energy <= 0.0:
        for r0 in range(0, height, tile):
            for c0 in range(0, width, tile):
                offsets[0, :, r0:r0 + tile, c0:c0 + tile] = \
                    rng.standard_normal(channels)[:, None, None]
        pattern_energy = sheaf_energy(restrict(FeatureField(offsets), cover), graph)
    offsets /= np.sqrt(pattern_energy)
    return FeatureField(clean + m * offsets), FeatureField(clean)


def inconsistency_trial(m: float, rng, height: int = 32, width: int = 32,
                        tile: int = 8):
    """(sheaf energy, relative error vs the clean field) for one sample."""
    corrupted, clean = make_inconsistent_field(m, rng, height, width, 1, tile)
    cover = build_cover(height, width, tile, tile)
    graph = build_nerve(cover)
    energy = sheaf_energy(restrict(corrupted, cover), graph)
    err = float(np.mean(np.abs(corrupted.data - clean.data) / clean.data))
    return energy, err


# --- the energy-vs-error report -------------------------------------------------


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        raise InvariantError("correlation undefined: a coordinate has zero variance")
    return float((xc * yc).sum()) / denom


@dataclass(frozen=True)
class ConsistencyReport:
    pearson_r: float
    quartile_means: tuple  # mean depth error within each energy quartile
    samples: tuple  # (energy, depth_error, quartile_index)


def consistency_stats(samples) -> ConsistencyReport:
    """Pearson r between energy and error, plus error means by energy
    quartile."""
    pts = [(float(e), float(d)) for e, d in samples]
    if len(pts) < 3:
        raise InvariantError(f"need at least 3 samples, got {len(pts)}")
    energy = np.array([p[0] for p in pts])
    err = np.array([p[1] for p in pts])
    r = pearson(energy, err)
    edges = np.quantile(energy, [0.25, 0.5, 0.75])
    quartile = np.searchsorted(edges, energy, side="right")
    means = tuple(float(err[quartile == q].mean()) if (quartile == q).any()
                  else math.nan for q in range(4))
    tagged = tuple((e, d, int(q)) for (e, d), q in zip(pts, quartile))
    return ConsistencyReport(r, means, tagged)


def stats_to_csv(report: ConsistencyReport) -> str:
    lines = ["sample_id,energy,depth_error,quartile"]
    for i, (e, d, q) in enumerate(report.samples):
        lines.append(f"{i},{repr(e)},{repr(d)},{q}")
    return "\n".join(lines) + "\n"
