"""Reverse-mode differentiation over numpy arrays.

A ``DiffValue`` wraps a float64 ndarray (0-d for scalars) and remembers how
it was computed. Calling :func:`backward` on a scalar node walks the recorded
graph once, in reverse topological order, and accumulates gradients into
every node that asked for them. The design is the classic dynamic-tape one:
each operation returns a fresh node carrying a closure that knows how to push
its output gradient into its parents.

Ops are deliberately few. Pointwise arithmetic with numpy broadcasting,
a handful of nonlinearities, reductions, 2-D matmul, reshape/transpose/
indexing, and the four structured kernels the models need: same-padded
cross-correlation, align-corners resize, bilinear grid sampling, and the
pixel-grid of a homography (plus a closed-form 3x3 inverse so warp
parameters can be learned).

Nondifferentiable points (relu / abs at zero, grid samples crossing a pixel
boundary) are reported to an optional kink trace so finite-difference checks
can resample unlucky inputs instead of failing on a one-sided derivative.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .field import bilinear_gather, conv2d_raw, resize_matrix, snap_integral

__all__ = [
    "DiffValue",
    "GraphError",
    "as_diff",
    "backward",
    "concat0",
    "kink_trace",
    "softmax",
]


class GraphError(ValueError):
    """Misuse of the computation graph (non-scalar root, bad shapes, ...)."""


# --- kink reporting ---------------------------------------------------------

_KINK_SINKS: list[list[float]] = []


@contextmanager
def kink_trace():
    """Collect distances to the nearest nondifferentiable point.

    Yields a list; every relu/abs/grid_sample evaluated inside the block
    appends its smallest margin. Tests treat ``min(trace) < 10*h`` as "too
    close to a kink, resample".
    """
    sink: list[float] = []
    _KINK_SINKS.append(sink)
    try:
        yield sink
    finally:
        _KINK_SINKS.remove(sink)


def _note_kink(distance: float) -> None:
    if _KINK_SINKS:
        d = float(distance)
        for sink in _KINK_SINKS:
            sink.append(d)


# --- the node ----------------------------------------------------------------


class DiffValue:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, value, requires_grad: bool = False,
                 _parents: tuple["DiffValue", ...] = (),
                 _backprop: Callable[[], None] | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backprop = _backprop

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "DiffValue":
        return DiffValue(self.value)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_diff(other)
        out = DiffValue(self.value + other.value, _parents=(self, other))

        def push():
            _accumulate(self, out.grad)
            _accumulate(other, out.grad)

        out._backprop = push
        return out

    __radd__ = __add__

    def __neg__(self):
        out = DiffValue(-self.value, _parents=(self,))
        out._backprop = lambda: _accumulate(self, -out.grad)
        return out

    def __sub__(self, other):
        return self + (-as_diff(other))

    def __rsub__(self, other):
        return as_diff(other) + (-self)

    def __mul__(self, other):
        other = as_diff(other)
        out = DiffValue(self.value * other.value, _parents=(self, other))

        def push():
            _accumulate(self, out.grad * other.value)
            _accumulate(other, out.grad * self.value)

        out._backprop = push
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_diff(other)
        out = DiffValue(self.value / other.value, _parents=(self, other))

        def push():
            _accumulate(self, out.grad / other.value)
            _accumulate(other, -out.grad * self.value / (other.value ** 2))

        out._backprop = push
        return out

    def __rtruediv__(self, other):
        return as_diff(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise GraphError("only constant exponents are supported")
        e = float(exponent)
        out = DiffValue(self.value ** e, _parents=(self,))

        def push():
            _accumulate(self, out.grad * e * self.value ** (e - 1.0))

        out._backprop = push
        return out

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self):
        out = DiffValue(np.exp(self.value), _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad * out.value)
        return out

    def log(self):
        out = DiffValue(np.log(self.value), _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad / self.value)
        return out

    def sqrt(self):
        out = DiffValue(np.sqrt(self.value), _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad * 0.5 / out.value)
        return out

    def abs(self):
        if self.value.size:
            _note_kink(np.min(np.abs(self.value)))
        out = DiffValue(np.abs(self.value), _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad * np.sign(self.value))
        return out

    def relu(self):
        if self.value.size:
            _note_kink(np.min(np.abs(self.value)))
        mask = self.value > 0.0
        out = DiffValue(self.value * mask, _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad * mask)
        return out

    def softplus(self):
        out = DiffValue(np.logaddexp(0.0, self.value), _parents=(self,))

        def push():
            sig = 1.0 / (1.0 + np.exp(-self.value))
            _accumulate(self, out.grad * sig)

        out._backprop = push
        return out

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = DiffValue(self.value.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def push():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(self, np.broadcast_to(g, self.value.shape))

        out._backprop = push
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.value.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.value.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- structure ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = DiffValue(self.value.reshape(shape), _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad.reshape(self.value.shape))
        return out

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
        out = DiffValue(self.value.transpose(axes), _parents=(self,))
        out._backprop = lambda: _accumulate(self, out.grad.transpose(inverse))
        return out

    def __getitem__(self, idx):
        out = DiffValue(self.value[idx], _parents=(self,))

        def push():
            g = np.zeros_like(self.value)
            np.add.at(g, idx, out.grad)
            _accumulate(self, g)

        out._backprop = push
        return out

    def __matmul__(self, other):
        other = as_diff(other)
        a, b = self.value, other.value
        if a.ndim == 2 and b.ndim == 2:
            out = DiffValue(a @ b, _parents=(self, other))

            def push():
                _accumulate(self, out.grad @ b.T)
                _accumulate(other, a.T @ out.grad)

        elif a.ndim == 2 and b.ndim == 1:
            out = DiffValue(a @ b, _parents=(self, other))

            def push():
                _accumulate(self, np.outer(out.grad, b))
                _accumulate(other, a.T @ out.grad)

        else:
            raise GraphError(f"matmul supports (n,k)@(k,m) and (n,k)@(k,), got {a.shape} @ {b.shape}")
        out._backprop = push
        return out


def as_diff(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _accumulate(node: DiffValue, grad: np.ndarray | None) -> None:
    if grad is None or not node.requires_grad:
        return
    g = _reduce_to(np.asarray(grad, dtype=np.float64), node.value.shape)
    if node.grad is None:
        node.grad = g.copy() if g.base is not None or g is grad else g
    else:
        node.grad = node.grad + g


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: sum `grad` down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    collapse = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if collapse:
        grad = grad.sum(axis=collapse, keepdims=True)
    return grad.reshape(shape)


# --- structured kernels -------------------------------------------------------


def conv2d(x: DiffValue, kernel: DiffValue) -> DiffValue:
    """Same-padded cross-correlation, differentiable in input and kernel."""
    x, kernel = as_diff(x), as_diff(kernel)
    xv, wv = x.value, kernel.value
    if xv.ndim != 4 or wv.ndim != 4 or wv.shape[1] != xv.shape[1]:
        raise GraphError(f"conv2d shapes: input {xv.shape}, kernel {wv.shape}")
    k = wv.shape[2]
    if k != wv.shape[3] or k % 2 != 1:
        raise GraphError("kernel must be square with odd size")
    pad = k // 2
    out = DiffValue(conv2d_raw(xv, wv), _parents=(x, kernel))

    def push():
        g = out.grad
        if x.requires_grad:
            flipped = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            _accumulate(x, conv2d_raw(g, np.ascontiguousarray(flipped)))
        if kernel.requires_grad:
            xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
            _accumulate(kernel, np.einsum("boyx,bcyxij->ocij", g, win, optimize=True))

    out._backprop = push
    return out


def resize_bilinear(x: DiffValue, target_h: int, target_w: int) -> DiffValue:
    """Align-corners bilinear resize as a linear (hence exactly adjoint) map."""
    x = as_diff(x)
    rh = resize_matrix(x.value.shape[2], target_h)
    rw = resize_matrix(x.value.shape[3], target_w)
    out = DiffValue(np.einsum("ay,bcyx,dx->bcad", rh, x.value, rw, optimize=True),
                    _parents=(x,))

    def push():
        _accumulate(x, np.einsum("ay,bcad,dx->bcyx", rh, out.grad, rw, optimize=True))

    out._backprop = push
    return out


def grid_sample(field: DiffValue, grid: DiffValue) -> DiffValue:
    """Bilinear sampling of ``field`` (B,C,H,W) at ``grid`` ((2,Ho,Wo): su, sv).

    Points outside the domain read zero and are hard-masked, the same
    convention the plain warp uses. Gradients flow into the field (scatter
    of the interpolation weights) and into the grid coordinates (local
    spatial differences), which is what lets warp parameters upstream of
    the grid be learned. The mask is constant in the backward pass; its
    jumps sit on integer pixel lines, which the kink margin already
    reports.
    """
    field, grid = as_diff(field), as_diff(grid)
    if grid.value.ndim != 3 or grid.value.shape[0] != 2:
        raise GraphError(f"grid must be (2, Ho, Wo), got {grid.value.shape}")
    data = field.value
    b, c, h, w = data.shape
    su, sv = grid.value[0], grid.value[1]

    fu = su - np.floor(su)
    fv = sv - np.floor(sv)
    margins = np.minimum(np.minimum(fu, 1.0 - fu), np.minimum(fv, 1.0 - fv))
    if margins.size:
        _note_kink(float(margins.min()))

    values, valid = bilinear_gather(data, su, sv)
    out = DiffValue(values * valid, _parents=(field, grid))

    u0 = np.floor(su).astype(np.int64)
    v0 = np.floor(sv).astype(np.int64)

    def taps():
        for dv in (0, 1):
            for du in (0, 1):
                uu, vv = u0 + du, v0 + dv
                inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
                yield du, dv, np.clip(uu, 0, w - 1), np.clip(vv, 0, h - 1), inside

    def push():
        g = out.grad * valid  # (B, C, Ho, Wo); masked pixels are flat zero
        if field.requires_grad:
            acc = np.zeros(b * c * h * w, dtype=np.float64)
            base = np.arange(b * c, dtype=np.int64)[:, None] * (h * w)
            for du, dv, uc, vc, inside in taps():
                wgt = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv) * inside
                idx = (base + (vc * w + uc).ravel()[None, :]).ravel()
                vals = (g.reshape(b * c, -1) * wgt.ravel()[None, :]).ravel()
                acc += np.bincount(idx, weights=vals, minlength=acc.size)
            _accumulate(field, acc.reshape(b, c, h, w))
        if grid.requires_grad:
            tap = {}
            for du, dv, uc, vc, inside in taps():
                tap[du, dv] = data[:, :, vc, uc] * inside
            dval_dsu = (1.0 - fv) * (tap[1, 0] - tap[0, 0]) + fv * (tap[1, 1] - tap[0, 1])
            dval_dsv = (1.0 - fu) * (tap[0, 1] - tap[0, 0]) + fu * (tap[1, 1] - tap[1, 0])
            dsu = (g * dval_dsu).sum(axis=(0, 1))
            dsv = (g * dval_dsv).sum(axis=(0, 1))
            _accumulate(grid, np.stack([dsu, dsv]))

    out._backprop = push
    return out


def homography_grid(minv: DiffValue, height: int, width: int) -> DiffValue:
    """Source-coordinate grid of the projective map with inverse matrix ``minv``.

    Output (2, H, W): row 0 the source columns, row 1 the source rows, for
    each target pixel (u, v): (m00 u + m01 v + m02) / z and
    (m10 u + m11 v + m12) / z with z = m20 u + m21 v + m22. The matrix is
    pre-scaled by its (detached) largest entry, which changes nothing
    mathematically (the map is scale-invariant) but keeps pure translations
    exact in floating point.
    """
    minv = as_diff(minv)
    if minv.value.shape != (3, 3):
        raise GraphError("homography grid needs a 3x3 matrix")
    scale = np.max(np.abs(minv.value))
    if scale == 0.0:
        raise GraphError("zero matrix has no pixel action")
    m = minv.value / scale

    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    x = m[0, 0] * us + m[0, 1] * vs + m[0, 2]
    y = m[1, 0] * us + m[1, 1] * vs + m[1, 2]
    z = m[2, 0] * us + m[2, 1] * vs + m[2, 2]
    if np.any(np.abs(z) < 1e-12):
        raise GraphError("grid crosses the horizon (zero denominator)")
    su, sv = snap_integral(x / z), snap_integral(y / z)
    out = DiffValue(np.stack([su, sv]), _parents=(minv,))

    def push():
        gsu, gsv = out.grad[0], out.grad[1]
        phi = np.stack([us, vs, np.ones_like(us)])  # (3, H, W)
        dm = np.empty((3, 3))
        dm[0] = np.einsum("yx,pyx->p", gsu / z, phi)
        dm[1] = np.einsum("yx,pyx->p", gsv / z, phi)
        dm[2] = -np.einsum("yx,pyx->p", (gsu * su + gsv * sv) / z, phi)
        _accumulate(minv, dm / scale)

    out._backprop = push
    return out


def inv3(x: DiffValue) -> DiffValue:
    """Closed-form inverse of a 3x3 matrix (adjugate over determinant)."""
    x = as_diff(x)
    m = x.value
    if m.shape != (3, 3):
        raise GraphError("inv3 needs a 3x3 matrix")
    adj = _adjugate3(m)
    det = m[0, 0] * adj[0, 0] + m[0, 1] * adj[1, 0] + m[0, 2] * adj[2, 0]
    if abs(det) < 1e-12:
        raise GraphError("matrix is numerically singular")
    y = adj / det
    out = DiffValue(y, _parents=(x,))

    def push():
        _accumulate(x, -y.T @ out.grad @ y.T)

    out._backprop = push
    return out


def _adjugate3(m: np.ndarray) -> np.ndarray:
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


def concat0(parts) -> DiffValue:
    """Concatenate DiffValues along axis 0."""
    parts = [as_diff(p) for p in parts]
    if not parts:
        raise GraphError("concat0 needs at least one part")
    out = DiffValue(np.concatenate([p.value for p in parts], axis=0),
                    _parents=tuple(parts))

    def push():
        offset = 0
        for p in parts:
            n = p.value.shape[0]
            if p.requires_grad:
                _accumulate(p, out.grad[offset:offset + n])
            offset += n

    out._backprop = push
    return out


def softmax(x: DiffValue) -> DiffValue:
    """Softmax over a 1-D vector, shift-stabilized with a detached max."""
    x = as_diff(x)
    shifted = x - float(np.max(x.value))
    e = shifted.exp()
    return e / e.sum()


# --- backward pass -------------------------------------------------------------


def backward(root: DiffValue) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    ``root`` must be scalar (a single value). Gradients add up across calls,
    so build a fresh graph (or zero the leaves) per evaluation.
    """
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.value.shape}")

    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop()
