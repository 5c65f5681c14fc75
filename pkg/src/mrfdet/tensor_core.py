"""Minimal dense-array layer primitives with explicit backward passes.

Every operation works on channels-first arrays (C, H, W) and is a pure
function of its inputs. Results are wrapped in :class:`Tensor`, a thin
reverse-mode tape node, so composed blocks can be differentiated without
hand-wiring adjoints at every call site. All gradients here are exact
adjoints of the forward maps and are validated against central finite
differences (see :func:`finite_diff_check`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation is handed inconsistently shaped arrays."""


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (possibly dilated, strided) square convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel,
               self.stride, self.dilation) < 1 or self.padding < 0:
            raise ShapeError(f"invalid conv spec: {self}")

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    def out_extent(self, extent: int) -> int:
        out = (extent + 2 * self.padding - self.effective_kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"conv output extent {out} < 1 for input extent {extent} "
                f"with kernel {self.kernel}, dilation {self.dilation}, "
                f"padding {self.padding}, stride {self.stride}")
        return out

    def transposed_out_extent(self, extent: int) -> int:
        out = (extent - 1) * self.stride - 2 * self.padding + self.effective_kernel
        if out < 1:
            raise ShapeError(
                f"transposed conv output extent {out} < 1 for input extent {extent}")
        return out


class Tensor:
    """A numpy array plus an optional tape node for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64 if np.asarray(data).dtype.kind != "f" else None)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this node; default seed is 1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Scalar arithmetic, enough to combine loss terms.
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        if other.shape != self.shape:
            raise ShapeError(f"add: shapes {self.shape} vs {other.shape}")
        out = _node(self.data + other.data, (self, other))

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accumulate(g)
            if other.requires_grad or other._parents:
                other._accumulate(g)
        out._backward = bwd
        return out

    __radd__ = __add__

    def __mul__(self, scalar):
        s = float(scalar)
        out = _node(self.data * s, (self,))

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accumulate(g * s)
        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _node(data, parents):
    out = Tensor(data)
    out._parents = tuple(p for p in parents
                         if isinstance(p, Tensor) and (p.requires_grad or p._parents))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


# ---------------------------------------------------------------------------
# Convolution internals (im2col over a small kernel-position loop).
# ---------------------------------------------------------------------------

def _check_chw(x, name):
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (C, H, W), got shape {x.shape}")


def _cols(xp, spec: ConvSpec, oh, ow):
    """Gather dilated/strided taps: (C, k, k, oh, ow) view-copy of padded input."""
    c = xp.shape[0]
    k, s, d = spec.kernel, spec.stride, spec.dilation
    cols = np.empty((c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i * d:i * d + (oh - 1) * s + 1:s,
                               j * d:j * d + (ow - 1) * s + 1:s]
    return cols


def _conv_fwd(x, w, spec: ConvSpec):
    c, h, wd = x.shape
    oh, ow = spec.out_extent(h), spec.out_extent(wd)
    p = spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    cols = _cols(xp, spec, oh, ow)
    y = w.reshape(spec.out_channels, -1) @ cols.reshape(c * spec.kernel ** 2, oh * ow)
    return y.reshape(spec.out_channels, oh, ow)


def _conv_grad_input(g, w, spec: ConvSpec, h, wd):
    """Scatter-add adjoint of _conv_fwd with respect to its input."""
    k, s, d, p = spec.kernel, spec.stride, spec.dilation, spec.padding
    oh, ow = g.shape[1], g.shape[2]
    cols = (w.reshape(spec.out_channels, -1).T @ g.reshape(spec.out_channels, -1))
    cols = cols.reshape(spec.in_channels, k, k, oh, ow)
    gxp = np.zeros((spec.in_channels, h + 2 * p, wd + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, i * d:i * d + (oh - 1) * s + 1:s,
                j * d:j * d + (ow - 1) * s + 1:s] += cols[:, i, j]
    return gxp[:, p:p + h, p:p + wd]


def _conv_grad_w(g, x, spec: ConvSpec):
    c, h, wd = x.shape
    oh, ow = g.shape[1], g.shape[2]
    p = spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    cols = _cols(xp, spec, oh, ow).reshape(c * spec.kernel ** 2, oh * ow)
    gw = g.reshape(spec.out_channels, -1) @ cols.T
    return gw.reshape(spec.out_channels, c, spec.kernel, spec.kernel)


# ---------------------------------------------------------------------------
# Public operations.
# ---------------------------------------------------------------------------

def conv2d(input, weights, bias, spec: ConvSpec) -> Tensor:
    """Dilated cross-correlation; tap (i, j) samples offset (d*i, d*j)."""
    x, w, b = as_tensor(input), as_tensor(weights), as_tensor(bias)
    _check_chw(x.data, "input")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ShapeError(f"weights shape {w.shape} != "
                         f"({spec.out_channels}, {spec.in_channels}, {spec.kernel}, {spec.kernel})")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, spec expects {spec.in_channels}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")
    y = _conv_fwd(x.data, w.data, spec) + b.data[:, None, None]
    out = _node(y, (x, w, b))
    h, wd = x.shape[1], x.shape[2]

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(_conv_grad_input(g, w.data, spec, h, wd))
        if _wants_grad(w):
            w._accumulate(_conv_grad_w(g, x.data, spec))
        if _wants_grad(b):
            b._accumulate(g.sum(axis=(1, 2)))
    out._backward = bwd
    return out


def conv2d_forward(input, weights, bias, spec: ConvSpec) -> np.ndarray:
    """Plain-array convolution forward (no tape)."""
    return conv2d(input, weights, bias, spec).data


def conv2d_backward(grad_out, input, weights, spec: ConvSpec):
    """Exact adjoints of conv2d_forward: (grad_input, grad_weights, grad_bias)."""
    g = np.asarray(grad_out)
    x = np.asarray(input)
    w = np.asarray(weights)
    oh, ow = spec.out_extent(x.shape[1]), spec.out_extent(x.shape[2])
    if g.shape != (spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {g.shape} != ({spec.out_channels}, {oh}, {ow})")
    return (_conv_grad_input(g, w, spec, x.shape[1], x.shape[2]),
            _conv_grad_w(g, x, spec),
            g.sum(axis=(1, 2)))


def transposed_conv2d(input, weights, bias, spec: ConvSpec) -> Tensor:
    """Fractionally-strided convolution: the adjoint map of conv2d.

    weights shape is (in_channels, out_channels, k, k); with stride 2 the
    spatial extent roughly doubles.
    """
    x, w, b = as_tensor(input), as_tensor(weights), as_tensor(bias)
    _check_chw(x.data, "input")
    if w.shape != (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel):
        raise ShapeError(f"weights shape {w.shape} != "
                         f"({spec.in_channels}, {spec.out_channels}, {spec.kernel}, {spec.kernel})")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, spec expects {spec.in_channels}")
    # The adjoint of a conv mapping out_channels -> in_channels with the
    # same geometry; reuse the conv gradient kernels with roles swapped.
    adj = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel,
                   spec.stride, spec.padding, spec.dilation)
    h, wd = x.shape[1], x.shape[2]
    oh, ow = spec.transposed_out_extent(h), spec.transposed_out_extent(wd)
    y = _conv_grad_input(x.data, w.data, adj, oh, ow) + b.data[:, None, None]
    out = _node(y, (x, w, b))

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(_conv_fwd(g, w.data, adj))
        if _wants_grad(w):
            w._accumulate(_conv_grad_w(x.data, g, adj))
        if _wants_grad(b):
            b._accumulate(g.sum(axis=(1, 2)))
    out._backward = bwd
    return out


def transposed_conv2d_forward(input, weights, bias, spec: ConvSpec) -> np.ndarray:
    return transposed_conv2d(input, weights, bias, spec).data


def relu(input) -> Tensor:
    x = as_tensor(input)
    out = _node(np.maximum(x.data, 0.0), (x,))

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(g * (x.data > 0))
    out._backward = bwd
    return out


def relu_backward(grad_out, input) -> np.ndarray:
    """Gate grad by input > 0; subgradient at exactly 0 is 0."""
    return np.asarray(grad_out) * (np.asarray(input) > 0)


def upsample_nearest_2x(input) -> Tensor:
    x = as_tensor(input)
    _check_chw(x.data, "input")
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    out = _node(y, (x,))
    c, h, w = x.shape

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))
    out._backward = bwd
    return out


def concat_channels(inputs) -> Tensor:
    ts = [as_tensor(t) for t in inputs]
    if not ts:
        raise ShapeError("concat_channels needs at least one input")
    spatial = ts[0].shape[1:]
    for i, t in enumerate(ts):
        _check_chw(t.data, f"input[{i}]")
        if t.shape[1:] != spatial:
            raise ShapeError(f"concat spatial mismatch: input[{i}] is {t.shape[1:]}, "
                             f"input[0] is {spatial}")
    out = _node(np.concatenate([t.data for t in ts], axis=0), ts)
    splits = np.cumsum([t.shape[0] for t in ts])[:-1]

    def bwd(g):
        for t, gpart in zip(ts, np.split(g, splits, axis=0)):
            if _wants_grad(t):
                t._accumulate(gpart)
    out._backward = bwd
    return out


def add(inputs) -> Tensor:
    ts = [as_tensor(t) for t in inputs]
    if not ts:
        raise ShapeError("add needs at least one input")
    for i, t in enumerate(ts):
        if t.shape != ts[0].shape:
            raise ShapeError(f"add shape mismatch: input[{i}] is {t.shape}, "
                             f"input[0] is {ts[0].shape}")
    out = _node(np.sum([t.data for t in ts], axis=0), ts)

    def bwd(g):
        for t in ts:
            if _wants_grad(t):
                t._accumulate(g)
    out._backward = bwd
    return out


def softmax_channels(input) -> Tensor:
    """Normalize across channels independently at every spatial position."""
    x = as_tensor(input)
    _check_chw(x.data, "input")
    if x.shape[0] < 1:
        raise ShapeError("softmax needs at least one channel")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)
    out = _node(s, (x,))

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(s * (g - (g * s).sum(axis=0, keepdims=True)))
    out._backward = bwd
    return out


def inner(input, coeffs) -> Tensor:
    """Scalar <input, coeffs>; the standard trick for reducing to a scalar loss."""
    x = as_tensor(input)
    c = np.asarray(coeffs, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"inner: shapes {x.shape} vs {c.shape}")
    out = _node(np.array((x.data * c).sum()), (x,))

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(g * c)
    out._backward = bwd
    return out


def finite_diff_check(op_handle, point, eps=1e-5) -> float:
    """Worst relative error of the analytic gradient vs central differences.

    op_handle maps a Tensor to a scalar Tensor; point is the ndarray at
    which to differentiate. Relative error uses max(|analytic|, |numeric|,
    1e-8) as denominator.
    """
    p = np.array(point, dtype=np.float64)
    t = Tensor(p.copy(), requires_grad=True)
    out = op_handle(t)
    out.backward()
    analytic = t.grad.reshape(-1)
    flat = p.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = op_handle(Tensor(p)).item()
        flat[i] = orig - eps
        lo = op_handle(Tensor(p)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
