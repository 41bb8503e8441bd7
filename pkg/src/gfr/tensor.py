"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operation set is exactly what a gated multi-scale detection head
needs: cross-correlation, ceil-mode max pooling, 2x bilinear upsampling,
global average pooling, small fully-connected stacks, channel/global
rescaling, and tape glue (concat, reshape, transpose, elementwise
arithmetic).  Everything is float64; graphs are rebuilt on every forward
pass and freed when the output tensors go out of scope.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A dense array plus an optional gradient buffer and tape record.

    Feature maps are rank-4 ``(batch, channels, height, width)`` by
    convention; intermediate vectors (attention descriptors, logits) use
    whatever rank is natural.  Gradients accumulate additively, so a
    tensor used twice in one graph receives the sum of both paths.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_children", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _children: Sequence["Tensor"] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._children = tuple(_children)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        self.grad = np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor; the optimizer owns its update."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._children):
            stack.append((node, i + 1))
            child = node._children[i]
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, 0))
        else:
            order.append(node)
    return order


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _op(data: Array, children: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    """Create a tape node; prunes the record when no input needs gradients."""
    if any(c.requires_grad for c in children):
        return Tensor(data, requires_grad=True, _children=children, _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# convolution


def _pad_spatial(x: Array, pad: int, value: float = 0.0) -> Array:
    if pad == 0:
        return x
    b, c, h, w = x.shape
    out = np.full((b, c, h + 2 * pad, w + 2 * pad), value, dtype=np.float64)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with a square kernel.

    ``weight`` is ``(c_out, c_in, k, k)``, ``bias`` is ``(c_out,)``.
    Implemented as im2col plus one matmul so BLAS does the heavy lifting.
    """
    b, c_in, h, w = x.shape
    c_out, c_in_w, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {weight.shape}")
    if c_in != c_in_w:
        raise ValueError(f"input has {c_in} channels, weight expects {c_in_w}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output size for input {h}x{w}, k={k}, stride={stride}, pad={pad}")

    xp = _pad_spatial(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (b, c_in, oh, ow, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c_in * k * k)
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out = cols @ w_mat.T + bias.data
    out = np.ascontiguousarray(out.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2))

    def backward(g: Array) -> None:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, c_out)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if weight.requires_grad:
            _accum(weight, (g2.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            dcols = (g2 @ w_mat).reshape(b, oh, ow, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                        :, :, :, :, ki, kj
                    ]
            _accum(x, dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

    return _op(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Per-window max with ceil-mode output ceil(in/stride).

    The implicit border padding is -inf, so border windows reduce over
    the real cells they cover.  Gradient routes to the first maximal
    element of each window.
    """
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("maxpool2d on empty spatial dims")
    oh = -(-h // stride)
    ow = -(-w // stride)
    need_h = (oh - 1) * stride + k
    need_w = (ow - 1) * stride + k
    xp = x.data
    if need_h > h or need_w > w:
        xp = np.full((b, c, need_h, need_w), -np.inf, dtype=np.float64)
        xp[:, :, :h, :w] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(b, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: Array) -> None:
        if not x.requires_grad:
            return
        if k == stride:
            # non-overlapping windows: pure reshapes, no scatter needed
            dwin = np.zeros((b, c, oh, ow, k * k), dtype=np.float64)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dxp = dwin.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * k, ow * k)
            _accum(x, dxp[:, :, :h, :w])
        else:
            dxp = np.zeros((b, c, max(need_h, h), max(need_w, w)), dtype=np.float64)
            bi, ci, oi, oj = np.indices(idx.shape)
            hi = oi * stride + idx // k
            wi = oj * stride + idx % k
            np.add.at(dxp, (bi, ci, hi, wi), g)
            _accum(x, dxp[:, :, :h, :w])

    return _op(out, (x,), backward)


# ---------------------------------------------------------------------------
# bilinear upsampling


@lru_cache(maxsize=64)
def _interp_matrix(n: int) -> Array:
    """Row-interpolation matrix (2n, n) for 2x upsampling, align-corners false."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = math.floor(src)
        t = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    m.flags.writeable = False
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Exact-2x bilinear upsampling; a fixed linear map, so backward is its transpose."""
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("bilinear_upsample2x on empty spatial dims")
    rh = _interp_matrix(h)
    rw = _interp_matrix(w)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, np.matmul(np.matmul(rh.T, g), rw))

    return _op(out, (x,), backward)


def crop_spatial(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Top-left aligned spatial crop; backward zero-pads."""
    b, c, h, w = x.shape
    if out_h > h or out_w > w:
        raise ValueError(f"crop {out_h}x{out_w} exceeds input {h}x{w}")
    out = x.data[:, :, :out_h, :out_w].copy()

    def backward(g: Array) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, :, :out_h, :out_w] = g
            _accum(x, full)

    return _op(out, (x,), backward)


# ---------------------------------------------------------------------------
# pooling to descriptors, fully-connected stacks, activations


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel; output shape (b, c, 1, 1)."""
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, np.broadcast_to(g / (h * w), x.data.shape).copy())

    return _op(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map per batch item; input is flattened to (b, c_in)."""
    b = x.shape[0]
    xin = x.data.reshape(b, -1)
    c_out, c_in = weight.shape
    if xin.shape[1] != c_in:
        raise ValueError(f"flattened input has {xin.shape[1]} features, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    out = xin @ weight.data.T + bias.data

    def backward(g: Array) -> None:
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if weight.requires_grad:
            _accum(weight, g.T @ xin)
        if x.requires_grad:
            _accum(x, (g @ weight.data).reshape(x.data.shape))

    return _op(out, (x, weight, bias), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the documented open range even where float64 saturates
    np.clip(out, 5e-324, 1.0 - 2.0**-53, out=out)

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g * out * (1.0 - out))

    return _op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _op(out, (x,), backward)


# ---------------------------------------------------------------------------
# concatenation, rescaling, arithmetic


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along one axis; backward splits by the input ranges."""
    if not tensors:
        raise ValueError("concat of zero tensors")
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ValueError(f"concat shape mismatch along axis {axis}: {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _op(out, tuple(tensors), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Channel concatenation of rank-4 maps sharing batch and spatial dims."""
    for t in tensors:
        if t.data.ndim != 4:
            raise ValueError("concat_channels expects rank-4 tensors")
    return concat(tensors, axis=1)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each channel of x by its (b, c, 1, 1) scale."""
    b, c, _, _ = x.shape
    if scale.shape != (b, c, 1, 1):
        raise ValueError(f"channel scale shape {scale.shape} != ({b}, {c}, 1, 1)")
    out = x.data * scale.data

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g * scale.data)
        if scale.requires_grad:
            _accum(scale, (g * x.data).sum(axis=(2, 3), keepdims=True))

    return _op(out, (x, scale), backward)


def scalar_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply every element of each batch item by its (b, 1, 1, 1) scalar."""
    b = x.shape[0]
    if scale.shape != (b, 1, 1, 1):
        raise ValueError(f"scalar scale shape {scale.shape} != ({b}, 1, 1, 1)")
    out = x.data * scale.data

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g * scale.data)
        if scale.requires_grad:
            _accum(scale, (g * x.data).sum(axis=(1, 2, 3), keepdims=True))

    return _op(out, (x, scale), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: Array) -> None:
        _accum(a, g)
        _accum(b, g)

    return _op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _op(out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _op(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _op(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g.transpose(inverse))

    return _op(out, (x,), backward)


# ---------------------------------------------------------------------------
# initialization and optimization


def xavier_init(
    shape: Sequence[int],
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator | int,
    name: str = "param",
) -> Parameter:
    """Uniform Glorot draw in +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(gen.uniform(-bound, bound, size=tuple(shape)), name=name)


def zeros_param(shape: Sequence[int], name: str) -> Parameter:
    return Parameter(np.zeros(tuple(shape)), name=name)


class SGD:
    """Momentum SGD with weight decay folded into the gradient.

    Per step: v <- momentum*v + grad + weight_decay*param, then
    param <- param - lr*v; gradients are zeroed afterwards.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(
    params: Sequence[Parameter],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Sequence[Array] | None = None,
) -> list[Array]:
    """One optimizer step as a free function; returns the updated velocities."""
    vel = [np.zeros_like(p.data) for p in params] if velocity is None else list(velocity)
    for p, v in zip(params, vel):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= lr * v
        p.grad = None
    return vel
