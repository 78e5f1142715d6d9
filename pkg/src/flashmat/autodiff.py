"""Minimal reverse-mode autodiff over dense 4-D tensors.

Supplies exactly the operations the generator, discriminator and losses
need: elementwise arithmetic with broadcasting, convolutions (stride 1
or 2, kernel 1 or 3), nearest-neighbor upsampling, activations,
reductions, and a differentiable "input gradient of a convolution"
primitive used by the fused R1 penalty routine.

Tensors carry float32 data by default; float64 is available for
finite-difference validation, where float32 rounding would swamp the
comparison.  The tape is single-shot: calling backward twice on the
same root raises.
"""

from __future__ import annotations

import struct

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense 4-D array plus the bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ValueError(f"tensors are 4-D (got shape {arr.shape})")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=None):
        return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE),
                      requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.dtype, copy=True)
        else:
            self.grad += g

    # -- autograd driver ------------------------------------------------------

    def backward(self):
        """Reverse pass from this scalar; populates .grad on the graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self._done:
            raise RuntimeError("backward() already ran on this graph node")

        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue  # leaf parameters may feed many graphs
            if node._done:
                raise RuntimeError("graph node already consumed by a previous backward()")
            node._done = True
            if node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, power(other, -1.0))

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), float(x)), dtype=like.dtype)


def _make(data, parents, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires
    out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
    out._backward = backward_fn if out._parents else None
    out._done = False
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def backward_fn(g):
        a._accumulate(g * c)

    return _make(data, (a,), backward_fn)


def shift(a: Tensor, c: float) -> Tensor:
    data = a.data + c

    def backward_fn(g):
        a._accumulate(g)

    return _make(data, (a,), backward_fn)


def power(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def backward_fn(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward_fn)


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    data = np.sqrt(a.data + eps)

    def backward_fn(g):
        a._accumulate(g * 0.5 / np.maximum(data, 1e-12))

    return _make(data, (a,), backward_fn)


def maximum_const(a: Tensor, c: float) -> Tensor:
    """max(a, c) with the subgradient convention grad=0 where a < c."""
    mask = a.data >= c
    data = np.where(mask, a.data, c)

    def backward_fn(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward_fn)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, a.data * slope)

    def backward_fn(g):
        a._accumulate(g * np.where(mask, 1.0, slope))

    return _make(data, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward_fn(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward_fn)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = a.data
    data = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))),
                    np.log1p(np.exp(-np.abs(x))))

    def backward_fn(g):
        e = np.exp(-np.abs(x))
        a._accumulate(g * np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))

    return _make(data, (a,), backward_fn)


# -- reductions and shape ops ------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum().reshape(1, 1, 1, 1)

    def backward_fn(g):
        a._accumulate(np.broadcast_to(g.reshape(()), a.shape))

    return _make(data, (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = (a.data.sum() / n).reshape(1, 1, 1, 1)

    def backward_fn(g):
        a._accumulate(np.broadcast_to(g.reshape(()) / n, a.shape))

    return _make(data, (a,), backward_fn)


def sum_axes(a: Tensor, axes: tuple) -> Tensor:
    data = a.data.sum(axis=axes, keepdims=True)

    def backward_fn(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward_fn)


def mean_axes(a: Tensor, axes: tuple) -> Tensor:
    n = int(np.prod([a.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axes, keepdims=True)

    def backward_fn(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(data, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if len(shape) != 4:
        raise ValueError("reshape target must be 4-D")
    data = a.data.reshape(shape)

    def backward_fn(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward_fn)


def concat_channels(parts: list) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def backward_fn(g):
        start = 0
        for p, c in zip(parts, sizes):
            if p.requires_grad or p._parents:
                p._accumulate(g[:, start:start + c])
            start += c

    return _make(data, tuple(parts), backward_fn)


def concat_batch(parts: list) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward_fn(g):
        start = 0
        for p, b in zip(parts, sizes):
            if p.requires_grad or p._parents:
                p._accumulate(g[start:start + b])
            start += b

    return _make(data, tuple(parts), backward_fn)


def broadcast_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a batch-1 tensor n times along the batch axis."""
    if a.shape[0] != 1:
        raise ValueError("broadcast_batch expects batch size 1")
    data = np.broadcast_to(a.data, (n,) + a.shape[1:]).copy()

    def backward_fn(g):
        a._accumulate(g.sum(axis=0, keepdims=True))

    return _make(data, (a,), backward_fn)


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[start:stop].copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    return _make(data, (a,), backward_fn)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[:, start:stop].copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _make(data, (a,), backward_fn)


# -- spatial ops -------------------------------------------------------------


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x; gradient is the 2x2 block sum."""
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g):
        b, c, h, w = a.shape
        a._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, (a,), backward_fn)


def _check_conv_shapes(x_shape, w_shape):
    if x_shape[1] != w_shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x_shape[1]} channels, "
            f"kernel expects {w_shape[1]}")
    if w_shape[2] != w_shape[3] or w_shape[2] not in (1, 3):
        raise ValueError(f"conv2d kernels must be 1x1 or 3x3, got {w_shape[2:]}")


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # (b,i,h,w,k,l) x (o,i,k,l) -> (b,h,w,o); tensordot dispatches to BLAS
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(y, 3, 1)), win


def _conv_dw(win: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # (b,i,h,w,k,l) x (b,o,h,w) -> (i,k,l,o)
    g = np.tensordot(win, dy, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(g, 3, 0))


def _conv_dx(dy: np.ndarray, w: np.ndarray, x_shape, stride: int,
             padding: int) -> np.ndarray:
    b, ci, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros((b, ci, hp, wp), dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            # (b,o,h,w) x (o,i) -> (b,h,w,i)
            contrib = np.tensordot(dy, w[:, :, ki, kj], axes=([1], [0]))
            dxp[:, :, ki:ki + stride * ho:stride,
                kj:kj + stride * wo:stride] += np.moveaxis(contrib, 3, 1)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation with optional per-output-channel bias.

    Kernels are 1x1 or 3x3; padding defaults to "same" for stride 1.
    """
    _check_conv_shapes(x.shape, w.shape)
    if padding is None:
        padding = w.shape[2] // 2
    data, win = _conv_forward(x.data, w.data, stride, padding)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward_fn(g):
        if x.requires_grad or x._parents:
            x._accumulate(_conv_dx(g, w.data, x.shape, stride, padding))
        if w.requires_grad or w._parents:
            w._accumulate(_conv_dw(win, g))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(bias.shape))

    return _make(data, parents, backward_fn)


def conv2d_input_grad(dy: Tensor, w: Tensor, x_shape, stride: int = 1,
                      padding: int | None = None) -> Tensor:
    """The gradient-of-conv-input computation as a first-class
    differentiable op.

    Forward output equals d(conv2d(x, w))/dx contracted with dy; used to
    express an unrolled backward pass on the tape (see the R1 routine).
    """
    if padding is None:
        padding = w.shape[2] // 2
    data = _conv_dx(dy.data, w.data, x_shape, stride, padding)

    def backward_fn(g):
        # g has the shape of x; the op is bilinear in (dy, w).
        if dy.requires_grad or dy._parents:
            y, _ = _conv_forward(g, w.data, stride, padding)
            dy._accumulate(y)
        if w.requires_grad or w._parents:
            if padding:
                gp = np.pad(g, ((0, 0), (0, 0), (padding, padding),
                                (padding, padding)))
            else:
                gp = g
            kh, kw = w.shape[2], w.shape[3]
            win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw),
                                                           axis=(2, 3))
            win = win[:, :, ::stride, ::stride]
            w._accumulate(_conv_dw(win, dy.data))

    return _make(data, (dy, w), backward_fn)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected layer on (B, C, 1, 1) vectors; w is (O, C, 1, 1)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"linear feature mismatch: input has {x.shape[1]}, "
            f"weight expects {w.shape[1]}")
    x2 = x.data.reshape(x.shape[0], x.shape[1])
    w2 = w.data.reshape(w.shape[0], w.shape[1])
    data = (x2 @ w2.T).reshape(x.shape[0], w.shape[0], 1, 1)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward_fn(g):
        g2 = g.reshape(g.shape[0], g.shape[1])
        if x.requires_grad or x._parents:
            x._accumulate((g2 @ w2).reshape(x.shape))
        if w.requires_grad or w._parents:
            w._accumulate((g2.T @ x2).reshape(w.shape))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g2.sum(axis=0).reshape(bias.shape))

    return _make(data, parents, backward_fn)


# -- composites used by the generator ---------------------------------------


def normalize_2nd_moment(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each latent vector by sqrt(mean of squares + eps)."""
    ms = mean_axes(mul(x, x), (1,))
    return mul(x, power(sqrt(ms, eps), -1.0))


def modulated_conv2d(x: Tensor, w: Tensor, style: Tensor,
                     demodulate: bool = True, eps: float = 1e-8) -> Tensor:
    """Style-modulated convolution with optional demodulation.

    Kernel weights are scaled per input channel by `style`
    ((1, I, 1, 1)); with demodulation each output filter is rescaled to
    unit L2 norm before the standard convolution.  Batch size 1 only.
    """
    if x.shape[0] != 1:
        raise ValueError("modulated_conv2d supports batch size 1")
    if style.shape[1] != w.shape[1]:
        raise ValueError(
            f"style length {style.shape[1]} does not match kernel input "
            f"channels {w.shape[1]}")
    scaled = mul(w, reshape(style, (1, style.shape[1], 1, 1)))
    if demodulate:
        norm2 = sum_axes(mul(scaled, scaled), (1, 2, 3))
        scaled = mul(scaled, power(sqrt(norm2, eps), -1.0))
    return conv2d(x, scaled)


def add_noise(x: Tensor, noise_map: Tensor, gain: Tensor) -> Tensor:
    """x + gain * noise_map, the map broadcast over feature channels."""
    if noise_map.shape[2:] != x.shape[2:]:
        raise ValueError(
            f"noise map {noise_map.shape[2:]} does not match feature "
            f"resolution {x.shape[2:]}")
    return add(x, mul(noise_map, gain))


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Standard bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict:
        """Optimizer state as named arrays, for checkpointing."""
        out = {"adam_t": np.array([self.t], dtype=np.float64)}
        for i in range(len(self.params)):
            out[f"adam_m_{i}"] = self.m[i]
            out[f"adam_v_{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict):
        self.t = int(arrays["adam_t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"adam_m_{i}"].astype(self.params[i].dtype)
            self.v[i] = arrays[f"adam_v_{i}"].astype(self.params[i].dtype)


# -- named-tensor container --------------------------------------------------

_MAGIC = b"FMNT"
_DTYPE_TAGS = {0: np.float32, 1: np.float64}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensors(path, arrays: dict):
    """Write named arrays to a flat binary container.

    Layout: magic, count, then per entry: name length + utf-8 name,
    dtype tag, ndim, extents, raw little-endian data.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _TAG_OF:
                arr = arr.astype(np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _TAG_OF[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> dict:
    """Read a container written by save_tensors."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a named-tensor container")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
            n_bytes = int(np.prod(shape)) * dtype.itemsize
            arr = np.frombuffer(fh.read(n_bytes), dtype=dtype).reshape(shape)
            out[name] = arr.astype(_DTYPE_TAGS[tag])
    return out
