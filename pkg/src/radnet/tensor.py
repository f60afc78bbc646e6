"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable operation is a plain function that computes its forward
value eagerly and, when any input requires a gradient, attaches a closure that
maps the output gradient to input gradients. Nodes carry a monotonically
increasing id, so sorting the reachable nodes by id reproduces execution order
and :func:`backward` walks it in reverse.

Precision is a global engine mode: ``float32`` for training, ``float64`` for
gradient checking.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, GraphStateError, ShapeError, UsageError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = {"dtype": np.float32, "grad_enabled": True, "debug": False}
_ids = itertools.count()


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise UsageError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def set_debug(flag: bool) -> None:
    """In debug mode every forward result is checked for NaN/Inf."""
    _state["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_op", "_cleared")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = -1
        self._op = "leaf"
        self._cleared = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other)) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __getitem__(self, i: int):
        return index(self, i)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._cleared = False
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise DataError(f"non-finite values produced by {op}")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._id = next(_ids)
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._id = -1
        out._op = op
    return out


# ---------------------------------------------------------------------------
# creation


def create(
    shape: Sequence[int],
    fill: str = "zeros",
    *,
    value: float = 0.0,
    mean: float = 0.0,
    std: float = 1.0,
    seed: int | None = None,
    requires_grad: bool = False,
) -> Tensor:
    """Create a tensor filled with zeros, a constant, or seeded normal draws.

    ``fill`` is one of ``"zeros"``, ``"constant"`` (uses ``value``) or
    ``"normal"`` (uses ``mean``, ``std`` and a mandatory ``seed``).
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: dimensions must be >= 1")
    dtype = _state["dtype"]
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill == "normal":
        if seed is None:
            raise UsageError("seeded-normal fill needs a seed")
        # drawn in float64 then cast, so both precision modes share one stream
        draws = np.random.default_rng(seed).standard_normal(shape)
        data = (mean + std * draws).astype(dtype)
    else:
        raise UsageError(f"unknown fill {fill!r}")
    return Tensor(data, requires_grad=requires_grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_state["dtype"]), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                   lambda g: (np.full(shape, g, dtype=g.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    return scale(tensor_sum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def index(a: Tensor, i: int) -> Tensor:
    """Select ``a[i]`` along the leading axis."""
    n = a.shape[0]
    if not -n <= i < n:
        raise ShapeError(f"index {i} out of range for leading dim {n}")

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _result(a.data[i], (a,), grad_fn, "index")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Select ``a[..., start:stop]``."""

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), grad_fn, "slice_last")


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not xs:
        raise ShapeError("stack of an empty list")
    for x in xs[1:]:
        _same_shape(xs[0], x, "stack")
    n = len(xs)
    return _result(np.stack([x.data for x in xs]), tuple(xs),
                   lambda g: tuple(g[i] for i in range(n)), "stack")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs:
        if x.data.ndim != nd or any(x.shape[d] != xs[0].shape[d] for d in range(nd) if d != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes "
                             f"{[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def grad_fn(g):
        sl = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), grad_fn, "concat")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[B, C_i, H, W]`` tensors along the channel axis, in order."""
    for x in xs:
        if x.data.ndim != 4:
            raise ShapeError(f"concat_channels expects 4-D tensors, got {x.shape}")
    return concat(xs, axis=1)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim < 1 or x.shape[-1] < 2:
        raise ShapeError(f"softmax needs last dim >= 2, got shape {x.shape}")
    p = softmax_array(x.data)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), grad_fn, "softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "tanh":
        return tanh(x)
    raise UsageError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# dense algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def matmul_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x: [B, I]``, ``w: [I, O]``, ``b: [O]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul_affine: incompatible shapes {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"matmul_affine: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data

    def grad_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(xd @ wd + b.data, (x, w, b), grad_fn, "matmul_affine")


# ---------------------------------------------------------------------------
# convolution
#
# Both convolution flavours relate a "small" grid and a "big" grid through
# big = small * stride + tap_offset. For a strided conv the output is small;
# for a transposed conv the input is small. _span returns the matching slices.


def _span(n_small: int, n_big: int, stride: int, offset: int) -> tuple[slice, slice] | None:
    lo = max(0, -(offset // stride))
    last = n_big - 1 - offset
    if last < 0:
        return None
    hi = min(n_small, last // stride + 1)
    if hi <= lo:
        return None
    big = slice(lo * stride + offset, (hi - 1) * stride + offset + 1, stride)
    return slice(lo, hi), big


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of ``x: [B, C_in, H, W]`` with ``k: [C_out, C_in, kh, kw]``."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {k.shape}")
    B, C, H, W = x.shape
    O, C2, kh, kw = k.shape
    if C != C2:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {C2}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    Ho, Wo = _conv_out_size(H, kh, stride, padding), _conv_out_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output size {Ho}x{Wo} < 1 for input {H}x{W}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")

    xd, kd = x.data, k.data
    dtype = xd.dtype
    spans = [[(_span(Ho, H, stride, i - padding), _span(Wo, W, stride, j - padding))
              for j in range(kw)] for i in range(kh)]
    # Pick the cheaper intermediate: per-tap products at input resolution
    # (few output channels) or an im2col buffer at output resolution.
    tap_products = O * H * W <= C * Ho * Wo

    if tap_products:
        wall = kd.transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
        prod = np.matmul(wall, xd.reshape(B, C, H * W)).reshape(B, kh, kw, O, H, W)
        out = np.zeros((B, O, Ho, Wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                sy, sx = spans[i][j]
                if sy is None or sx is None:
                    continue
                out[:, :, sy[0], sx[0]] += prod[:, i, j, :, sy[1], sx[1]]
        del prod
    else:
        cols = np.zeros((B, kh, kw, C, Ho, Wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                sy, sx = spans[i][j]
                if sy is None or sx is None:
                    continue
                cols[:, i, j, :, sy[0], sx[0]] = xd[:, :, sy[1], sx[1]]
        wall = kd.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
        out = np.matmul(wall, cols.reshape(B, kh * kw * C, Ho * Wo)).reshape(B, O, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def grad_fn(g):
        if tap_products:
            # scatter the output gradient to every tap's input-resolution grid
            shifted = np.zeros((B, kh, kw, O, H, W), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    sy, sx = spans[i][j]
                    if sy is None or sx is None:
                        continue
                    shifted[:, i, j, :, sy[1], sx[1]] = g[:, :, sy[0], sx[0]]
            shifted = shifted.reshape(B, kh * kw * O, H * W)
            wall = kd.transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
            gx = np.matmul(wall.T, shifted).reshape(B, C, H, W)
            gw = np.matmul(shifted, xd.reshape(B, C, H * W).transpose(0, 2, 1)).sum(axis=0)
            gk = gw.reshape(kh, kw, O, C).transpose(2, 3, 0, 1)
        else:
            wall = kd.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
            g2 = g.reshape(B, O, Ho * Wo)
            gcols = np.matmul(wall.T, g2).reshape(B, kh, kw, C, Ho, Wo)
            gx = np.zeros((B, C, H, W), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    sy, sx = spans[i][j]
                    if sy is None or sx is None:
                        continue
                    gx[:, :, sy[1], sx[1]] += gcols[:, i, j, :, sy[0], sx[0]]
            gw = np.matmul(g2, cols.reshape(B, kh * kw * C, Ho * Wo).transpose(0, 2, 1)).sum(axis=0)
            gk = gw.reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        grads = [gx, np.ascontiguousarray(gk)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, k) if bias is None else (x, k, bias)
    return _result(out, parents, grad_fn, "conv2d")


UPSAMPLE_FACTORS = (2, 4, 8)


def conv_transpose2d(x: Tensor, k: Tensor, factor: int, bias: Tensor | None = None) -> Tensor:
    """Learnable upsampling by ``factor``.

    ``k`` has shape ``[C_in, C_out, 2f, 2f]``; stride ``f`` and padding ``f/2``
    make the output exactly ``f*h x f*w``.
    """
    if factor not in UPSAMPLE_FACTORS:
        raise ConfigError(f"unsupported upsampling factor {factor}; expected one of {UPSAMPLE_FACTORS}")
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape}, {k.shape}")
    B, C, h, w = x.shape
    C2, O, kh, kw = k.shape
    if C != C2:
        raise ShapeError(f"conv_transpose2d: input has {C} channels, kernel expects {C2}")
    if kh != 2 * factor or kw != 2 * factor:
        raise ShapeError(f"conv_transpose2d: factor {factor} needs a {2 * factor}x{2 * factor} kernel, "
                         f"got {kh}x{kw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({O},)")
    stride, padding = factor, factor // 2
    H, W = h * factor, w * factor
    xd, kd = x.data, k.data
    spans = [[(_span(h, H, stride, i - padding), _span(w, W, stride, j - padding))
              for j in range(kw)] for i in range(kh)]

    kall = kd.transpose(2, 3, 1, 0).reshape(kh * kw * O, C)
    prod = np.matmul(kall, xd.reshape(B, C, h * w)).reshape(B, kh, kw, O, h, w)
    out = np.zeros((B, O, H, W), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            sy, sx = spans[i][j]
            if sy is None or sx is None:
                continue
            out[:, :, sy[1], sx[1]] += prod[:, i, j, :, sy[0], sx[0]]
    del prod
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def grad_fn(g):
        gathered = np.zeros((B, kh, kw, O, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                sy, sx = spans[i][j]
                if sy is None or sx is None:
                    continue
                gathered[:, i, j, :, sy[0], sx[0]] = g[:, :, sy[1], sx[1]]
        gathered = gathered.reshape(B, kh * kw * O, h * w)
        gx = np.matmul(kall.T, gathered).reshape(B, C, h, w)
        gk = np.matmul(gathered, xd.reshape(B, C, h * w).transpose(0, 2, 1)).sum(axis=0)
        gk = np.ascontiguousarray(gk.reshape(kh, kw, O, C).transpose(3, 2, 0, 1))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, k) if bias is None else (x, k, bias)
    return _result(out, parents, grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# normalization and pooling


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over ``(B, H, W)``.

    In training mode ``running_mean`` / ``running_var`` are updated in place
    (unbiased variance, exponential moving average with ``momentum``).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({C},)")
    if eps <= 0:
        raise UsageError("batchnorm2d: eps must be positive")
    xd = x.data
    dtype = xd.dtype
    gd = gamma.data.reshape(1, C, 1, 1)
    bd = beta.data.reshape(1, C, 1, 1)

    if training:
        n = B * H * W
        if n < 2:
            raise ShapeError(f"batchnorm2d: degenerate batch (B*H*W = {n} < 2) in train mode")
        mu = np.einsum("bchw->c", xd) / dtype.type(n)
        centered = xd - mu.reshape(1, C, 1, 1)
        var = np.einsum("bchw,bchw->c", centered, centered) / dtype.type(n)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
        a = (gamma.data * inv_std).reshape(1, C, 1, 1)
        out = centered * a
        out += bd

        def grad_fn(g):
            gbeta = np.einsum("bchw->c", g)
            ggamma = np.einsum("bchw,bchw->c", g, centered) * inv_std
            a_c = gamma.data * inv_std
            gx = g * a
            gx += centered * (-a_c * inv_std * ggamma / n).reshape(1, C, 1, 1)
            gx += (-a_c * gbeta / n).reshape(1, C, 1, 1)
            return gx, ggamma, gbeta
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(dtype).reshape(1, C, 1, 1)
        xhat = (xd - running_mean.astype(dtype).reshape(1, C, 1, 1)) * inv_std
        out = xhat * gd + bd

        def grad_fn(g):
            return g * gd * inv_std, np.einsum("bchw,bchw->c", g, xhat), np.einsum("bchw->c", g)

    return _result(out.astype(dtype, copy=False), (x, gamma, beta), grad_fn, "batchnorm2d")


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2d needs even spatial dims, got {H}x{W}")
    xd = x.data
    out = xd.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    quarter = xd.dtype.type(0.25)

    def grad_fn(g):
        gx = np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3)
        return (gx,)

    return _result(out.astype(xd.dtype, copy=False), (x,), grad_fn, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: ``[B, C, H, W] -> [B, C]``."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    inv = x.data.dtype.type(1.0 / (H * W))

    def grad_fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (B, C, H, W)).copy(),)

    return _result(x.data.mean(axis=(2, 3)).astype(x.data.dtype, copy=False), (x,), grad_fn,
                   "global_avg_pool")


def pool2d(x: Tensor, kind: str) -> Tensor:
    if kind == "avg":
        return avg_pool2d(x)
    if kind == "global-avg":
        return global_avg_pool(x)
    raise UsageError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# losses


def _check_mask(mask: np.ndarray, n: int, op: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise ShapeError(f"{op}: mask shape {mask.shape} != ({n},)")
    if not np.all((mask == 0) | (mask == 1)):
        raise DataError(f"{op}: mask must be binary")
    return mask.astype(bool)


def loss_softmax_ce(logits: Tensor, labels, mask) -> Tensor:
    """Mean softmax cross-entropy over the unmasked rows; 0 if all rows are masked."""
    if logits.data.ndim != 2:
        raise ShapeError(f"loss_softmax_ce expects [B, classes] logits, got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError(f"loss_softmax_ce: labels shape {labels.shape} != ({B},)")
    if np.any(labels != np.round(labels)) or np.any((labels < 0) | (labels >= K)):
        raise DataError(f"loss_softmax_ce: labels must be integers in [0, {K})")
    labels = labels.astype(np.int64)
    keep = _check_mask(mask, B, "loss_softmax_ce")
    z = logits.data
    dtype = z.dtype
    count = int(keep.sum())
    if count == 0:
        return _result(np.zeros((), dtype=dtype), (logits,), lambda g: (np.zeros_like(z),), "loss_softmax_ce")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(B), labels]
    loss = np.asarray((nll * keep).sum() / count, dtype=dtype)

    def grad_fn(g):
        p = softmax_array(z)
        p[np.arange(B), labels] -= 1
        return ((p * (keep[:, None] * (g / count))).astype(dtype, copy=False),)

    return _result(loss, (logits,), grad_fn, "loss_softmax_ce")


def loss_bce_map(logits: Tensor, target, mask) -> Tensor:
    """Sigmoid + binary cross-entropy averaged over the pixels of unmasked slices."""
    if logits.data.ndim != 4 or logits.shape[1] != 1:
        raise ShapeError(f"loss_bce_map expects [B, 1, H, W] logits, got {logits.shape}")
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ShapeError(f"loss_bce_map: target shape {target.shape} != {logits.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise DataError("loss_bce_map: target must be binary")
    B = logits.shape[0]
    keep = _check_mask(mask, B, "loss_bce_map")
    z = logits.data
    dtype = z.dtype
    count = int(keep.sum())
    if count == 0:
        return _result(np.zeros((), dtype=dtype), (logits,), lambda g: (np.zeros_like(z),), "loss_bce_map")
    t = target.astype(dtype)
    denom = count * z[0].size
    # max(z, 0) - z*t + log(1 + exp(-|z|)) never overflows
    per_pixel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    weights = keep.astype(dtype).reshape(B, 1, 1, 1)
    loss = np.asarray((per_pixel * weights).sum() / denom, dtype=dtype)

    def grad_fn(g):
        return (((_sigmoid(z) - t) * weights * (g / denom)).astype(dtype, copy=False),)

    return _result(loss, (logits,), grad_fn, "loss_bce_map")


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._backward is None or id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph below ``loss`` is released afterwards; a second call raises
    :class:`GraphStateError`.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._cleared:
        raise GraphStateError("backward called twice: the graph was already cleared")
    if not loss.requires_grad:
        raise GraphStateError("loss is not attached to an active graph")
    seed = np.ones(loss.shape, dtype=loss.data.dtype)
    if loss._backward is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        loss._cleared = True
        return

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in _reachable(loss):
        g = pending.pop(id(node), None)
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    if parent._cleared:
                        continue
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
        node._parents = ()
        node._backward = None
        node._cleared = True


def grad_check(
    fn: Callable[..., Tensor],
    x0,
    eps: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``fn`` with central finite differences.

    ``x0`` is one array or a list of arrays; ``fn`` receives one Tensor per
    array and must return a scalar Tensor. Runs in 64-bit precision. Returns
    the max over coordinates of ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_coords`` only that many coordinates per input are probed, chosen by
    a seeded draw.
    """
    single = isinstance(x0, np.ndarray) or np.isscalar(x0)
    arrays = [np.array(x0, dtype=np.float64)] if single else [np.array(a, dtype=np.float64) for a in x0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision("float64"):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise UsageError("grad_check: fn must return a scalar Tensor")
        backward(out)
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        def evaluate(values: list[np.ndarray]) -> float:
            with no_grad():
                return float(fn(*[Tensor(v) for v in values]).data)

        for which, base in enumerate(arrays):
            coords = np.arange(base.size)
            if max_coords is not None and base.size > max_coords:
                coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
            for flat in coords:
                values = [a.copy() for a in arrays]
                target = values[which].reshape(-1)
                orig = target[flat]
                target[flat] = orig + eps
                f_plus = evaluate(values)
                target[flat] = orig - eps
                f_minus = evaluate(values)
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(analytic[which].reshape(-1)[flat])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
