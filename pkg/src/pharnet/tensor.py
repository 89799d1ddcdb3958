"""Dense NCHW tensors with tape-based reverse-mode autodiff.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over raw arrays and a ``backward`` returning one gradient per
tensor input. ``Function.apply`` records the node on the output tensor; the
graph is the set of nodes reachable from a loss and is released after
:meth:`Tensor.backward`.

Values are float32 by default. Operations preserve the dtype of their inputs
so the gradient checker can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

MOMENT_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph."""


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, (np.ndarray, np.floating)) and value.dtype in (np.float32, np.float64):
        arr = np.asarray(value) if dtype is None else np.asarray(value).astype(dtype, copy=False)
    else:
        arr = np.asarray(value, dtype=dtype or np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are folded into the op rather than promoted
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other):
        return AddScalar.apply(MulScalar.apply(self, value=-1.0), value=float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else MulScalar.apply(self, value=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else MulScalar.apply(self, value=1.0 / float(other))

    def __neg__(self):
        return MulScalar.apply(self, value=-1.0)

    def backward(self) -> None:
        backward(self)


class _Node:
    __slots__ = ("fn", "ctx", "inputs")

    def __init__(self, fn, ctx, inputs):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs


class Context:
    """Scratch space shared between a forward and its backward."""

    def save(self, **kwargs) -> None:
        self.__dict__.update(kwargs)


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


_branch_log: list[np.ndarray] | None = None
_branch_pins: Iterator[np.ndarray] | None = None


def _branch(pattern: np.ndarray) -> np.ndarray:
    """Nonsmooth ops route their branch pattern through here.

    Patterns are recorded for ``grad_check``; while pinned, the recorded
    pattern of a reference pass replaces the computed one.
    """
    if _branch_pins is not None:
        pinned = next(_branch_pins, None)
        if pinned is None or pinned.shape != pattern.shape:
            raise RuntimeError("pinned branch patterns do not match this evaluation")
        pattern = pinned
    if _branch_log is not None:
        _branch_log.append(pattern)
    return pattern


class _recording_branches:
    def __enter__(self) -> list[np.ndarray]:
        global _branch_log
        self._prev = _branch_log
        _branch_log = []
        return _branch_log

    def __exit__(self, *exc):
        global _branch_log
        _branch_log = self._prev


class _pinned_branches:
    def __init__(self, patterns: list[np.ndarray]):
        self.patterns = patterns

    def __enter__(self):
        global _branch_pins
        self._prev = _branch_pins
        _branch_pins = iter(self.patterns)

    def __exit__(self, *exc):
        global _branch_pins
        _branch_pins = self._prev


class Function:
    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in inputs), **kwargs)
        needs = _grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs)
        if needs:
            ctx.needs_input_grad = tuple(t.requires_grad for t in inputs)
            result._node = _Node(cls, ctx, inputs)
        return result


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent, needed in zip(t._node.inputs, t._node.ctx.needs_input_grad):
                if needed and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls; the recorded graph is released.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.fn.backward(node.ctx, g)
        # requires_grad as recorded at forward time: freezing is scoped to the forward pass
        for parent, pg, needed in zip(node.inputs, in_grads, node.ctx.needs_input_grad):
            if pg is None or not needed:
                continue
            if pg.shape != parent.shape:
                raise GraphError(
                    f"{node.fn.__name__}.backward produced grad {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        t._node = None


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_kind(a: tuple, b: tuple) -> str:
    """Classify an operand pair; only three broadcast patterns are legal."""
    if a == b:
        return "same"
    if len(a) == 4 and len(b) == 4 and a[0] == b[0] and a[2:] == b[2:] and 1 in (a[1], b[1]):
        return "mask"
    if len(a) == 4 and len(b) == 2 and a[:2] == b:
        return "stats_b"
    if len(b) == 4 and len(a) == 2 and b[:2] == a:
        return "stats_a"
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _expand(x: np.ndarray, kind: str, which: str) -> np.ndarray:
    if (kind == "stats_b" and which == "b") or (kind == "stats_a" and which == "a"):
        return x.reshape(x.shape + (1, 1))
    return x


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 2:
        return grad.sum(axis=(2, 3))
    return grad.sum(axis=1, keepdims=True)


class _Binary(Function):
    @classmethod
    def apply(cls, a: Tensor, b: Tensor) -> Tensor:
        kind = _broadcast_kind(a.shape, b.shape)
        return super().apply(a, b, kind=kind)


class Add(_Binary):
    @staticmethod
    def forward(ctx, a, b, kind):
        ctx.save(sa=a.shape, sb=b.shape)
        return _expand(a, kind, "a") + _expand(b, kind, "b")

    @staticmethod
    def backward(ctx, g):
        return _reduce_to(g, ctx.sa), _reduce_to(g, ctx.sb)


class Sub(_Binary):
    @staticmethod
    def forward(ctx, a, b, kind):
        ctx.save(sa=a.shape, sb=b.shape)
        return _expand(a, kind, "a") - _expand(b, kind, "b")

    @staticmethod
    def backward(ctx, g):
        return _reduce_to(g, ctx.sa), _reduce_to(-g, ctx.sb)


class Mul(_Binary):
    @staticmethod
    def forward(ctx, a, b, kind):
        ea, eb = _expand(a, kind, "a"), _expand(b, kind, "b")
        ctx.save(ea=ea, eb=eb, sa=a.shape, sb=b.shape)
        return ea * eb

    @staticmethod
    def backward(ctx, g):
        return _reduce_to(g * ctx.eb, ctx.sa), _reduce_to(g * ctx.ea, ctx.sb)


class Div(_Binary):
    @staticmethod
    def forward(ctx, a, b, kind):
        ea, eb = _expand(a, kind, "a"), _expand(b, kind, "b")
        ctx.save(ea=ea, eb=eb, sa=a.shape, sb=b.shape)
        return ea / eb

    @staticmethod
    def backward(ctx, g):
        ga = g / ctx.eb
        gb = -g * ctx.ea / (ctx.eb * ctx.eb)
        return _reduce_to(ga, ctx.sa), _reduce_to(gb, ctx.sb)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


class AddScalar(Function):
    @staticmethod
    def forward(ctx, x, value):
        return x + x.dtype.type(value)

    @staticmethod
    def backward(ctx, g):
        return (g,)


class MulScalar(Function):
    @staticmethod
    def forward(ctx, x, value):
        ctx.save(value=value)
        return x * x.dtype.type(value)

    @staticmethod
    def backward(ctx, g):
        return (g * g.dtype.type(ctx.value),)


class Sum(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(shape=x.shape)
        return np.asarray(x.sum(), dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (np.full(ctx.shape, g, dtype=g.dtype),)


class Mean(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(shape=x.shape, n=x.size)
        return np.asarray(x.mean(), dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (np.full(ctx.shape, g / ctx.n, dtype=g.dtype),)


class Square(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x=x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        return (2 * g * ctx.x,)


class MSE(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
        d = a - b
        ctx.save(d=d)
        return np.asarray(np.mean(d * d), dtype=a.dtype)

    @staticmethod
    def backward(ctx, g):
        ga = (2.0 / ctx.d.size) * g * ctx.d
        return ga, -ga


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name on purpose
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def mse(a: Tensor, b: Tensor | float) -> Tensor:
    """Mean of squared differences; a float ``b`` is a constant target."""
    if not isinstance(b, Tensor):
        b = Tensor(np.full(a.shape, b, dtype=a.dtype))
    return MSE.apply(a, b)


# ---------------------------------------------------------------------------
# activations


class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        computed = x > 0
        mask = _branch(computed)
        ctx.save(mask=mask)
        if mask is not computed:
            return np.where(mask, x, x.dtype.type(0))
        return np.maximum(x, x.dtype.type(0))  # propagates NaN, unlike a select

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx.mask, g, g.dtype.type(0)),)


class LeakyReLU(Function):
    @staticmethod
    def forward(ctx, x, slope):
        mask = _branch(x > 0)
        ctx.save(mask=mask, slope=slope)
        return np.where(mask, x, x * x.dtype.type(slope))

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx.mask, g, g * g.dtype.type(ctx.slope)),)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        s = ctx.out
        return (g * s * (1 - s),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# spatial ops


def _check4(x: np.ndarray, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects NCHW input, got shape {x.shape}")


class Pad2d(Function):
    @staticmethod
    def forward(ctx, x, pad, mode):
        _check4(x, "pad2d")
        if mode == "reflect" and pad >= min(x.shape[2], x.shape[3]):
            raise ShapeError(
                f"reflect padding {pad} needs spatial extent > pad, got {x.shape[2]}x{x.shape[3]}"
            )
        ctx.save(pad=pad, mode=mode, shape=x.shape)
        np_mode = "constant" if mode == "zero" else "reflect"
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)

    @staticmethod
    def backward(ctx, g):
        p = ctx.pad
        _, _, h, w = ctx.shape
        if ctx.mode == "zero":
            return (np.ascontiguousarray(g[:, :, p : p + h, p : p + w]),)
        # fold mirrored borders back onto their sources (rows, then columns)
        g = g.copy()
        for i in range(p):
            g[:, :, 2 * p - i, :] += g[:, :, i, :]
            g[:, :, p + h - 2 - (p - 1 - i), :] += g[:, :, p + h + (p - 1 - i), :]
        g = g[:, :, p : p + h, :]
        for j in range(p):
            g[:, :, :, 2 * p - j] += g[:, :, :, j]
            g[:, :, :, p + w - 2 - (p - 1 - j)] += g[:, :, :, p + w + (p - 1 - j)]
        return (np.ascontiguousarray(g[:, :, :, p : p + w]),)


def pad2d(x: Tensor, pad: int, mode: str = "zero") -> Tensor:
    if mode not in ("zero", "reflect"):
        raise ValueError(f"pad mode must be 'zero' or 'reflect', got {mode!r}")
    if pad == 0:
        return x
    return Pad2d.apply(x, pad=pad, mode=mode)


class Conv2dRaw(Function):
    """Unpadded cross-correlation via im2col and batched matrix products.

    Columns are laid out ``[N, Cin*kh*kw, Ho*Wo]`` so the product with the
    ``[Cout, Cin*kh*kw]`` weight matrix is already NCHW.
    """

    @staticmethod
    def forward(ctx, x, w, b, stride):
        n, c, h, wd = x.shape
        cout, cin, kh, kw = w.shape
        if c != cin:
            raise ShapeError(f"conv2d channel mismatch: input C={c}, weight Cin={cin}")
        if h < kh or wd < kw:
            raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")
        s = stride
        ho, wo = (h - kh) // s + 1, (wd - kw) // s + 1
        cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = x[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
        cols = cols.reshape(n, cin * kh * kw, ho * wo)
        wmat = w.reshape(cout, -1)
        out = np.matmul(wmat, cols)
        out += b[None, :, None]
        ctx.save(cols=cols, wmat=wmat, xshape=x.shape, wshape=w.shape, stride=s, ho=ho, wo=wo)
        return out.reshape(n, cout, ho, wo)

    @staticmethod
    def backward(ctx, g):
        n, c, h, wd = ctx.xshape
        cout, cin, kh, kw = ctx.wshape
        s, ho, wo = ctx.stride, ctx.ho, ctx.wo
        gmat = g.reshape(n, cout, ho * wo)
        gw = gb = gx = None
        if ctx.needs_input_grad[1]:
            acc = np.zeros((cout, cin * kh * kw), dtype=g.dtype)
            for k in range(n):
                acc += gmat[k] @ ctx.cols[k].T
            gw = acc.reshape(ctx.wshape)
        if ctx.needs_input_grad[2]:
            gb = gmat.sum(axis=(0, 2))
        if ctx.needs_input_grad[0]:
            dcols = np.matmul(ctx.wmat.T, gmat).reshape(n, cin, kh, kw, ho, wo)
            gx = np.zeros(ctx.xshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
        return gx, gw, gb


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zero",
) -> Tensor:
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid conv2d geometry stride={stride} padding={padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input C={x.shape[1]}, weight Cin={weight.shape[1]}")
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0], dtype=weight.dtype))
    elif bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match Cout={weight.shape[0]}")
    return Conv2dRaw.apply(pad2d(x, padding, pad_mode), weight, bias, stride=stride)


class BatchNorm2dFn(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, mean, var, eps, batch_stats):
        invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        ctx.save(xhat=xhat, invstd=invstd, gamma=gamma, batch_stats=batch_stats)
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    @staticmethod
    def backward(ctx, g):
        xhat = ctx.xhat
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * ctx.gamma[None, :, None, None]
        inv = ctx.invstd[None, :, None, None]
        if ctx.batch_stats:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the batch statistics are used and, when ``update_stats``
    is set, the running buffers are updated in place by exponential moving
    average (unbiased variance, as in common frameworks).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d parameters must have length C={c}, got {gamma.shape}/{beta.shape}")
    if training:
        mean_ = x.data.mean(axis=(0, 2, 3))
        var_ = x.data.var(axis=(0, 2, 3))
        if update_stats and running_mean is not None:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var_ * (m / (m - 1)) if m > 1 else var_
            running_mean *= 1 - momentum
            running_mean += momentum * mean_
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None:
            raise GraphError("eval-mode batchnorm needs running statistics")
        mean_ = running_mean.astype(x.dtype, copy=False)
        var_ = running_var.astype(x.dtype, copy=False)
    return BatchNorm2dFn.apply(x, gamma, beta, mean=mean_, var=var_, eps=eps, batch_stats=training)


class UpsampleNearest(Function):
    @staticmethod
    def forward(ctx, x, scale):
        _check4(x, "upsample_nearest")
        ctx.save(scale=scale)
        return np.repeat(np.repeat(x, scale, axis=2), scale, axis=3)

    @staticmethod
    def backward(ctx, g):
        s = ctx.scale
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5)),)


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    if scale < 1:
        raise ShapeError(f"upsample scale must be positive, got {scale}")
    if scale == 1:
        return x
    return UpsampleNearest.apply(x, scale=scale)


class MaxPool2(Function):
    @staticmethod
    def forward(ctx, x):
        _check4(x, "maxpool2d")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 max-pool needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = _branch(blocks.argmax(axis=-1))
        ctx.save(idx=idx, shape=x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        n, c, h, w = ctx.shape
        blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(blocks, ctx.idx[..., None], g[..., None], axis=-1)
        out = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (out,)


class AvgPool2(Function):
    @staticmethod
    def forward(ctx, x):
        _check4(x, "avgpool2d")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 average pool needs even spatial dims, got {h}x{w}")
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    @staticmethod
    def backward(ctx, g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25),)


def maxpool2d(x: Tensor) -> Tensor:
    return MaxPool2.apply(x)


def avgpool2d(x: Tensor) -> Tensor:
    return AvgPool2.apply(x)


class Concat(Function):
    @staticmethod
    def forward(ctx, *xs):
        ctx.save(sizes=[x.shape[1] for x in xs])
        return np.concatenate(xs, axis=1)

    @staticmethod
    def backward(ctx, g):
        bounds = np.cumsum([0] + ctx.sizes)
        return tuple(np.ascontiguousarray(g[:, a:b]) for a, b in zip(bounds[:-1], bounds[1:]))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Channel-wise concatenation of NCHW tensors."""
    first = xs[0].shape
    for x in xs[1:]:
        if x.ndim != 4 or x.shape[0] != first[0] or x.shape[2:] != first[2:]:
            raise ShapeError(f"concat needs matching N,H,W: {first} vs {x.shape}")
    return Concat.apply(*xs)


class Crop(Function):
    @staticmethod
    def forward(ctx, x, top, left, height, width):
        ctx.save(shape=x.shape, top=top, left=left)
        return np.ascontiguousarray(x[:, :, top : top + height, left : left + width])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        out[:, :, ctx.top : ctx.top + g.shape[2], ctx.left : ctx.left + g.shape[3]] = g
        return (out,)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    _check4(x.data, "crop")
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(f"crop window ({top},{left},{height},{width}) outside {x.shape}")
    return Crop.apply(x, top=top, left=left, height=height, width=width)


# ---------------------------------------------------------------------------
# masked channel statistics


def _mask_counts(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != x.shape[0] or m.shape[2:] != x.shape[2:]:
        raise ShapeError(f"mask shape {m.shape} does not match feature {x.shape} as [N,1,H,W]")
    counts = m.sum(axis=(1, 2, 3))
    if np.any(counts <= 0):
        empty = [int(i) for i in np.flatnonzero(counts <= 0)]
        raise ShapeError(f"empty mask for batch items {empty}")
    return counts


class MaskedMean(Function):
    @staticmethod
    def forward(ctx, x, m):
        counts = _mask_counts(x, m).astype(x.dtype)
        ctx.save(m=m, counts=counts)
        return (x * m).sum(axis=(2, 3)) / counts[:, None]

    @staticmethod
    def backward(ctx, g):
        return (g[:, :, None, None] * ctx.m / ctx.counts[:, None, None, None]).astype(g.dtype), None


class MaskedStd(Function):
    @staticmethod
    def forward(ctx, x, m, eps):
        counts = _mask_counts(x, m).astype(x.dtype)
        mu = (x * m).sum(axis=(2, 3)) / counts[:, None]
        centered = (x - mu[:, :, None, None]) * m
        var = (centered * centered).sum(axis=(2, 3)) / counts[:, None]
        std = np.sqrt(var + x.dtype.type(eps))
        ctx.save(centered=centered, counts=counts, std=std)
        return std

    @staticmethod
    def backward(ctx, g):
        # d std / dx = m (x - mu) / (count * std); the mean term cancels
        scale = g / (ctx.std * ctx.counts[:, None])
        return (ctx.centered * scale[:, :, None, None]).astype(g.dtype), None


def masked_moments(feature: Tensor, mask: Tensor | None = None, eps: float = MOMENT_EPS) -> tuple[Tensor, Tensor]:
    """Per-(batch, channel) mean and stabilized population std over mask=1 pixels.

    ``mask=None`` means the whole spatial map. Returns two ``[N, C]`` tensors;
    the std is ``sqrt(var + eps)``.
    """
    if feature.ndim != 4:
        raise ShapeError(f"masked_moments expects NCHW feature, got {feature.shape}")
    if mask is None:
        n, _, h, w = feature.shape
        mask = Tensor(np.ones((n, 1, h, w), dtype=feature.dtype))
    elif mask.dtype != feature.dtype:
        mask = Tensor(mask.data.astype(feature.dtype))
    return MaskedMean.apply(feature, mask), MaskedStd.apply(feature, mask, eps=eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_error: float
    probes: int
    pinned: int  # probes that crossed a kink and were re-evaluated with branches pinned


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_detailed(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-6,
    indices: dict[int, np.ndarray] | None = None,
) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``f`` maps the input tensors to a scalar. Every element of every input
    that requires grad is probed unless ``indices`` restricts input ``k`` to a
    set of flat positions. The relative error of one element is
    ``|a - n| / max(|a|, |n|, floor)``.

    A central difference is only meaningful when ``f`` is smooth on
    ``[x - h, x + h]``. ReLU, leaky ReLU and max-pool report their branch
    pattern. When a perturbed evaluation changes any of them, the probe is
    repeated with the unperturbed patterns pinned: that function is smooth
    around ``x`` and its derivative there is exactly what backward computes.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    probes = pinned = 0

    def evaluate():
        with _recording_branches() as log:
            value = float(f(*inputs).data)
        return value, list(log)

    def evaluate_pinned(base):
        with _pinned_branches(base):
            return float(f(*inputs).data)

    with no_grad():
        _, base = evaluate()
        for k, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            probe = range(flat.size) if indices is None or k not in indices else indices[k]
            ga = analytic[k].reshape(-1) if analytic[k] is not None else np.zeros_like(flat)
            for i in probe:
                probes += 1
                orig = flat[i]
                flat[i] = orig + h
                fp, bp = evaluate()
                flat[i] = orig - h
                fm, bm = evaluate()
                if not (_same_branches(bp, base) and _same_branches(bm, base)):
                    pinned += 1
                    fm = evaluate_pinned(base)
                    flat[i] = orig + h
                    fp = evaluate_pinned(base)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(ga[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return GradCheckResult(worst, probes, pinned)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-6,
    indices: dict[int, np.ndarray] | None = None,
) -> float:
    """Max relative error of :func:`grad_check_detailed`."""
    return grad_check_detailed(f, inputs, h, floor, indices).max_error
