"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Operations on tensors that require
gradients record their inputs and a closure that maps the output gradient to
input gradients; :func:`backward` walks that graph in reverse topological
order. Only leaf tensors (parameters and inputs created with
``requires_grad=True``) keep a ``.grad`` after the pass.

Everything is float32 unless a caller explicitly builds float64 tensors (the
gradient checks do this to keep finite differences meaningful).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = b

        def bw_scalar(g):
            return (g * s,)

        return _make(a.data * np.asarray(s, dtype=a.dtype), (a,), bw_scalar)
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # logistic sigmoid without overflow
    out = x.data * s

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing. Advanced indexing is not supported."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


def mse(a, b) -> Tensor:
    """Mean squared error, returned as a 0-d tensor."""
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _make(np.asarray(np.mean(diff * diff), dtype=a.dtype), (a, b), bw)


# ---------------------------------------------------------------------------
# channel plumbing


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW inputs, got {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    if x.data.ndim != 4:
        raise ShapeError(f"split_channels expects NCHW input, got {x.shape}")
    if not 0 < at < x.shape[1]:
        raise ShapeError(f"split point {at} outside channel range (0, {x.shape[1]})")
    return getitem(x, (slice(None), slice(0, at))), getitem(x, (slice(None), slice(at, None)))


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def avgpool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = np.broadcast_to(g[:, :, :, None, :, None] * 0.25, (n, c, h // 2, 2, w // 2, 2))
        return (np.ascontiguousarray(g4.reshape(n, c, h, w)).astype(x.dtype, copy=False),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw)


def space_to_depth(x: Tensor, f: int) -> Tensor:
    """N×C×H×W -> N×(C·f·f)×(H/f)×(W/f); output channel = c·f² + i·f + j."""
    n, c, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"space_to_depth needs dims divisible by {f}, got {h}x{w}")
    out = x.data.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * f * f, h // f, w // f)

    def bw(g):
        g6 = g.reshape(n, c, f, f, h // f, w // f).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(g6).reshape(n, c, h, w),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def depth_to_space(x: Tensor, f: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    n, cf, h, w = x.shape
    if cf % (f * f):
        raise ShapeError(f"depth_to_space needs channels divisible by {f * f}, got {cf}")
    c = cf // (f * f)
    out = x.data.reshape(n, c, f, f, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * f, w * f)

    def bw(g):
        g6 = g.reshape(n, c, h, f, w, f).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(g6).reshape(n, cf, h, w),)

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape} (expects N×F and G×F)")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match output features {weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids must lie in [0, {table.shape[0]}), got {ids.min()}..{ids.max()}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def _im2col(xh: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Channels-last input -> (n*ho*wo, k*k*c) patch matrix, columns ordered (kh, kw, c)."""
    n, _, _, c = xh.shape
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if k == 1 and stride == 1:
        return np.ascontiguousarray(xh).reshape(n * ho * wo, c)
    win = np.lib.stride_tricks.sliding_window_view(xh, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with an OIKK kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be O×I×K×K, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, i, k, _ = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i} (input {x.shape}, weight {weight.shape})")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k} with padding {padding}")

    xh = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xh, k, stride, padding, ho, wo)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gh = g.transpose(0, 2, 3, 1)
        gmat = np.ascontiguousarray(gh).reshape(n * ho * wo, o)
        gw = np.ascontiguousarray((gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        if k == 1 and stride == 1:
            gxh = (gmat @ wmat).reshape(n, h, w, c)
        elif stride == 1:
            # input gradient = correlation of the padded output gradient with the rotated kernel
            wrot = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0)).reshape(c, k * k * o)
            q = k - 1 - padding
            gxh = (_im2col(gh, k, 1, q, h, w) @ wrot.T).reshape(n, h, w, c)
        else:
            taps = np.ascontiguousarray((gmat @ wmat).reshape(n, ho, wo, k, k, c).transpose(3, 4, 0, 1, 2, 5))
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((n, hp, wp, c), dtype=x.dtype)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += taps[di, dj]
            gxh = gxp[:, padding : padding + h, padding : padding + w, :]
        gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


GROUP_NORM_EPS = 1e-5


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GROUP_NORM_EPS) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w).astype(x.dtype, copy=False), ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# modules


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes in assignment order: a
    :class:`Parameter`, a child :class:`Module`, or a list of modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            self.weight = Parameter(np.zeros((out_features, in_features)))
        else:
            self.weight = Parameter(_fan_in_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        self.weight = Parameter(_fan_in_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        if channels % groups:
            raise ShapeError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta)


def norm_groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g
