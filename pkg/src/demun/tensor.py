"""Dense float64 tensors with reverse-mode automatic differentiation.

Each op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in reverse
topological order and accumulates into leaf tensors that require grad.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A forward value or loss contains NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # Arithmetic sugar; all routed through the differentiable ops below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = op
    t._parents = ()
    t._backward = None
    t.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from exc

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, bw, "stack")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _make(out, (x,), bw, "relu")


# ---------------------------------------------------------------------------
# linear algebra


def _const(A) -> np.ndarray:
    return A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)


def matvec(A, x: Tensor) -> Tensor:
    """``A @ x`` for x of shape (n,) or a batch (B, n); A is constant data."""
    A = _const(A)
    x = as_tensor(x)
    if A.ndim != 2 or x.shape[-1] != A.shape[1] or x.data.ndim not in (1, 2):
        raise ShapeError(f"matvec: A{A.shape} x{x.shape}")
    out = x.data @ A.T

    def bw(g):
        return (g @ A,)

    return _make(out, (x,), bw, "matvec")


def matvec_T(A, r: Tensor) -> Tensor:
    """``A.T @ r`` for r of shape (m,) or (B, m)."""
    A = _const(A)
    r = as_tensor(r)
    if A.ndim != 2 or r.shape[-1] != A.shape[0] or r.data.ndim not in (1, 2):
        raise ShapeError(f"matvec_T: A{A.shape} r{r.shape}")
    out = r.data @ A

    def bw(g):
        return (g @ A.T,)

    return _make(out, (r,), bw, "matvec_T")


def linear_map(x: Tensor, forward: Callable, adjoint: Callable, name: str = "linear") -> Tensor:
    """Apply a constant linear map given as a (forward, adjoint) pair of array functions."""
    x = as_tensor(x)
    out = forward(x.data)

    def bw(g):
        return (adjoint(g),)

    return _make(out, (x,), bw, name)


def mse(a: Tensor, b) -> Tensor:
    """Unaveraged sum of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.dot(diff.ravel(), diff.ravel()))

    def bw(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return _make(out, (a, b), bw, "mse")


# ---------------------------------------------------------------------------
# convolution and normalization


def _pad_hw(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # zero padding of the two trailing axes; much cheaper than np.pad for small arrays
    C, B, H, W = a.shape
    out = np.zeros((C, B, H + 2 * ph, W + 2 * pw))
    out[:, :, ph : ph + H, pw : pw + W] = a
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, H: int, W: int) -> np.ndarray:
    # xp is channel-major (C, B, H + kh - 1, W + kw - 1); result is (C*kh*kw, B*H*W)
    C, B = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, H, W))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(C * kh * kw, B * H * W)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded 2D cross-correlation.

    x is (B, C_in, H, W), kernel is (C_out, C_in, kh, kw) with odd kh, kw,
    bias is (C_out,) or None. Output is (B, C_out, H, W).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"conv2d: bias {bias.shape}, expected ({Co},)")
    ph, pw = kh // 2, kw // 2
    w2 = kernel.data.reshape(Co, -1)
    xt = x.data.transpose(1, 0, 2, 3)
    if kh == 1 and kw == 1:
        cols = xt.reshape(C, B * H * W)
    else:
        xp = _pad_hw(xt, ph, pw)
        cols = _im2col(xp, kh, kw, H, W)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(Co, B, H, W).transpose(1, 0, 2, 3))

    def bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(Co, B * H * W)
        gw = (gt @ cols.T).reshape(kernel.shape)
        gx = None  # skipped when the input is a constant
        if x.requires_grad:
            # correlate the padded output gradient with the flipped kernel
            w_flip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            if kh == 1 and kw == 1:
                gcols = gt
            else:
                gp = _pad_hw(gt.reshape(Co, B, H, W), ph, pw)
                gcols = _im2col(gp, kh, kw, H, W)
            gx = np.ascontiguousarray((w_flip @ gcols).reshape(C, B, H, W).transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gt.sum(axis=1))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


class DegenerateBatchError(ValueError):
    """Too few samples per channel to form batch statistics."""


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        new = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        new.running_mean = self.running_mean.copy()
        new.running_var = self.running_var.copy()
        return new


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization of an (B, C, H, W) tensor.

    Training mode normalizes by batch statistics and (unless
    ``update_stats`` is False) folds them into the running estimates;
    inference mode uses the running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    B, C, H, W = x.shape
    N = B * H * W
    axes = (0, 2, 3)
    if training:
        if N < 2:
            raise DegenerateBatchError(f"batch_norm needs B*H*W >= 2 in training mode, got {N}")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        var = np.einsum("bchw,bchw->c", centered, centered) / N
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * N / (N - 1)
    else:
        mean, var = state.running_mean, state.running_var
        centered = x.data - mean[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            dx = (
                inv_std[None, :, None, None]
                / N
                * (
                    N * dxhat
                    - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# reverse pass


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


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a finite scalar unless an explicit output gradient is
    given. Repeated calls add to existing gradients.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        _check_finite(loss.data, "loss")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            _check_finite(pg, "backward")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
