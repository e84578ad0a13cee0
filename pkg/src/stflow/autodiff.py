"""A small define-by-run reverse-mode autodiff engine over numpy arrays.

Only what the forecasting network needs is here: elementwise arithmetic,
a channel matmul, left multiplication by a graph operator, a valid
temporal convolution, the gated linear unit and an MSE loss, plus Adam.

Every op builds its output eagerly and records a closure mapping the
upstream gradient to one gradient per parent.  ``backward`` orders the
reachable graph topologically and replays the closures in reverse.
"""
from __future__ import annotations

import os
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError, ParameterError, ShapeError

DEBUG = bool(os.environ.get("STFLOW_DEBUG"))

GradFn = Callable[[np.ndarray], tuple["np.ndarray | None", ...]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NumericalError(f"{op} produced non-finite values from finite inputs")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    out.op = op
    return out


@dataclass
class Tape:
    """The operations reachable from a root, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def replay_backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_root(loss).replay_backward(np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise ----------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    if a.data.size == 1 and a.ndim == 0 or b.data.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), grad_fn, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/(1+inf) is the right limit
    out = np.negative(x, out=np.empty_like(x))
    with np.errstate(over="ignore", under="ignore"):
        np.exp(out, out=out)
    out += 1.0
    return np.reciprocal(out, out=out)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n, dtype=a.dtype),), "mean")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``[..., m, k] @ [k, n] -> [..., m, n]``; leading axes are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def grad_fn(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def graph_mix(p, x) -> Tensor:
    """Apply an ``[N, N]`` operator along the node axis of ``x: [B, T, N, C]``."""
    p, x = as_tensor(p), as_tensor(x)
    if x.ndim != 4 or p.ndim != 2 or p.shape != (x.shape[2], x.shape[2]):
        raise ShapeError(f"graph_mix: operator {p.shape} does not fit node axis of {x.shape}")
    b, t, n, c = x.shape
    xm = x.data.transpose(2, 0, 1, 3).reshape(n, -1)
    out = (p.data @ xm).reshape(n, b, t, c).transpose(1, 2, 0, 3)

    def grad_fn(g):
        gm = g.transpose(2, 0, 1, 3).reshape(n, -1)
        gp = gm @ xm.T if p.requires_grad else None
        gx = (p.data.T @ gm).reshape(n, b, t, c).transpose(1, 2, 0, 3) if x.requires_grad else None
        return gp, gx

    return _make(np.ascontiguousarray(out), (p, x), grad_fn, "graph_mix")


def _time_windows(x: np.ndarray, kt: int) -> np.ndarray:
    # [B, T, N, C] -> [B, T-kt+1, N, kt*C], window-major then channel
    b, t, n, c = x.shape
    t_out = t - kt + 1
    cols = np.empty((b, t_out, n, kt, c), dtype=x.dtype)
    for tau in range(kt):
        cols[:, :, :, tau, :] = x[:, tau:tau + t_out]
    return cols.reshape(b, t_out, n, kt * c)


def conv1d_time(x, kernel, bias) -> Tensor:
    """Valid convolution along time, shared across nodes.

    ``out[b, t, n, o] = bias[o] + sum_{tau, i} x[b, t+tau, n, i] * kernel[tau, i, o]``
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 3 or kernel.shape[1] != x.shape[3]:
        raise ShapeError(f"conv1d_time: kernel {kernel.shape} does not fit input {x.shape}")
    kt, c_in, c_out = kernel.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d_time: bias {bias.shape} does not match {c_out} output channels")
    b, t, n, _ = x.shape
    if t < kt:
        raise ShapeError(f"conv1d_time: time length {t} shorter than kernel {kt}")
    t_out = t - kt + 1
    cols = _time_windows(x.data, kt).reshape(-1, kt * c_in)
    k2 = kernel.data.reshape(kt * c_in, c_out)
    out = (cols @ k2).reshape(b, t_out, n, c_out)
    out += bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols.T @ g2).reshape(kt, c_in, c_out) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(b, t_out, n, kt, c_in)
            gx = np.zeros_like(x.data)
            for tau in range(kt):
                gx[:, tau:tau + t_out] += gcols[:, :, :, tau, :]
        return gx, gk, gb

    return _make(out, (x, kernel, bias), grad_fn, "conv1d_time")


def glu(x) -> Tensor:
    """Gated linear unit over the last axis: first half times sigmoid of second."""
    x = as_tensor(x)
    c2 = x.shape[-1]
    if c2 % 2:
        raise ShapeError(f"glu: channel count {c2} is odd")
    c = c2 // 2
    lead = x.shape[:-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, c2)
    out = np.empty((x2.shape[0], c), dtype=x.dtype)
    gate = np.empty_like(out)
    kernels.glu_forward(x2, out, gate)

    def grad_fn(g):
        gx = np.empty_like(x2)
        kernels.glu_backward(np.ascontiguousarray(g, dtype=x.dtype).reshape(-1, c), x2, gate, gx)
        return (gx.reshape(x.shape),)

    return _make(out.reshape(lead + (c,)), (x,), grad_fn, "glu")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        gp = (2.0 / n) * float(g) * diff
        return gp, -gp

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), grad_fn, "mse_loss")


# -- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ParameterError(f"Adam learning rate must be positive, got {self.lr}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> AdamState:
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.  ``None`` grads count as zero."""
    if not state.lr > 0:
        raise ParameterError(f"Adam learning rate must be positive, got {state.lr}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("Adam state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"Adam: gradient {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# -- verification ---------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                            floor: float = 1e-4) -> float:
    """Worst relative disagreement between tape and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params`` on every call.  The
    denominator is ``max(|analytic|, |numeric|, floor)`` so coordinates
    whose true gradient is ~0 are judged on absolute error.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    zero_grad(params)
    return worst
