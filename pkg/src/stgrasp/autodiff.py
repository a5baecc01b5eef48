"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of primitives the grasp network needs are provided:
elementwise arithmetic, reductions, ReLU/sigmoid/softplus/log/exp,
2-D convolution (cross-correlation), max pooling, and Adam.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.  Calling
``loss.backward()`` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "GradientError",
    "NonFiniteError",
    "Tensor",
    "AdamState",
    "Adam",
    "adam_step",
    "add",
    "mul",
    "conv2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "grad",
    "save_checkpoint",
    "load_checkpoint",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A tensor operation produced NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of the differentiation API (e.g. backward on a non-scalar)."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _checked(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor data contains NaN or Inf")
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _checked(np.array(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d results to shape (1,)
        out.data = _checked(arr if arr.flags.c_contiguous else arr.copy())
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every node needing it."""
        if self.data.shape != ():
            raise GradientError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor with requires_grad=True")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; parents always precede consumers in the returned list
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params`` (zeros if unused)."""
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Tensor._from_op(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._from_op(
        a.data.mean(), (a,),
        lambda g: (np.full(a.shape, g / n),),
        "mean")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    return Tensor._from_op(
        np.logaddexp(0.0, a.data), (a,),
        lambda g: (g * _sigmoid(a.data),),
        "softplus")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._from_op(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise ValueError("log of a non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` ([C,H,W] or [N,C,H,W]) with ``w`` ([O,C,k,k]).

    Output spatial size is ``(H + 2*padding - k) // stride + 1``.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernel must be [O,C,k,k], got {w.shape}")
    out_c, in_c, k, _ = w.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if b is not None and b.shape != (out_c,):
        raise DimensionError(f"bias must be [{out_c}], got {b.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    if c != in_c:
        raise DimensionError(f"input has {c} channels, kernel expects {in_c}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < k or wp < k:
        raise DimensionError(f"input {h}x{wd} (padding {padding}) smaller than kernel {k}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(out_c, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, out_c)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = g2.sum(axis=0) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            if stride == 1 and padding <= k - 1:
                # stride-1 input gradient is a full correlation with the flipped kernel
                q = k - 1 - padding
                gp = np.pad(g4, ((0, 0), (0, 0), (q, q), (q, q))) if q else g4
                wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(in_c, -1)
                dx = (_im2col(gp, k, 1, h, wd) @ wf.T).reshape(n, h, wd, in_c).transpose(0, 3, 1, 2)
            else:
                dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
                dxp = np.zeros((n, c, hp, wp))
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                dx = dxp[:, :, padding:padding + h, padding:padding + wd]
            if not batched:
                dx = dx[0]
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling over the last two axes.

    The gradient goes to the first maximal cell of each window in row-major order.
    """
    if window < 1:
        raise DimensionError("window must be >= 1")
    if x.ndim < 2:
        raise DimensionError(f"maxpool2d needs at least 2 dims, got {x.shape}")
    *lead, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(*lead, ho, window, wo, window).swapaxes(-3, -2)
    flat = blocks.reshape(*lead, ho, wo, window * window)
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, idx, g[..., None], axis=-1)
        return (gflat.reshape(*lead, ho, wo, window, window).swapaxes(-3, -2).reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    """Moment estimates and hyperparameters for Adam.

    The default learning rate is the full-scale training value (1e-5); the
    betas and epsilon are the usual defaults.
    """
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shapes: Iterable[tuple[int, ...]], **hyper) -> "AdamState":
        shapes = list(shapes)
        return cls(m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimizer state differ in length")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape):
            raise DimensionError(f"parameter {p.shape} / gradient {g.shape} / moment {m.shape} mismatch")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_p, new_state


@dataclass
class Adam:
    """Stateful wrapper applying :func:`adam_step` to tensors' ``.grad``."""
    params: list[Tensor]
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros((p.shape for p in self.params), lr=self.lr,
                                     beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = _checked(d)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "stgrasp.tensors/1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write one JSON header line, then each array as little-endian float64 in header order."""
    entries = [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors.items()]
    header = {"format": CHECKPOINT_FORMAT, "tensors": entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    offset = nl + 1
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: payload size does not match header")
    return out, header["meta"]
