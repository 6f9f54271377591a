"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its inputs and a gradient closure on the result.
``backward`` replays the closures over the nodes reachable from the loss,
in reverse creation order, accumulating into ``.grad`` with ``+=`` so that
parameters used several times receive summed contributions.

Only the cases the network actually needs are implemented: 2-D matmul,
row-wise softmax, last-axis layer norm, and an elementwise suite. No
broadcasting beyond adding a bias vector to matrix rows.
"""

from __future__ import annotations

import itertools
import logging
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is lazily
    allocated with the same shape. Tensors are treated as immutable after
    creation except for ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        d = np.asarray(data, dtype=np.float64)
        if not d.flags["C_CONTIGUOUS"]:  # 0-d arrays are always contiguous
            d = np.ascontiguousarray(d)
        self.data = d
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)
        if self.grad is None:
            # copy: g may be a view or shared with another parent's update
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        Requires a scalar (size-1) tensor. Nodes run exactly once, in
        reverse creation order, which is a valid topological order of the
        tape.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t._grad_fn is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self.accumulate_grad(np.ones_like(self.data))
        for t in nodes:
            t._grad_fn(t.grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # small amount of operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Create a result tensor, recording the closure only when needed."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# core linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _node(out_data, (a, b), grad_fn)


def matmul_nt(a, b) -> Tensor:
    """a @ b.T without materializing the transpose as a graph node."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt shapes incompatible: {a.shape} x {b.shape}^T")
    out_data = a.data @ b.data.T

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data)
        if b.requires_grad:
            b.accumulate_grad(g.T @ a.data)

    return _node(out_data, (a, b), grad_fn)


def softmax_rows(x) -> Tensor:
    """Row-stochastic softmax of a 2-D tensor, max-shifted for stability."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return _node(y, (x,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize each row of the last axis to zero mean, unit variance, then
    apply the affine (gamma, beta). ``eps`` floors the variance and must be
    positive so constant rows stay finite."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    if eps <= 0.0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xm = x.data - mu
    var = (xm * xm).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv
    y = gamma.data * xhat + beta.data

    def grad_fn(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _node(y, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias added to every row of a 2-D
    tensor (the only broadcast the network uses)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def grad_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        return _node(a.data + b.data, (a, b), grad_fn)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def grad_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0))

        return _node(a.data + b.data, (a, b), grad_fn)
    raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes incompatible: {a.shape} - {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _node(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes incompatible: {a.shape} * {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _node(a.data * b.data, (a, b), grad_fn)


def mul_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _node(a.data * s, (a,), grad_fn)


def add_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _node(a.data + float(s), (a,), grad_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), grad_fn)


# tanh-approximation constants, fixed so saved parameters stay portable
_GELU_C1 = float(np.sqrt(2.0 / np.pi))
_GELU_C2 = 0.044715


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C1 * (xd + _GELU_C2 * (x2 * xd)))
    y = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        if x.requires_grad:
            du = _GELU_C1 * (1.0 + 3.0 * _GELU_C2 * x2)
            dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
            x.accumulate_grad(g * dy)

    return _node(y, (x,), grad_fn)


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0.0).any():
        raise NumericError("log requires strictly positive input")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _node(np.log(x.data), (x,), grad_fn)


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is zero where the floor binds."""
    x = as_tensor(x)
    keep = x.data > floor

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _node(np.where(keep, x.data, floor), (x,), grad_fn)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.T)

    return _node(x.data.T.copy(), (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _node(x.data.reshape(shape).copy(), (x,), grad_fn)


def concat_last_axis(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_last_axis of an empty sequence")
    widths = [p.shape[-1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[..., lo:hi])

    return _node(out_data, tuple(parts), grad_fn)


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_rows of an empty sequence")
    heights = [p.shape[0] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + heights)

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    return _node(out_data, tuple(parts), grad_fn)


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor, or elements of a 1-D one."""
    x = as_tensor(x)
    n = x.shape[0]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")

    def grad_fn(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[start:stop] = g
            x.accumulate_grad(full)

    return _node(x.data[start:stop].copy(), (x,), grad_fn)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    n = x.shape[1]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")

    def grad_fn(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x.accumulate_grad(full)

    return _node(x.data[:, start:stop].copy(), (x,), grad_fn)


def add_to_row(x, row: int, v) -> Tensor:
    """Copy of 2-D ``x`` with ``v`` added to one row; other rows untouched."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2:
        raise DimensionError(f"add_to_row needs a 2-D tensor, got {x.shape}")
    if v.size != x.shape[1]:
        raise DimensionError(f"row of width {x.shape[1]} cannot take {v.shape}")
    if not (0 <= row < x.shape[0]):
        raise DimensionError(f"row {row} out of range for {x.shape}")
    out_data = x.data.copy()
    out_data[row] += v.data.reshape(-1)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if v.requires_grad:
            v.accumulate_grad(g[row].reshape(v.shape))

    return _node(out_data, (x, v), grad_fn)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.item()))

    return _node(np.asarray(x.data.sum()), (x,), grad_fn)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.item() / n))

    return _node(np.asarray(x.data.mean()), (x,), grad_fn)


def cosine_similarity(u, v) -> Tensor:
    """u.v / (|u||v|) over the flattened entries; scalar in [-1, 1].

    A zero vector has no direction: the result is defined as 0 (with a
    logged warning) and contributes no gradient.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.size != v.size:
        raise DimensionError(f"cosine_similarity sizes differ: {u.shape} vs {v.shape}")
    uf = u.data.reshape(-1)
    vf = v.data.reshape(-1)
    nu = float(np.sqrt(uf @ uf))
    nv = float(np.sqrt(vf @ vf))
    if nu == 0.0 or nv == 0.0:
        logger.warning("cosine_similarity of a zero vector; returning 0")

        def zero_grad_fn(g):
            return None

        return _node(np.asarray(0.0), (u, v), zero_grad_fn)
    c = float(uf @ vf) / (nu * nv)

    def grad_fn(g):
        gs = g.item()
        if u.requires_grad:
            u.accumulate_grad((gs * (vf / (nu * nv) - c * uf / (nu * nu))).reshape(u.shape))
        if v.requires_grad:
            v.accumulate_grad((gs * (uf / (nu * nv) - c * vf / (nv * nv))).reshape(v.shape))

    return _node(np.asarray(c), (u, v), grad_fn)
