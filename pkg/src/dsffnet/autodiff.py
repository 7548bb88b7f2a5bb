"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the handful of operations the pose-transfer network needs are provided.
Shapes are explicit everywhere; there is no general broadcasting.  Each op
that touches a gradient-requiring input records a node (inputs, adjoint
function, sequence number).  ``backward`` collects the reachable nodes into a
:class:`Tape` ordered by execution and replays the adjoints in reverse.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64

_seq = itertools.count()

# op name -> multiplier applied to that op's adjoints; test hook only
_ADJOINT_SCALE: Dict[str, float] = {}


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq", "_op", "_factors")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable] = None
        self._seq = -1
        self._op = "leaf"
        # (v, z) when this tensor is concat(v, repeat(z)); see linear_1x1
        self._factors: Optional[Tuple["Tensor", "Tensor"]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # convenience arithmetic, same-shape only
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._seq = next(_seq)
        out._op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
            if m != n:
                raise DimensionError(f"{op}: axis {axis} mismatch ({m} vs {n})")
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# network primitives
# --------------------------------------------------------------------------

def linear_1x1(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-vertex affine map: ``out[c, n] = sum_k W[c, k] x[k, n] + b[c]``."""
    if x.data.ndim != 2:
        raise DimensionError(f"linear_1x1: x must be C_in x N, got shape {x.shape}")
    if W.data.ndim != 2:
        raise DimensionError(f"linear_1x1: W must be C_out x C_in, got shape {W.shape}")
    if W.shape[1] != x.shape[0]:
        raise DimensionError(
            f"linear_1x1: channel axis mismatch, W expects C_in={W.shape[1]} but x has {x.shape[0]}")
    if b.shape != (W.shape[0],):
        raise DimensionError(
            f"linear_1x1: bias axis 0 has {b.shape}, expected ({W.shape[0]},)")
    if x._factors is not None:
        return _linear_factored(x._factors[0], x._factors[1], W, b)
    xd, Wd = x.data, W.data
    out = Wd @ xd + b.data[:, None]

    def vjp(g):
        return Wd.T @ g, g @ xd.T, g.sum(axis=1)

    return _make(out, (x, W, b), vjp, "linear_1x1")


def _linear_factored(v: Tensor, z: Tensor, W: Tensor, b: Tensor) -> Tensor:
    # W @ [v; z 1^T] + b == W_v @ v + (W_z @ z + b) 1^T, without materializing the repeat
    cv = v.shape[0]
    Wv, Wz = W.data[:, :cv], W.data[:, cv:]
    vd, zd = v.data, z.data
    out = Wv @ vd + (Wz @ zd + b.data)[:, None]

    def vjp(g):
        gs = g.sum(axis=1)
        gW = np.concatenate([g @ vd.T, np.outer(gs, zd)], axis=1)
        return Wv.T @ g, Wz.T @ gs, gW, gs

    return _make(out, (v, z, W, b), vjp, "linear_1x1")


def instance_norm(x: Tensor, eps: float = 1e-5,
                  stats: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Normalize each channel of a C x N tensor over the vertex axis.

    Returns ``(out, mu, sigma)`` with ``sigma = sqrt(population_var + eps)``.
    ``stats`` freezes (mu, sigma) to supplied constants; the result is then a
    per-vertex map and gradients do not flow through the statistics.
    """
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"instance_norm: expected C x N with N >= 1, got {x.shape}")
    xd = x.data
    if stats is None:
        if eps <= 0:
            raise ContractError("instance_norm: eps must be positive")
        mu = xd.mean(axis=1)
        centered = xd - mu[:, None]
        sigma = np.sqrt((centered * centered).mean(axis=1) + eps)
        y = centered / sigma[:, None]

        def vjp(g):
            gm = g.mean(axis=1, keepdims=True)
            gy = (g * y).mean(axis=1, keepdims=True)
            return ((g - gm - y * gy) / sigma[:, None],)
    else:
        mu, sigma = (np.asarray(s, dtype=DTYPE) for s in stats)
        y = (xd - mu[:, None]) / sigma[:, None]

        def vjp(g):
            return (g / sigma[:, None],)

    out = _make(y, (x,), vjp, "instance_norm")
    return out, Tensor(mu), Tensor(sigma)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("concat_channels: operands must be 2-D")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"concat_channels: vertex axis 1 mismatch ({a.shape[1]} vs {b.shape[1]})")
    c1 = a.shape[0]
    return _make(np.concatenate([a.data, b.data], axis=0), (a, b),
                 lambda g: (g[:c1], g[c1:]), "concat_channels")


def max_over_vertices(x: Tensor) -> Tensor:
    """Per-channel max; the subgradient goes to the lowest-index argmax."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"max_over_vertices: expected C x N with N >= 1, got {x.shape}")
    idx = np.argmax(x.data, axis=1)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx], (x,), vjp, "max_over_vertices")


def repeat_columns(z: Tensor, n: int) -> Tensor:
    """Tile a length-C vector into a C x n tensor."""
    if z.data.ndim != 1:
        raise DimensionError(f"repeat_columns: expected a vector, got {z.shape}")
    if n < 1:
        raise ContractError("repeat_columns: n must be >= 1")
    out = np.repeat(z.data[:, None], n, axis=1)
    return _make(out, (z,), lambda g: (g.sum(axis=1),), "repeat_columns")


def mixed_feature(v: Tensor, z: Tensor) -> Tensor:
    """``concat_channels(v, repeat_columns(z, N))`` that remembers its factors.

    1x1 convs over the result use the factored form, so the repeated block
    is never multiplied column by column.
    """
    out = concat_channels(v, repeat_columns(z, v.shape[1]))
    out._factors = (v, z)
    return out


def permute_columns(x: Tensor, order: np.ndarray) -> Tensor:
    """``out[:, i] = x[:, order[i]]`` for a permutation ``order``."""
    order = np.asarray(order)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return _make(x.data[:, order], (x,), lambda g: (g[:, inv],), "permute_columns")


def take_columns(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather columns (repeats allowed); adjoint scatters-adds back."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx.T, idx, g.T)
        return (gx,)

    return _make(x.data[:, idx], (x,), vjp, "take_columns")


def blend(alpha: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``alpha * a + (1 - alpha) * b`` with a scalar (0-d) ``alpha``."""
    if alpha.data.ndim != 0:
        raise DimensionError(f"blend: alpha must be a scalar, got shape {alpha.shape}")
    _same_shape(a, b, "blend")
    al = float(alpha.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return np.asarray((g * (ad - bd)).sum()), al * g, (1.0 - al) * g

    return _make(al * ad + (1.0 - al) * bd, (alpha, a, b), vjp, "blend")


# --------------------------------------------------------------------------
# elementwise / reductions
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_rows(x: Tensor) -> Tensor:
    """Sum a C x N tensor over its channel axis, giving a length-N vector."""
    if x.data.ndim != 2:
        raise DimensionError(f"sum_rows: expected 2-D input, got {x.shape}")
    c = x.shape[0]
    return _make(x.data.sum(axis=0), (x,),
                 lambda g: (np.repeat(g[None, :], c, axis=0),), "sum_rows")


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

class Tape:
    """Executed operations reachable from a root, in execution order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._vjp is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable grad tensor."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    adj: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: Dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = adj.get(id(node))
        if g is None:
            continue
        grads = node._vjp(g)
        factor = _ADJOINT_SCALE.get(node._op)
        for parent, pg in zip(node._parents, grads):
            if not parent.requires_grad or pg is None:
                continue
            if factor is not None:
                pg = pg * factor
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = np.array(pg, dtype=DTYPE)
                touched[key] = parent
    for key, t in touched.items():
        g = adj[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


@contextmanager
def corrupted_adjoint(op: str, factor: float = 1.5):
    """Scale the adjoints emitted by ``op`` (negative-control hook for gradcheck)."""
    _ADJOINT_SCALE[op] = factor
    try:
        yield
    finally:
        _ADJOINT_SCALE.pop(op, None)


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

def _rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check_report(f: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray],
                      h: float = 1e-5, max_entries: Optional[int] = None,
                      seed: int = 0) -> Dict[str, float]:
    """Per-parameter max relative error of tape vs central-difference gradients.

    ``f`` maps a dict of tensors to a scalar tensor.  With ``max_entries`` set,
    at most that many entries per array (chosen by ``seed``) are probed by
    finite differences; scalars are always probed.
    """
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    loss = f(tensors)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: f returned a non-finite value")
    backward(loss)
    rng = np.random.default_rng(seed)

    def evaluate(name: str, arr: np.ndarray) -> float:
        args = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        val = float(f(args).data)
        if not np.isfinite(val):
            raise NumericError(f"grad_check: non-finite f while perturbing {name}")
        return val

    report = {}
    for name, value in base.items():
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = rng.choice(value.size, size=max_entries, replace=False)
        worst = 0.0
        for i in flat_idx:
            pert = value.copy().reshape(-1)
            orig = pert[i]
            pert[i] = orig + h
            fp = evaluate(name, pert.reshape(value.shape))
            pert[i] = orig - h
            fm = evaluate(name, pert.reshape(value.shape))
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, float(_rel(analytic.reshape(-1)[i], fd)))
        report[name] = worst
    return report


def grad_check(f: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray],
               h: float = 1e-5, **kwargs) -> float:
    """Max relative error ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`` over all params."""
    report = grad_check_report(f, params, h=h, **kwargs)
    return max(report.values(), default=0.0)
