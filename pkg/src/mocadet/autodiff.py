"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the detector and its objectives need: 0-d/1-d/2-d arrays, a small
set of primitive ops with hand-written pullbacks, and an explicit Tape that
records one forward build and supports exactly one backward pass.

Conventions:
  * all data is float64, row-major;
  * leaf tensors are validated finite at construction;
  * differentiable ops must run inside a ``with Tape():`` block (or under
    ``no_grad()`` when only values are needed);
  * broadcasting is limited to scalars and row vectors -- anything else is a
    loud ShapeError.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, ValidationError

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables recording (forward values only)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tape:
    """Ordered record of one differentiable forward build.

    Nodes are appended in creation order, so every node's parents precede it
    (a topological order by construction). A tape supports a single backward
    pass; rebuilding the forward pass means opening a fresh tape. Tensors
    created on one tape must not be used as op inputs on another tape
    (leaves excepted).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if _tape_stack():
            raise ContractError("tapes do not nest; close the active Tape first")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_pullback", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("leaf tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._pullback = None
        self._tape: Tape | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    """Leaf tensor that will receive gradients."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make_node(data: np.ndarray, parents: tuple, pullback) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        tape = active_tape()
        if tape is None:
            raise ContractError(
                "differentiable op outside a Tape; wrap the forward pass in "
                "`with Tape():` or use no_grad()"
            )
        if tape.consumed:
            raise ContractError("tape already consumed by backward; open a new Tape")
        out._parents = parents
        out._pullback = pullback
        out._tape = tape
        tape.nodes.append(out)
    else:
        out._parents = ()
        out._pullback = None
        out._tape = None
    return out


def _accum(parent: Tensor, g: np.ndarray) -> None:
    if parent.requires_grad:
        if parent.grad is None:
            parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            parent.grad = parent.grad + g


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def pullback(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make_node(out_data, (a, b), pullback)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")

    def pullback(g):
        _accum(a, g.T)

    return _make_node(a.data.T.copy(), (a,), pullback)


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """same | scalar_b | row_b  (b is broadcast against a)."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row_b"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar_b":
        return np.asarray(g.sum())
    return g.sum(axis=0)  # row_b


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def pullback(g):
        _accum(a, g)
        _accum(b, _reduce_to(g, kind))

    return _make_node(a.data + b.data, (a, b), pullback)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def pullback(g):
        _accum(a, g)
        _accum(b, -_reduce_to(g, kind))

    return _make_node(a.data - b.data, (a, b), pullback)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def pullback(g):
        _accum(a, g * b.data)
        _accum(b, _reduce_to(g * a.data, kind))

    return _make_node(a.data * b.data, (a, b), pullback)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    if np.any(b.data == 0.0):
        raise ValidationError("division by zero")

    def pullback(g):
        _accum(a, g / b.data)
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), kind))

    return _make_node(a.data / b.data, (a, b), pullback)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def pullback(g):
        _accum(a, -g)

    return _make_node(-a.data, (a,), pullback)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def pullback(g):
        _accum(a, g * out_data)

    return _make_node(out_data, (a,), pullback)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValidationError("log of non-positive value")

    def pullback(g):
        _accum(a, g / a.data)

    return _make_node(np.log(a.data), (a,), pullback)


def powf(a, exponent: float) -> Tensor:
    """a ** exponent for strictly positive a (real exponent)."""
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValidationError("powf requires strictly positive base")
    out_data = a.data ** exponent

    def pullback(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _make_node(out_data, (a,), pullback)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def pullback(g):
        _accum(a, g * mask)

    return _make_node(a.data * mask, (a,), pullback)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def pullback(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make_node(out_data, (a,), pullback)


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)  # subgradient 0 at 0

    def pullback(g):
        _accum(a, g * sign)

    return _make_node(np.abs(a.data), (a,), pullback)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def pullback(g):
        _accum(a, g * mask)

    return _make_node(np.clip(a.data, lo, hi), (a,), pullback)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum needs equal shapes, got {a.shape} and {b.shape}")
    take_a = a.data <= b.data  # ties route gradient to a

    def pullback(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _make_node(np.minimum(a.data, b.data), (a, b), pullback)


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum needs equal shapes, got {a.shape} and {b.shape}")
    take_a = a.data >= b.data

    def pullback(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _make_node(np.maximum(a.data, b.data), (a, b), pullback)


def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``scale * a``, stabilized by row-max subtraction."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ShapeError(f"softmax_rows needs a non-empty matrix, got {a.shape}")
    if not scale > 0.0:
        raise ValidationError("softmax scale must be positive")
    z = scale * a.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def pullback(g):
        inner = (g * out_data).sum(axis=1, keepdims=True)
        _accum(a, scale * out_data * (g - inner))

    return _make_node(out_data, (a,), pullback)


def logsumexp_vec(a: Tensor) -> Tensor:
    """log(sum(exp(a))) of a vector, stabilized."""
    a = _as_tensor(a)
    if a.ndim != 1 or a.shape[0] == 0:
        raise ShapeError(f"logsumexp_vec needs a non-empty vector, got {a.shape}")
    m = a.data.max()
    e = np.exp(a.data - m)
    s = e.sum()
    out_data = np.asarray(m + np.log(s))
    soft = e / s

    def pullback(g):
        _accum(a, g * soft)

    return _make_node(out_data, (a,), pullback)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance (pre-affine)."""
    a = _as_tensor(a)
    if a.ndim not in (1, 2):
        raise ShapeError(f"layernorm needs a vector or matrix, got {a.shape}")
    axis = a.ndim - 1
    mu = a.data.mean(axis=axis, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=axis, keepdims=True)
    s = np.sqrt(var + eps)
    y = (a.data - mu) / s
    n = a.shape[axis]

    def pullback(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        _accum(a, (g - gm - y * gy) / s)

    return _make_node(y, (a,), pullback)


def concat_rows(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows of empty list")
    for t in tensors:
        if t.ndim != 2 or t.shape[1] != tensors[0].shape[1]:
            raise ShapeError("concat_rows needs matrices with equal column counts")
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def pullback(g):
        for t, i0, i1 in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[i0:i1])

    return _make_node(np.concatenate([t.data for t in tensors], axis=0),
                      tuple(tensors), pullback)


def concat_cols(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_cols of empty list")
    for t in tensors:
        if t.ndim != 2 or t.shape[0] != tensors[0].shape[0]:
            raise ShapeError("concat_cols needs matrices with equal row counts")
    sizes = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def pullback(g):
        for t, j0, j1 in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, j0:j1])

    return _make_node(np.concatenate([t.data for t in tensors], axis=1),
                      tuple(tensors), pullback)


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2 or not (0 <= i0 <= i1 <= a.shape[0]):
        raise ShapeError(f"bad row slice [{i0}:{i1}] of shape {a.shape}")

    def pullback(g):
        full = np.zeros_like(a.data)
        full[i0:i1] = g
        _accum(a, full)

    return _make_node(a.data[i0:i1].copy(), (a,), pullback)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2 or not (0 <= j0 <= j1 <= a.shape[1]):
        raise ShapeError(f"bad column slice [{j0}:{j1}] of shape {a.shape}")

    def pullback(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        _accum(a, full)

    return _make_node(a.data[:, j0:j1].copy(), (a,), pullback)


def select_rows(a: Tensor, indices) -> Tensor:
    a = _as_tensor(a)
    idx = [int(i) for i in indices]
    if a.ndim != 2 or any(not 0 <= i < a.shape[0] for i in idx):
        raise ShapeError(f"bad row selection {idx} of shape {a.shape}")

    def pullback(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make_node(a.data[idx].copy(), (a,), pullback)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size or len(shape) > 2:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def pullback(g):
        _accum(a, g.reshape(a.data.shape))

    return _make_node(a.data.reshape(shape).copy(), (a,), pullback)


def mean_rows(a: Tensor) -> Tensor:
    """Arithmetic mean of the rows of a matrix -> vector of length n_cols."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ContractError(f"mean_rows needs a matrix with >= 1 row, got {a.shape}")
    m = a.shape[0]

    def pullback(g):
        _accum(a, np.tile(g / m, (m, 1)))

    return _make_node(a.data.mean(axis=0), (a,), pullback)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def pullback(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make_node(np.asarray(a.data.sum()), (a,), pullback)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def pullback(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make_node(np.asarray(a.data.mean()), (a,), pullback)


def l2_normalize(a: Tensor) -> Tensor:
    """Unit-normalize a vector, or each row of a matrix."""
    a = _as_tensor(a)
    axis = a.ndim - 1
    norms = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise ValidationError("l2_normalize of zero vector")
    y = a.data / norms

    def pullback(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, (g - y * inner) / norms)

    return _make_node(y, (a,), pullback)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors (scalar output)."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_sim needs equal-length vectors, got {u.shape}, {v.shape}")
    nu = float(np.sqrt((u.data ** 2).sum()))
    nv = float(np.sqrt((v.data ** 2).sum()))
    if nu == 0.0 or nv == 0.0:
        raise ValidationError("cosine_sim of zero vector is undefined")
    c = float(u.data @ v.data) / (nu * nv)

    def pullback(g):
        _accum(u, g * (v.data / (nu * nv) - c * u.data / (nu * nu)))
        _accum(v, g * (u.data / (nu * nv) - c * v.data / (nv * nv)))

    return _make_node(np.asarray(c), (u, v), pullback)


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Run reverse mode from a scalar loss; returns {leaf tensor: gradient}.

    Gradients accumulate into ``.grad`` (call ``zero_grad`` between steps).
    The loss's tape is consumed: a second backward without rebuilding the
    forward pass raises ContractError.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        raise ContractError("backward needs a scalar Tensor loss")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad leaf")
    tape = loss._tape
    if tape is None:  # loss is itself a leaf parameter
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return {loss: loss.grad}
    if tape.consumed:
        raise ContractError("tape already consumed; rebuild the forward pass")
    tape.consumed = True

    reachable = set()
    leaves = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable.add(id(t))
        if t._pullback is None:
            if t.requires_grad:
                leaves.append(t)
        else:
            stack.extend(p for p in t._parents if p.requires_grad)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if id(node) in reachable and node.grad is not None:
            node._pullback(node.grad)
    return {leaf: leaf.grad for leaf in leaves if leaf.grad is not None}


@dataclass
class GradCheckReport:
    h: float
    tol: float
    per_param: list = field(default_factory=list)  # (name, rel_error)
    max_rel_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a nullary callable returning a scalar Tensor built from
    ``params`` (a list of leaf tensors, or (name, tensor) pairs). ``f`` is
    evaluated twice up front; any mismatch means a non-deterministic
    objective and raises ContractError. Relative error per parameter is
    ``|ga - gn|_inf / max(|ga|_inf, |gn|_inf, 1)``: the unit floor means
    parameters whose true gradient is (near) zero are judged on absolute
    error, which keeps central-difference cancellation noise from being
    amplified.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValidationError(f"h={h} outside [1e-7, 1e-3]")
    named = [(p if isinstance(p, tuple) else (f"param{i}", p))
             for i, p in enumerate(params)]

    def eval_value() -> float:
        with no_grad():
            out = f()
        if not isinstance(out, Tensor) or out.ndim != 0:
            raise ContractError("grad_check objective must return a scalar Tensor")
        return float(out.data)

    v1, v2 = eval_value(), eval_value()
    if v1 != v2:
        raise ContractError("objective is non-deterministic: repeated evaluation mismatch")

    zero_grad([p for _, p in named])
    with Tape():
        loss = f()
        backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named}

    report = GradCheckReport(h=h, tol=tol)
    for name, p in named:
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_value()
            flat[i] = orig - h
            fm = eval_value()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        ga = analytic[name].reshape(-1)
        denom = max(np.abs(ga).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1.0)
        rel = float(np.abs(ga - numeric).max(initial=0.0) / denom)
        report.per_param.append((name, rel))
        report.max_rel_error = max(report.max_rel_error, rel)
    return report
