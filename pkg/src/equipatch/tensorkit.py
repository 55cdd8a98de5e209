"""Dense f32 tensors with reverse-mode automatic differentiation.

The op set covers exactly what the patch-embedding models need: conv2d,
matmul, layernorm, softmax, gelu, cross-entropy, and the shape plumbing
around them.  Arrays are contiguous row-major numpy buffers; f32 is the
storage dtype for models, and every op is dtype-polymorphic so the same
graph code can be evaluated in f64 (used by the finite-difference checker).

Tensors are immutable values: once created, their backing array is frozen,
and optimizer updates produce successor tensors instead of writing in
place.  Recorded operations form a Tape; ``backward`` walks it in reverse
execution order exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, GeometryError, ShapeError

_op_counter = itertools.count()
_thread_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_thread_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path).

    The flag is thread-local: recording state in one evaluation worker
    never leaks into another thread.
    """
    prev = _grad_enabled()
    _thread_state.grad_enabled = False
    try:
        yield
    finally:
        _thread_state.grad_enabled = prev


class TapeNode:
    """One recorded differentiable operation."""

    __slots__ = ("seq", "inputs", "grad_fn", "_ran")

    def __init__(self, inputs: tuple["Tensor", ...], grad_fn: Callable):
        self.seq = next(_op_counter)
        self.inputs = inputs
        self.grad_fn = grad_fn  # grad_out -> tuple of per-input grads (or None)
        self._ran = False


@dataclass
class Tape:
    """Recorded operations reachable from a loss, in execution order."""

    nodes: list[TapeNode] = field(default_factory=list)


class Tensor:
    """Dense N-d array value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)
        elif arr.base is not None:
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: TapeNode | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are python floats, not broadcast tensors
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)


def _wrap(value: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor(value, dtype=value.dtype)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = TapeNode(inputs, grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    value = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap(value, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor or a python scalar."""
    if isinstance(b, Tensor):
        value = a.data * b.data

        def grad_fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _wrap(value, (a, b), grad_fn)

    scalar = float(b)
    value = a.data * np.asarray(scalar, dtype=a.data.dtype)

    def grad_fn_s(g):
        return (g * scalar,)

    return _wrap(value.astype(a.data.dtype), (a,), grad_fn_s)


def reshape(x: Tensor, shape) -> Tensor:
    value = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _wrap(np.ascontiguousarray(value), (x,), grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    value = np.ascontiguousarray(x.data.transpose(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _wrap(value, (x,), grad_fn)


def getitem(x: Tensor, key) -> Tensor:
    value = np.ascontiguousarray(x.data[key])

    def grad_fn(g):
        buf = np.zeros(x.shape, dtype=g.dtype)
        buf[key] += g
        return (buf,)

    return _wrap(value, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        for i in range(len(sizes)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(pieces)

    return _wrap(value, tuple(tensors), grad_fn)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    value = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def grad_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _wrap(value, (x,), grad_fn)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (f64 accumulation, scalar result in x's dtype)."""
    value = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def grad_fn(g):
        return (np.full(x.shape, g, dtype=g.dtype),)

    return _wrap(value, (x,), grad_fn)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    value = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype)

    def grad_fn(g):
        return (np.full(x.shape, g / n, dtype=g.dtype),)

    return _wrap(value, (x,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    value = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _wrap(value, (a, b), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias reduction fused into one backward node."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes do not align: {x.shape} @ {w.shape} + {b.shape}")
    value = np.matmul(x.data, w.data) + b.data

    def grad_fn(g):
        lead = int(np.prod(g.shape[:-1]))
        g2 = g.reshape(lead, g.shape[-1])
        x2 = x.data.reshape(lead, x.shape[-1])
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(x2.T, g2)
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _wrap(value, (x, w, b), grad_fn)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    """Strided 2-d cross-correlation with symmetric zero padding.

    x: [N, Cin, H, W]; w: [Cout, Cin, k, k]; b: [Cout].
    Output [N, Cout, Ho, Wo] with Ho = floor((H + 2*pad - k)/stride) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise GeometryError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise GeometryError(f"pad must be non-negative, got {pad}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise GeometryError(
            f"kernel {k} exceeds padded extent ({h}+2*{pad}, {wd}+2*{pad})"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1

    xp = x.data
    if pad:
        xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
        xp[:, :, pad : pad + h, pad : pad + wd] = x.data
    cols = np.empty((n, cin, k, k, ho, wo), dtype=x.data.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    cols2 = cols.reshape(n, cin * k * k, ho * wo)
    w2 = w.data.reshape(cout, cin * k * k)
    value = np.matmul(w2, cols2).reshape(n, cout, ho, wo) + b.data[None, :, None, None]

    def grad_fn(g):
        g2 = g.reshape(n, cout, ho * wo)
        # flat GEMMs so BLAS does the contractions without batched intermediates
        g_flat = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(cout, n * ho * wo)
        cols_flat = np.ascontiguousarray(cols2.transpose(0, 2, 1)).reshape(n * ho * wo, cin * k * k)
        gw = np.matmul(g_flat, cols_flat).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, gw, gb
        gcols = np.ascontiguousarray(
            np.matmul(w2.T, g_flat).reshape(cin * k * k, n, ho * wo).transpose(1, 0, 2)
        ).reshape(n, cin, k, k, ho, wo)
        gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for u in range(k):
            for v in range(k):
                gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += gcols[:, :, u, v]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return np.ascontiguousarray(gx), gw, gb

    return _wrap(value, (x, w, b), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y64 = e / e.sum(axis=axis, keepdims=True)
    value = y64.astype(x.data.dtype)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        dx = y64 * (g64 - (g64 * y64).sum(axis=axis, keepdims=True))
        return (dx.astype(g.dtype),)

    return _wrap(value, (x,), grad_fn)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},)")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    value = (xhat * gamma.data.astype(np.float64) + beta.data.astype(np.float64)).astype(x.data.dtype)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        dg = (g64 * xhat).sum(axis=tuple(range(g.ndim - 1)))
        db = g64.sum(axis=tuple(range(g.ndim - 1)))
        gy = g64 * gamma.data.astype(np.float64)
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(g.dtype), dg.astype(gamma.data.dtype), db.astype(beta.data.dtype)

    return _wrap(value, (x, gamma, beta), grad_fn)


_GELU_C0 = 0.7978845608
_GELU_C1 = 0.044715


def _gelu_grad(xd: np.ndarray, g: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        x2 = xd * xd
        if t is None:
            t = np.tanh(_GELU_C0 * (xd + _GELU_C1 * x2 * xd))
        dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    # overflow in the cubic simply saturates tanh; non-finite inputs propagate
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.tanh(_GELU_C0 * (xd + _GELU_C1 * (xd * xd) * xd))
        value = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        return (_gelu_grad(xd, g, t).astype(g.dtype),)

    return _wrap(value.astype(xd.dtype), (x,), grad_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmaxed logits."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = np.asarray((lse[:, 0] - z[np.arange(n), labels]).mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        p = np.exp(z - lse)
        p[np.arange(n), labels] -= 1.0
        return ((g.item() / n) * p.astype(g.dtype),)

    return _wrap(value, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def collect_tape(t: Tensor) -> Tape:
    """Operations reachable from ``t``, sorted by execution order."""
    seen: set[int] = set()
    nodes: list[TapeNode] = []
    stack = [t]
    while stack:
        cur = stack.pop()
        node = cur.op
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda n: n.seq)
    return Tape(nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients from a previous backward call are overwritten, not
    accumulated.  Calling backward twice on the same loss tensor is
    rejected; re-execute the forward graph instead.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise ContractError("backward was already invoked on this loss; re-execute the graph first")
    if loss.op is None:
        raise ContractError("loss is detached from any recorded operation")
    loss._backward_done = True

    tape = collect_tape(loss)

    # Map nodes to their output tensors by walking once from the loss.
    out_of: dict[int, Tensor] = {}
    leaves: list[Tensor] = []
    stack = [loss]
    visited: set[int] = set()
    while stack:
        cur = stack.pop()
        if id(cur) in visited:
            continue
        visited.add(id(cur))
        if cur.op is not None:
            out_of[id(cur.op)] = cur
            stack.extend(cur.op.inputs)
        elif cur.requires_grad:
            leaves.append(cur)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        out = out_of[id(node)]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if node._ran:
            raise ContractError("tape node visited twice during backward")
        node._ran = True
        for parent, pg in zip(node.inputs, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for leaf in leaves:
        leaf.grad = grads.get(id(leaf), np.zeros(leaf.shape, dtype=leaf.data.dtype))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-3,
    tol: float = 1e-3,
    max_samples_per_param: int = 25,
    seed: int = 0,
) -> dict[str, float]:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` maps a name->Tensor dict to a scalar Tensor and must be
    deterministic and dtype-agnostic: the numeric side re-evaluates it with
    f64 parameters so the difference quotient is not drowned by f32
    rounding.  Returns the max relative error per parameter,
    ``|a - n| / max(|a|, |n|, 1e-8)`` over the sampled coordinates.
    A value above ``tol`` is a reported failure, never an exception.
    """
    leaves = {k: Tensor(v.data, requires_grad=True, dtype=v.data.dtype) for k, v in params.items()}
    loss = f(leaves)
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape, t.data.dtype)) for k, t in leaves.items()}

    base64 = {k: v.data.astype(np.float64) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, ref in base64.items():
        size = ref.size
        idxs = np.arange(size) if size <= max_samples_per_param else np.sort(
            rng.choice(size, size=max_samples_per_param, replace=False)
        )
        worst = 0.0
        for flat in idxs:
            worst = max(worst, _fd_error(f, base64, name, int(flat), eps, analytic))
        errors[name] = worst
    return errors


def _fd_error(f, base64, name, flat, eps, analytic) -> float:
    def eval_at(delta: float) -> float:
        arrs = {}
        for k, v in base64.items():
            if k == name:
                buf = v.copy()
                buf.reshape(-1)[flat] += delta
                arrs[k] = Tensor(buf, dtype=np.float64)
            else:
                arrs[k] = Tensor(v, dtype=np.float64)
        with no_grad():
            return f(arrs).data.item()

    numeric = (eval_at(+eps) - eval_at(-eps)) / (2.0 * eps)
    a = float(analytic[name].reshape(-1)[flat])
    return abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
