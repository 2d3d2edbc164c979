"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly (define-by-run): every operation returns a
:class:`Tensor` that records its operation kind, its parent tensors and a
backward closure, so the tape reachable from an output node *is* the
computation graph, already in topological order of construction.
``backward`` replays that tape once in reverse. Everything is 64-bit and
single threaded; repeated evaluation of the same graph on the same inputs
is bit-identical.

Log-space reductions (``logsumexp``, ``log_softmax``) are first-class
primitives so lattice losses never exponentiate small probabilities, and
``detach`` (identity forward, zero backward) supports teacher branches in
distillation losses.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array plus tape bookkeeping.

    ``data`` is always a contiguous float64 ndarray. ``grad`` has the same
    shape once backward has touched the node. Values are treated as
    immutable after node evaluation; only leaf parameters are updated in
    place, and only between graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use mul + reciprocal explicitly")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def apply_op(
    op: str,
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as a graph node.

    ``vjp`` maps the output gradient to one gradient (or None) per parent.
    The closure is only attached when the tape is recording and some parent
    requires grad; otherwise the result is a constant leaf. Loss modules use
    this hook to register dynamic-programming losses as single primitives.
    """
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order; graphs from lattice recursions can be deep.
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


def backward(output: Tensor) -> None:
    """Accumulate d output / d node into ``grad`` for every reachable node.

    ``output`` must be scalar. Existing gradients are accumulated into, not
    replaced; call :func:`zero_grads` between optimization steps.
    """
    if output.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if not np.isfinite(output.data).all():
        raise FloatingPointError("backward called on a non-finite output")
    if not output.requires_grad:
        return
    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._vjp is None:
            # Leaf parameter: expose the accumulated gradient.
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            elif p._vjp is None:
                node_g = p.grad
                p.grad = pg if node_g is None else node_g + pg
            else:
                grads[id(p)] = pg
    # Leaves collected directly above; interior grads are transient.


def gradients(output: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return a gradient map covering exactly the
    requires_grad entries of ``params`` (zeros where disconnected)."""
    for p in params.values():
        p.zero_grad()
    backward(output)
    out = {}
    for name, p in params.items():
        if p.requires_grad:
            out[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives. Each VJP is exercised by finite differences in the test suite.
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return apply_op("add", out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return apply_op("sub", out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return apply_op(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects arrays of rank >= 2")

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return apply_op("matmul", out, (a, b), vjp)


def _parse_einsum2(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    for name, s in (("lhs-a", sa), ("lhs-b", sb), ("out", out)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum2 {spec!r}: repeated index in {name}")
    for ch in sa:
        if ch not in sb and ch not in out:
            raise ValueError(f"einsum2 {spec!r}: index {ch!r} of first operand is summed out alone")
    for ch in sb:
        if ch not in sa and ch not in out:
            raise ValueError(f"einsum2 {spec!r}: index {ch!r} of second operand is summed out alone")
    return sa, sb, out


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose VJP is again an einsum.

    Restricted to specs where no index repeats within one operand and every
    contracted index appears in the other operand, which covers all
    attention-style contractions used by the model code.
    """
    sa, sb, sout = _parse_einsum2(spec)
    out = np.einsum(spec, a.data, b.data)

    def vjp(g):
        ga = np.einsum(f"{sout},{sb}->{sa}", g, b.data)
        gb = np.einsum(f"{sa},{sout}->{sb}", a.data, g)
        return ga, gb

    return apply_op(f"einsum[{spec}]", out, (a, b), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return apply_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return apply_op("narrow", a.data[idx].copy(), (a,), vjp)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return apply_op("sum", out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return apply_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out = a.data * s
    return apply_op("silu", out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return apply_op("relu", out, (a,), lambda g: (g * (a.data > 0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return apply_op("log", out, (a,), lambda g: (g / a.data,))


def softmax(a: Tensor) -> Tensor:
    """Row-stable softmax over the last axis. Masked (-inf) entries get 0."""
    m = np.max(a.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    m = np.max(a.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return apply_op("log_softmax", out, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m_safe).sum(axis=axis, keepdims=True)
    out_k = m_safe + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.exp(a.data - out_k) * gk,)

    return apply_op("logsumexp", out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data
    d = x.data.shape[-1]

    def vjp(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return apply_op("layer_norm", out, (x, gain, bias), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return apply_op("embedding", out, (table,), vjp)


def pick(x: Tensor, ids: np.ndarray) -> Tensor:
    """x[(i, ids[i])] for each row i of a 2-D tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    n = x.data.shape[0]
    rows = np.arange(n)
    out = x.data[rows, ids]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, ids), g)
        return (dx,)

    return apply_op("pick", out, (x,), vjp)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Time-axis convolution: x (L, Cin), w (K, Cin, Cout) -> (Lout, Cout)."""
    L = x.data.shape[0]
    K = w.data.shape[0]
    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    l_out = (L + 2 * padding - K) // stride + 1
    if l_out < 1:
        raise ValueError(f"conv1d output length {l_out} < 1 for input length {L}")
    out = np.zeros((l_out, w.data.shape[2]))
    for k in range(K):
        seg = xp[k : k + stride * (l_out - 1) + 1 : stride]
        out += seg @ w.data[k]
    if bias is not None:
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for k in range(K):
            seg = xp[k : k + stride * (l_out - 1) + 1 : stride]
            dw[k] = seg.T @ g
            dxp[k : k + stride * (l_out - 1) + 1 : stride] += g @ w.data[k].T
        dx = dxp[padding : padding + L]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return apply_op("conv1d", out, parents, vjp)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel convolution with same-length output: x (L, C), w (K, C), K odd."""
    L, C = x.data.shape
    K = w.data.shape[0]
    if K % 2 != 1:
        raise ValueError("depthwise kernel must be odd")
    pad = (K - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    out = np.zeros((L, C))
    for k in range(K):
        out += xp[k : k + L] * w.data[k]

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for k in range(K):
            dw[k] = (xp[k : k + L] * g).sum(axis=0)
            dxp[k : k + L] += g * w.data[k]
        return dxp[pad : pad + L], dw

    return apply_op("depthwise_conv1d", out, (x, w), vjp)


def detach(a: Tensor) -> Tensor:
    """Identity forward, zero backward (teacher branches in distillation)."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    n_checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            flag = "ok" if e.max_rel_err <= self.tolerance else "FAIL"
            lines.append(f"{e.name}\t{e.max_rel_err:.3e}\t{flag}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries_per_param: int = 6,
    rng: np.random.Generator | None = None,
    rel_floor: float = 1e-4,
    name: str = "loss",
) -> GradCheckReport:
    """Central finite differences (f(x+e) - f(x-e)) / 2e against the tape.

    Relative error uses max(|analytic|, |numeric|, rel_floor) as
    denominator so that genuinely-zero gradients are not flagged on
    roundoff noise. Large parameters are subsampled deterministically.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite value in {name} at the evaluation point")
    backward(out)
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
        if p.requires_grad
    }

    report = GradCheckReport(tolerance=tolerance)
    for pname, p in params.items():
        if not p.requires_grad:
            continue
        n = p.data.size
        if n <= max_entries_per_param:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=max_entries_per_param, replace=False)
        worst = GradCheckEntry(pname, 0.0, -1, 0.0, 0.0, len(indices))
        flat = p.data.reshape(-1)
        for i in indices:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                f_plus = loss_fn().item()
                flat[i] = orig - epsilon
                f_minus = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite value while perturbing {pname} in {name}")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[pname].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            if rel > worst.max_rel_err:
                worst = GradCheckEntry(pname, rel, int(i), a, numeric, len(indices))
        report.entries.append(worst)
    return report
