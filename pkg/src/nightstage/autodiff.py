"""Reverse-mode automatic differentiation on dense numpy tensors.

A small define-by-run engine: every operation on :class:`Tensor` records its
inputs and a backward closure on a tape, and :meth:`Tensor.backward` walks
the recorded graph in reverse topological order.  Computation is float64
throughout; gradient buffers of trainable leaves are allocated eagerly so
that parameters untouched by a loss keep exact zero gradients.

Primitives cover what a gated recurrent sequence classifier needs: matrix
multiplication, broadcasting add/mul, sigmoid/tanh/exp/log/power, softmax
over the last axis, concatenation, basic slicing, sum/mean reductions, and
a fused LSTM cell update (`lstm_step`) that exists purely to keep the node
count of unrolled recurrences low.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeMismatchError(AutodiffError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(AutodiffError):
    """A node produced NaN or infinity during the forward pass."""


class NondeterministicGraphError(AutodiffError):
    """Two evaluations of the same graph disagreed bit-for-bit."""


# When True, every op validates that its output is finite.  Off by default:
# the model layer does its own cheaper per-step checks during training.
FINITE_CHECKS = False

_grad_enabled = True
_node_ids = itertools.count()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus its position in the recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    # Make numpy defer to the reflected operators below instead of trying to
    # broadcast a Tensor into an object array (ndarray <op> Tensor).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, id={self.node_id})"

    # -- graph construction helpers -------------------------------------

    def _needs_tape(self):
        return _grad_enabled and (self.requires_grad or self._parents)

    def backward(self):
        """Backpropagate from this scalar node through the recorded graph."""
        if self.data.size != 1:
            raise AutodiffError(
                f"backward() requires a scalar loss, got shape {self.data.shape} "
                f"at node {self.node_id} ({self.op})"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, op, backward_builder):
    """Create an op node; skip tape bookkeeping when gradients are off."""
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        node_id = next(_node_ids)
        raise NonFiniteError(f"non-finite output of op {op!r} (node {node_id})")
    track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    if not track:
        return Tensor(data, op=op)
    out = Tensor(data, op=op, parents=parents)
    out._backward = backward_builder(out)
    return out


def _needs_grad(t):
    return t.requires_grad or t._parents


def _accum(parent, g):
    if _needs_grad(parent):
        if parent.grad is None:
            parent.grad = np.zeros_like(parent.data)
        parent.grad += g


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in visited:
            continue
        visited.add(node)
        stack.append((node, True))
        for p in node._parents:
            if p not in visited and (p.requires_grad or p._parents):
                stack.append((p, False))
    return order


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitives ------------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as err:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}") from err

    def build(out):
        def backward():
            g = out.grad
            if _needs_grad(a):
                _accum(a, _unbroadcast(g, a.data.shape))
            if _needs_grad(b):
                _accum(b, _unbroadcast(g, b.data.shape))

        return backward

    return _make(data, (a, b), "add", build)


def neg(a):
    a = _lift(a)

    def build(out):
        def backward():
            _accum(a, -out.grad)

        return backward

    return _make(-a.data, (a,), "neg", build)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as err:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}") from err

    def build(out):
        def backward():
            g = out.grad
            if _needs_grad(a):
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if _needs_grad(b):
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return backward

    return _make(data, (a, b), "mul", build)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def build(out):
        def backward():
            g = out.grad
            if _needs_grad(a):
                _accum(a, g @ b.data.T)
            if _needs_grad(b):
                _accum(b, a.data.T @ g)

        return backward

    return _make(a.data @ b.data, (a, b), "matmul", build)


def sigmoid(a):
    a = _lift(a)
    data = expit(a.data)

    def build(out):
        def backward():
            _accum(a, out.grad * data * (1.0 - data))

        return backward

    return _make(data, (a,), "sigmoid", build)


def tanh(a):
    a = _lift(a)
    data = np.tanh(a.data)

    def build(out):
        def backward():
            _accum(a, out.grad * (1.0 - data * data))

        return backward

    return _make(data, (a,), "tanh", build)


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)

    def build(out):
        def backward():
            _accum(a, out.grad * data)

        return backward

    return _make(data, (a,), "exp", build)


def log(a):
    """Natural logarithm.  The argument must be positive; loss code is
    expected to add its own epsilon before calling."""
    a = _lift(a)

    def build(out):
        def backward():
            _accum(a, out.grad / a.data)

        return backward

    return _make(np.log(a.data), (a,), "log", build)


def power(a, p):
    a = _lift(a)
    p = float(p)

    def build(out):
        def backward():
            _accum(a, out.grad * p * np.power(a.data, p - 1.0))

        return backward

    return _make(np.power(a.data, p), (a,), "power", build)


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtracted) along `axis`."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def build(out):
        def backward():
            g = out.grad
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accum(a, (g - dot) * data)

        return backward

    return _make(data, (a,), "softmax", build)


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def getitem(a, key):
    a = _lift(a)
    data = a.data[key]
    basic = _is_basic_index(key)

    def build(out):
        def backward():
            if not (a.requires_grad or a._parents):
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            if basic:
                a.grad[key] += out.grad
            else:
                np.add.at(a.grad, key, out.grad)

        return backward

    return _make(data, (a,), "getitem", build)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: empty tensor list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeMismatchError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from err
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build(out):
        def backward():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

        return backward

    return _make(data, tuple(tensors), "concat", build)


def reshape(a, shape):
    a = _lift(a)

    def build(out):
        def backward():
            _accum(a, out.grad.reshape(a.data.shape))

        return backward

    return _make(a.data.reshape(shape), (a,), "reshape", build)


def tensor_sum(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def build(out):
        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

        return backward

    return _make(data, (a,), "sum", build)


def tensor_mean(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def lstm_step(pre, c_prev):
    """Fused gated-cell update.

    `pre` holds the stacked gate pre-activations ``[i | f | g | o]`` of shape
    (rows, 4*hidden); `c_prev` is the previous cell state (rows, hidden).
    Returns ``(h, c)``.  Equivalent to slicing four gates and combining them
    with elementwise primitives, but records two nodes instead of ~15, which
    matters when recurrences are unrolled over dozens of steps.
    """
    pre, c_prev = _lift(pre), _lift(c_prev)
    rows, four_h = pre.data.shape
    hidden = four_h // 4
    if four_h != 4 * hidden or c_prev.data.shape != (rows, hidden):
        raise ShapeMismatchError(
            f"lstm_step: pre {pre.shape} incompatible with cell state {c_prev.shape}"
        )
    i = expit(pre.data[:, :hidden])
    f = expit(pre.data[:, hidden : 2 * hidden])
    g = np.tanh(pre.data[:, 2 * hidden : 3 * hidden])
    o = expit(pre.data[:, 3 * hidden :])
    c_data = f * c_prev.data + i * g
    tc = np.tanh(c_data)
    h_data = o * tc

    def build_c(out_c):
        def backward():
            gc = out_c.grad
            dpre = np.empty_like(pre.data)
            dpre[:, :hidden] = gc * g * i * (1.0 - i)
            dpre[:, hidden : 2 * hidden] = gc * c_prev.data * f * (1.0 - f)
            dpre[:, 2 * hidden : 3 * hidden] = gc * i * (1.0 - g * g)
            dpre[:, 3 * hidden :] = 0.0
            _accum(pre, dpre)
            _accum(c_prev, gc * f)

        return backward

    c = _make(c_data, (pre, c_prev), "lstm_cell_state", build_c)

    def build_h(out_h):
        def backward():
            gh = out_h.grad
            if pre.requires_grad or pre._parents:
                if pre.grad is None:
                    pre.grad = np.zeros_like(pre.data)
                pre.grad[:, 3 * hidden :] += gh * tc * o * (1.0 - o)
            _accum(c, gh * o * (1.0 - tc * tc))

        return backward

    h = _make(h_data, (pre, c), "lstm_cell_output", build_h)
    return h, c


def lstm_unroll(proj, u, steps, rows, reverse=False):
    """Run a whole unidirectional gated recurrence as one graph node.

    `proj` holds the precomputed input projections ``x_t W + b`` for all
    steps, stacked step-major as (steps·rows, 4·hidden); `u` is the
    (hidden, 4·hidden) recurrent matrix.  Initial state is zero.  Returns
    the hidden states stacked the same way.  Set `reverse=True` to process
    the step blocks in descending order (the output layout is unchanged).

    Equivalent to chaining :func:`lstm_step` per step, but records a single
    node with an internal backpropagation-through-time loop — the node
    count of an unrolled recurrence is what dominates tape overhead.
    """
    proj, u = _lift(proj), _lift(u)
    total, four_h = proj.data.shape
    hidden = four_h // 4
    if four_h != 4 * hidden or u.data.shape != (hidden, four_h) or total != steps * rows:
        raise ShapeMismatchError(
            f"lstm_unroll: proj {proj.shape} / u {u.shape} incompatible with "
            f"steps={steps}, rows={rows}"
        )
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    states = np.empty((total, hidden))
    u_data = u.data
    h = np.zeros((rows, hidden))
    c = np.zeros((rows, hidden))
    cache = []
    for t in order:
        pre = proj.data[t * rows : (t + 1) * rows] + h @ u_data
        i = expit(pre[:, :hidden])
        f = expit(pre[:, hidden : 2 * hidden])
        g = np.tanh(pre[:, 2 * hidden : 3 * hidden])
        o = expit(pre[:, 3 * hidden :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        states[t * rows : (t + 1) * rows] = h
        cache.append((t, i, f, g, o, c_prev, tc, h_prev))

    def build(out):
        def backward():
            gout = out.grad
            want_proj = proj.requires_grad or proj._parents
            want_u = u.requires_grad or u._parents
            dproj = np.empty_like(proj.data) if want_proj else None
            du = np.zeros_like(u_data) if want_u else None
            dh_carry = np.zeros((rows, hidden))
            dc_carry = np.zeros((rows, hidden))
            dpre = np.empty((rows, four_h))
            for t, i, f, g, o, c_prev, tc, h_prev in reversed(cache):
                dh = gout[t * rows : (t + 1) * rows] + dh_carry
                dc = dh * o * (1.0 - tc * tc) + dc_carry
                dpre[:, :hidden] = dc * g * i * (1.0 - i)
                dpre[:, hidden : 2 * hidden] = dc * c_prev * f * (1.0 - f)
                dpre[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
                dpre[:, 3 * hidden :] = (dh * tc) * o * (1.0 - o)
                if want_proj:
                    dproj[t * rows : (t + 1) * rows] = dpre
                if want_u:
                    du += h_prev.T @ dpre
                dh_carry = dpre @ u_data.T
                dc_carry = dc * f
            if want_proj:
                _accum(proj, dproj)
            if want_u:
                _accum(u, du)

        return backward

    return _make(states, (proj, u), "lstm_unroll", build)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check over named parameters."""

    passed: bool
    tol: float
    step: float
    max_rel_error: float
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check[{verdict}] max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"


def zero_grads(params):
    """Reset gradient buffers of the given tensors to exact zeros."""
    for p in params.values() if isinstance(params, dict) else params:
        if p.grad is not None:
            p.grad[...] = 0.0


def grad_check(build_loss, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients with central finite differences.

    `build_loss` must rebuild and return the scalar loss from scratch on
    every call (it is invoked 2 + 2*n_coordinates times).  `params` maps
    names to the leaf tensors being checked.  The relative error of each
    coordinate is |a - n| / max(|a|, |n|, 1e-6); an empty parameter dict
    yields a trivially passing report.

    Raises :class:`NondeterministicGraphError` if two evaluations of the
    loss are not bit-identical.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    first = build_loss()
    with no_grad():
        second = build_loss()
    if not np.array_equal(first.data, second.data):
        raise NondeterministicGraphError(
            f"loss evaluated twice gave {first.data!r} then {second.data!r}"
        )
    zero_grads(params)
    first.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    zero_grads(params)

    per_param = {}
    overall = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            with no_grad():
                f_plus = float(build_loss().data)
            flat[idx] = orig - step
            with no_grad():
                f_minus = float(build_loss().data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(a_flat[idx] - numeric) / max(abs(a_flat[idx]), abs(numeric), 1e-6)
            worst = max(worst, rel)
        per_param[name] = worst
        overall = max(overall, worst)
    return GradCheckReport(
        passed=overall < tol, tol=tol, step=step, max_rel_error=overall, per_param=per_param
    )
