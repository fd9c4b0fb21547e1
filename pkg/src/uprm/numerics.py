"""Reverse-mode tape autodiff over dense float64 numpy arrays.

Every operation here has two call paths: plain ndarrays in, plain ndarray
out (used by finite differencing and fast evaluation), or Node in, Node
out, in which case the application is recorded on a Tape and its analytic
adjoint can be replayed later. The adjoint for each primitive lives in the
ADJOINTS registry keyed by op name, so a test can swap one out and watch
grad_check catch it.

Matrices are plain 2-D float64 numpy arrays; biases are 1-D. There is no
tensor wrapper class beyond Node.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

# ---------------------------------------------------------------------------
# tape machinery


@dataclass
class TapeEntry:
    op: str
    inputs: tuple  # node ids
    output: int
    saved: tuple  # forward values the adjoint needs


class Node:
    """A value recorded on a tape. Treat .value as immutable."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so inputs of entry k were
    recorded before k; the reverse sweep therefore sees every consumer of
    a node before its producer and visits each node exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._n_nodes = 0

    def _new_node(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(self, self._n_nodes, arr)
        self._n_nodes += 1
        return node

    def leaf(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("leaf values must be finite")
        return self._new_node(arr)

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractError("node belongs to a different tape")
            return x
        return self.leaf(x)

    def record(self, op: str, inputs: tuple, value, saved: tuple = ()) -> Node:
        out = self._new_node(value)
        self.entries.append(
            TapeEntry(op, tuple(n.id for n in inputs), out.id, saved)
        )
        return out

    def backward(self, root: Node) -> dict:
        """Gradients of the scalar `root` w.r.t. every node, keyed by id.

        After the sweep the dict holds leaf gradients (intermediates are
        popped once their producing entry is processed).
        """
        if root.tape is not self:
            raise ContractError("root recorded on a different tape")
        if root.value.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {root.value.shape}"
            )
        grads: dict = {root.id: np.ones_like(root.value)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue  # no downstream use of this node
            in_grads = ADJOINTS[entry.op](g, *entry.saved)
            for node_id, ig in zip(entry.inputs, in_grads):
                if ig is None:
                    continue
                if node_id in grads:
                    grads[node_id] = grads[node_id] + ig
                else:
                    grads[node_id] = ig
        return grads


ADJOINTS: dict[str, Callable] = {}


def _adjoint(name: str):
    def deco(fn):
        ADJOINTS[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def corrupted_adjoint(op: str, factor: float = 1.5):
    """Scale one registered adjoint by `factor` while the context is open.

    Negative control for the gradient checker: a corrupted adjoint must
    make grad_check fail for any op whose gradient actually flows.
    """
    if op not in ADJOINTS:
        raise ConfigError(f"no adjoint registered under {op!r}")
    orig = ADJOINTS[op]

    def bad(g, *saved):
        return tuple(
            None if gr is None else gr * factor for gr in orig(g, *saved)
        )

    ADJOINTS[op] = bad
    try:
        yield
    finally:
        ADJOINTS[op] = orig


# ---------------------------------------------------------------------------
# dispatch helpers


def _tape_of(*args) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def shape_of(x) -> tuple:
    return x.value.shape if isinstance(x, Node) else np.shape(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape numpy broadcast it up from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs > 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.add(value_of(a), value_of(b))
    an, bn = t.lift(a), t.lift(b)
    out = an.value + bn.value
    return t.record("add", (an, bn), out, (an.value.shape, bn.value.shape))


@_adjoint("add")
def _adj_add(g, sa, sb):
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.subtract(value_of(a), value_of(b))
    an, bn = t.lift(a), t.lift(b)
    out = an.value - bn.value
    return t.record("sub", (an, bn), out, (an.value.shape, bn.value.shape))


@_adjoint("sub")
def _adj_sub(g, sa, sb):
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.multiply(value_of(a), value_of(b))
    an, bn = t.lift(a), t.lift(b)
    out = an.value * bn.value
    return t.record("mul", (an, bn), out, (an.value, bn.value))


@_adjoint("mul")
def _adj_mul(g, av, bv):
    return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)


def mul_const(a, c):
    """Elementwise multiply by a non-differentiated constant."""
    cv = np.asarray(c, dtype=np.float64)
    if not isinstance(a, Node):
        return value_of(a) * cv
    out = a.value * cv
    return a.tape.record("mul_const", (a,), out, (cv, a.value.shape))


@_adjoint("mul_const")
def _adj_mul_const(g, cv, sa):
    return (_unbroadcast(g * cv, sa),)


def add_const(a, c):
    cv = np.asarray(c, dtype=np.float64)
    if not isinstance(a, Node):
        return value_of(a) + cv
    out = a.value + cv
    return a.tape.record("add_const", (a,), out, (a.value.shape,))


@_adjoint("add_const")
def _adj_add_const(g, sa):
    return (_unbroadcast(g, sa),)


def relu(x):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    if not isinstance(x, Node):
        return np.maximum(value_of(x), 0.0)
    out = np.maximum(x.value, 0.0)
    return x.tape.record("relu", (x,), out, (x.value > 0.0,))


@_adjoint("relu")
def _adj_relu(g, mask):
    return (g * mask,)


def sigmoid(x):
    def fwd(v):
        # split by sign so exp never overflows
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    if not isinstance(x, Node):
        return fwd(value_of(x))
    out = fwd(x.value)
    return x.tape.record("sigmoid", (x,), out, (out,))


@_adjoint("sigmoid")
def _adj_sigmoid(g, out):
    return (g * out * (1.0 - out),)


def log(x):
    if not isinstance(x, Node):
        return np.log(value_of(x))
    return x.tape.record("log", (x,), np.log(x.value), (x.value,))


@_adjoint("log")
def _adj_log(g, xv):
    return (g / xv,)


def square(x):
    if not isinstance(x, Node):
        v = value_of(x)
        return v * v
    return x.tape.record("square", (x,), x.value * x.value, (x.value,))


@_adjoint("square")
def _adj_square(g, xv):
    return (2.0 * xv * g,)


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; passthrough gradient strictly inside, 0 outside."""
    if not isinstance(x, Node):
        return np.clip(value_of(x), lo, hi)
    out = np.clip(x.value, lo, hi)
    inside = (x.value > lo) & (x.value < hi)
    return x.tape.record("clip", (x,), out, (inside,))


@_adjoint("clip")
def _adj_clip(g, inside):
    return (g * inside,)


# ---------------------------------------------------------------------------
# linear algebra primitives


def _check_matmul(sa, sb):
    if len(sa) != 2 or len(sb) != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {sa} and {sb}")
    if sa[1] != sb[0]:
        raise DimensionError(f"matmul shape mismatch: {sa} x {sb}")


def matmul(a, b):
    t = _tape_of(a, b)
    if t is None:
        av, bv = value_of(a), value_of(b)
        _check_matmul(av.shape, bv.shape)
        return av @ bv
    an, bn = t.lift(a), t.lift(b)
    _check_matmul(an.value.shape, bn.value.shape)
    out = an.value @ bn.value
    return t.record("matmul", (an, bn), out, (an.value, bn.value))


@_adjoint("matmul")
def _adj_matmul(g, av, bv):
    return g @ bv.T, av.T @ g


def transpose(a):
    if not isinstance(a, Node):
        return value_of(a).T
    return a.tape.record("transpose", (a,), a.value.T.copy(), ())


@_adjoint("transpose")
def _adj_transpose(g):
    return (g.T,)


def reshape(a, shape: tuple):
    if not isinstance(a, Node):
        return value_of(a).reshape(shape)
    out = a.value.reshape(shape)
    return a.tape.record("reshape", (a,), out, (a.value.shape,))


@_adjoint("reshape")
def _adj_reshape(g, orig_shape):
    return (g.reshape(orig_shape),)


# ---------------------------------------------------------------------------
# reductions and row-wise kernels


def sum_all(a):
    if not isinstance(a, Node):
        return np.array([[value_of(a).sum()]])
    out = np.array([[a.value.sum()]])
    return a.tape.record("sum_all", (a,), out, (a.value.shape,))


@_adjoint("sum_all")
def _adj_sum_all(g, shape):
    return (np.full(shape, g.item()),)


def colsum(a):
    """Sum down each column: n x m -> 1 x m."""
    if not isinstance(a, Node):
        return value_of(a).sum(axis=0, keepdims=True)
    out = a.value.sum(axis=0, keepdims=True)
    return a.tape.record("colsum", (a,), out, (a.value.shape[0],))


@_adjoint("colsum")
def _adj_colsum(g, nrows):
    return (np.repeat(g, nrows, axis=0),)


def row_max(a):
    """Row-wise max: n x m -> n x 1; subgradient to the first argmax."""
    if not isinstance(a, Node):
        return value_of(a).max(axis=1, keepdims=True)
    v = a.value
    out = v.max(axis=1, keepdims=True)
    first = np.zeros_like(v)
    first[np.arange(v.shape[0]), v.argmax(axis=1)] = 1.0
    return a.tape.record("row_max", (a,), out, (first,))


@_adjoint("row_max")
def _adj_row_max(g, first):
    return (g * first,)


def _softmax_rows_fwd(v: np.ndarray, temperature: float) -> np.ndarray:
    z = v / temperature
    z = z - z.max(axis=1, keepdims=True)  # shift so exp stays bounded
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a, temperature: float = 1.0):
    """Row-wise softmax of a / temperature, max-shifted for stability."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if not isinstance(a, Node):
        return _softmax_rows_fwd(value_of(a), temperature)
    out = _softmax_rows_fwd(a.value, temperature)
    return a.tape.record("softmax_rows", (a,), out, (out, temperature))


@_adjoint("softmax_rows")
def _adj_softmax_rows(g, s, temperature):
    dot = (g * s).sum(axis=1, keepdims=True)
    return (s * (g - dot) / temperature,)


def masked_softmax_rows(a, mask):
    """Row-wise softmax over positions where mask is nonzero.

    The mask is a constant (not differentiated). Masked positions get
    weight exactly 0. A row with no unmasked position is a contract error.
    """
    m = np.asarray(mask, dtype=bool)
    if shape_of(a) != m.shape:
        raise DimensionError(
            f"mask shape {m.shape} does not match input {shape_of(a)}"
        )
    if not m.any(axis=1).all():
        raise ContractError("masked_softmax row with every position masked")

    def fwd(v):
        z = np.where(m, v, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.where(m, np.exp(z), 0.0)
        return e / e.sum(axis=1, keepdims=True)

    if not isinstance(a, Node):
        return fwd(value_of(a))
    out = fwd(a.value)
    return a.tape.record("masked_softmax_rows", (a,), out, (out,))


@_adjoint("masked_softmax_rows")
def _adj_masked_softmax_rows(g, s):
    # masked entries of s are exactly 0, so they contribute nothing
    dot = (g * s).sum(axis=1, keepdims=True)
    return (s * (g - dot),)


def logsumexp_rows(a):
    """Row-wise log(sum(exp)): n x m -> n x 1, max-shifted."""

    def fwd(v):
        mx = v.max(axis=1, keepdims=True)
        return mx + np.log(np.exp(v - mx).sum(axis=1, keepdims=True))

    if not isinstance(a, Node):
        return fwd(value_of(a))
    out = fwd(a.value)
    s = _softmax_rows_fwd(a.value, 1.0)
    return a.tape.record("logsumexp_rows", (a,), out, (s,))


@_adjoint("logsumexp_rows")
def _adj_logsumexp_rows(g, s):
    return (g * s,)


def _ln_rows_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, xhat, inv_std


def layer_norm_rows(x, gamma, beta, eps: float = 1e-5):
    """Row-wise layer norm with affine output; gamma/beta are 1-D (d,)."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    d = shape_of(x)[-1]
    if shape_of(gamma) != (d,) or shape_of(beta) != (d,):
        raise ContractError(
            f"gamma/beta must have shape ({d},), got "
            f"{shape_of(gamma)} and {shape_of(beta)}"
        )
    t = _tape_of(x, gamma, beta)
    if t is None:
        out, _, _ = _ln_rows_fwd(value_of(x), value_of(gamma), value_of(beta), eps)
        return out
    xn, gn, bn = t.lift(x), t.lift(gamma), t.lift(beta)
    out, xhat, inv_std = _ln_rows_fwd(xn.value, gn.value, bn.value, eps)
    return t.record("layer_norm_rows", (xn, gn, bn), out, (xhat, inv_std, gn.value))


@_adjoint("layer_norm_rows")
def _adj_layer_norm_rows(g, xhat, inv_std, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma
    # biased-variance layer norm backward
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# structural primitives


def concat_cols(*parts):
    t = _tape_of(*parts)
    if t is None:
        return np.concatenate([value_of(p) for p in parts], axis=1)
    nodes = [t.lift(p) for p in parts]
    out = np.concatenate([n.value for n in nodes], axis=1)
    widths = tuple(n.value.shape[1] for n in nodes)
    return t.record("concat_cols", tuple(nodes), out, (widths,))


@_adjoint("concat_cols")
def _adj_concat_cols(g, widths):
    grads, at = [], 0
    for w in widths:
        grads.append(g[:, at : at + w])
        at += w
    return tuple(grads)


def concat_rows(*parts):
    t = _tape_of(*parts)
    if t is None:
        return np.concatenate([value_of(p) for p in parts], axis=0)
    nodes = [t.lift(p) for p in parts]
    out = np.concatenate([n.value for n in nodes], axis=0)
    heights = tuple(n.value.shape[0] for n in nodes)
    return t.record("concat_rows", tuple(nodes), out, (heights,))


@_adjoint("concat_rows")
def _adj_concat_rows(g, heights):
    grads, at = [], 0
    for h in heights:
        grads.append(g[at : at + h, :])
        at += h
    return tuple(grads)


def slice_cols(a, start: int, stop: int):
    if not isinstance(a, Node):
        return value_of(a)[:, start:stop]
    out = a.value[:, start:stop].copy()
    return a.tape.record("slice_cols", (a,), out, (a.value.shape, start, stop))


@_adjoint("slice_cols")
def _adj_slice_cols(g, shape, start, stop):
    z = np.zeros(shape)
    z[:, start:stop] = g
    return (z,)


def slice_rows(a, start: int, stop: int):
    if not isinstance(a, Node):
        return value_of(a)[start:stop, :]
    out = a.value[start:stop, :].copy()
    return a.tape.record("slice_rows", (a,), out, (a.value.shape, start, stop))


@_adjoint("slice_rows")
def _adj_slice_rows(g, shape, start, stop):
    z = np.zeros(shape)
    z[start:stop, :] = g
    return (z,)


def gather_rows(a, idx):
    """Select rows by a constant integer index vector (repeats allowed)."""
    ix = np.asarray(idx, dtype=np.intp)
    if not isinstance(a, Node):
        return value_of(a)[ix, :]
    out = a.value[ix, :]
    return a.tape.record("gather_rows", (a,), out, (a.value.shape, ix))


@_adjoint("gather_rows")
def _adj_gather_rows(g, shape, ix):
    z = np.zeros(shape)
    np.add.at(z, ix, g)
    return (z,)


def take_per_row(a, idx):
    """out[i, 0] = a[i, idx[i]] for a constant per-row column index."""
    ix = np.asarray(idx, dtype=np.intp)
    n = shape_of(a)[0]
    if ix.shape != (n,):
        raise ContractError(f"need one column index per row, got {ix.shape}")
    if not isinstance(a, Node):
        v = value_of(a)
        return v[np.arange(n), ix][:, None]
    out = a.value[np.arange(n), ix][:, None]
    return a.tape.record("take_per_row", (a,), out, (a.value.shape, ix))


@_adjoint("take_per_row")
def _adj_take_per_row(g, shape, ix):
    z = np.zeros(shape)
    z[np.arange(shape[0]), ix] = g[:, 0]
    return (z,)


# ---------------------------------------------------------------------------
# spec-level operations


def softmax(v, temperature: float = 1.0):
    """Softmax of a vector (or row-wise over a matrix)."""
    if shape_of(v) == () or 0 in shape_of(v):
        raise ContractError("softmax input must be non-empty")
    if len(shape_of(v)) == 1:
        n = shape_of(v)[0]
        return reshape(softmax_rows(reshape(v, (1, n)), temperature), (n,))
    return softmax_rows(v, temperature)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Layer norm of a vector (or row-wise over a matrix)."""
    if len(shape_of(x)) == 1:
        n = shape_of(x)[0]
        return reshape(
            layer_norm_rows(reshape(x, (1, n)), gamma, beta, eps), (n,)
        )
    return layer_norm_rows(x, gamma, beta, eps)


def mean_all(a):
    size = int(np.prod(shape_of(a)))
    return mul_const(sum_all(a), 1.0 / size)


def attention(q, k, v, heads: int = 1, logit_bias=None):
    """Multi-head scaled dot-product attention.

    Heads are split column-wise from q/k and v, attended independently
    with 1/sqrt(head_dim) scaling, and concatenated back. The output
    projection is the identity; callers that want a learned projection
    apply their own matrix on the result. `logit_bias` is an optional
    constant (n_q, n_k) matrix added to the pre-softmax scores of every
    head, after scaling, e.g. an alignment prior.
    """
    sq, sk, sv = shape_of(q), shape_of(k), shape_of(v)
    if sq[1] != sk[1]:
        raise DimensionError(f"q cols {sq} must match k cols {sk}")
    if sk[0] != sv[0]:
        raise DimensionError(f"k rows {sk} must match v rows {sv}")
    if sq[1] % heads != 0 or sv[1] % heads != 0:
        raise ConfigError(
            f"columns {sq[1]} (q/k) and {sv[1]} (v) must divide by heads={heads}"
        )
    dq = sq[1] // heads
    dv = sv[1] // heads
    scale = np.sqrt(dq)
    if logit_bias is not None:
        logit_bias = np.asarray(logit_bias, dtype=np.float64)
        if logit_bias.shape != (sq[0], sk[0]):
            raise DimensionError(
                f"logit_bias {logit_bias.shape} must be ({sq[0]}, {sk[0]})"
            )
    outs = []
    for h in range(heads):
        qh = slice_cols(q, h * dq, (h + 1) * dq) if heads > 1 else q
        kh = slice_cols(k, h * dq, (h + 1) * dq) if heads > 1 else k
        vh = slice_cols(v, h * dv, (h + 1) * dv) if heads > 1 else v
        scores = matmul(qh, transpose(kh))
        if logit_bias is not None:
            # pre-scaled so the prior lands on the softmax as given
            scores = add(scores, logit_bias * scale)
        weights = softmax_rows(scores, temperature=scale)
        outs.append(matmul(weights, vh))
    return outs[0] if heads == 1 else concat_cols(*outs)


@dataclass
class FfnParams:
    """Two dense layers with a ReLU between: d -> hidden -> d_out."""

    weight1: object  # d x hidden
    bias1: object  # (hidden,)
    weight2: object  # hidden x d_out
    bias2: object  # (d_out,)


def init_ffn(rng: np.random.Generator, d_in: int, hidden: int, d_out: int,
             w_scale: Optional[float] = None) -> FfnParams:
    s1 = w_scale if w_scale is not None else 1.0 / np.sqrt(d_in)
    s2 = w_scale if w_scale is not None else 1.0 / np.sqrt(hidden)
    return FfnParams(
        weight1=rng.normal(0.0, s1, size=(d_in, hidden)),
        bias1=np.zeros(hidden),
        weight2=rng.normal(0.0, s2, size=(hidden, d_out)),
        bias2=np.zeros(d_out),
    )


def ffn_forward(x, p: FfnParams):
    """relu(x W1 + b1) W2 + b2, applied row-wise."""
    sx, sw = shape_of(x), shape_of(p.weight1)
    if sx[1] != sw[0]:
        raise DimensionError(f"ffn input cols {sx} must match weight1 rows {sw}")
    h = relu(add(matmul(x, p.weight1), p.bias1))
    return add(matmul(h, p.weight2), p.bias2)


# ---------------------------------------------------------------------------
# finite-difference gradient verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    failures: list  # (input index, flat coordinate, analytic, numeric, rel err)
    message: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        head = (
            f"{status}: max rel error {self.max_rel_error:.3e} "
            f"over {self.n_checked} coordinates"
        )
        if self.message:
            head += f" ({self.message})"
        for inp, coord, ana, num, rel in self.failures[:10]:
            head += (
                f"\n  input {inp} coord {coord}: "
                f"analytic {ana:.6e} vs fd {num:.6e} (rel {rel:.3e})"
            )
        return head


def grad_check(
    scalar_function,
    inputs,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    max_coords: Optional[int] = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `scalar_function` must accept the inputs either as Nodes (analytic
    pass) or as plain ndarrays (differencing passes) and return a scalar.
    Relative error uses an absolute floor of 5e-6: central differences
    at the default step through a deep composite carry round-off of
    order 1e-10, so coordinates smaller than a few 1e-6 cannot be
    distinguished from true agreement at a 1e-4 tolerance and count as
    matching within noise; per-op cases with concentrated probes cover
    those regimes instead. When `max_coords` is set, only the coordinates with
    the largest analytic gradients are differenced per input, which
    keeps large composites affordable.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            return GradCheckReport(False, np.inf, 0, [], f"input {i} not finite")

    tape = Tape()
    nodes = [tape.leaf(a) for a in arrays]
    out = scalar_function(*nodes)
    if not isinstance(out, Node):
        raise ContractError("function must return a tape Node for the analytic pass")
    if out.value.size != 1:
        raise ContractError(f"function must return a scalar, got {out.value.shape}")
    if not np.isfinite(out.value).all():
        return GradCheckReport(False, np.inf, 0, [], "non-finite function value")
    grads = tape.backward(out)

    def eval_plain(args):
        r = scalar_function(*args)
        return float(value_of(r).reshape(()))

    max_rel = 0.0
    failures = []
    n_checked = 0
    for i, a in enumerate(arrays):
        analytic = grads.get(nodes[i].id)
        if analytic is None:
            analytic = np.zeros_like(a)
        flat = a.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            # check the largest-magnitude coordinates: they carry the
            # gradient mass, any adjoint bug shows on them, and they sit
            # safely above the differencing noise floor
            mags = np.abs(analytic.reshape(-1))
            coords = np.sort(np.argsort(mags)[-max_coords:])
        for c in coords:
            orig = flat[c]
            work = a.copy().reshape(-1)
            work[c] = orig + step
            args = arrays[:i] + [work.reshape(a.shape)] + arrays[i + 1 :]
            fp = eval_plain(args)
            work[c] = orig - step
            fm = eval_plain(args)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append((i, int(c), np.nan, np.nan, np.inf))
                return GradCheckReport(
                    False, np.inf, n_checked, failures,
                    f"non-finite value when perturbing input {i} coord {c}",
                )
            fd = (fp - fm) / (2.0 * step)
            ana = float(analytic.reshape(-1)[c])
            rel = abs(ana - fd) / max(abs(ana), abs(fd), 5e-6)
            max_rel = max(max_rel, rel)
            n_checked += 1
            if rel > rel_tol:
                failures.append((i, int(c), ana, fd, rel))
    return GradCheckReport(not failures, max_rel, n_checked, failures)


# ---------------------------------------------------------------------------
# registry of named gradient cases (cli grad-check + acceptance suite)

GRAD_CASES: dict[str, Callable] = {}


def register_grad_case(name: str):
    """Register factory(seed) -> (scalar_function, inputs, max_coords)."""

    def deco(fn):
        GRAD_CASES[name] = fn
        return fn

    return deco


@register_grad_case("softmax")
def _case_softmax(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 2.0, size=(3, 5))
    w = rng.normal(size=(3, 5))  # fixed probe so the scalar sees every output

    def f(xn):
        return sum_all(mul_const(softmax_rows(xn), w))

    return f, [x], None


@register_grad_case("layer_norm")
def _case_layer_norm(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.5, size=(4, 6))
    gamma = rng.normal(1.0, 0.3, size=6)
    beta = rng.normal(0.0, 0.3, size=6)
    w = rng.normal(size=(4, 6))

    def f(xn, gn, bn):
        return sum_all(mul_const(layer_norm_rows(xn, gn, bn), w))

    return f, [x, gamma, beta], None


@register_grad_case("attention")
def _case_attention(seed: int):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    w = rng.normal(size=(3, 4))

    def f(qn, kn, vn):
        return sum_all(mul_const(attention(qn, kn, vn, heads=2), w))

    return f, [q, k, v], None


@register_grad_case("ffn")
def _case_ffn(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    p = init_ffn(rng, 4, 6, 5)
    # random biases keep hidden preactivations off the relu kink, where
    # central differences straddle both slopes
    p.bias1 = rng.normal(0.0, 0.4, size=6)
    p.bias2 = rng.normal(0.0, 0.4, size=5)
    w = rng.normal(size=(3, 5))

    def f(xn, w1, b1, w2, b2):
        return sum_all(mul_const(ffn_forward(xn, FfnParams(w1, b1, w2, b2)), w))

    return f, [x, p.weight1, p.bias1, p.weight2, p.bias2], None
