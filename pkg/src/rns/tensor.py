"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how evaluation runs. There is no broadcasting: every elementwise op demands
identical shapes, and contractions go through :func:`einsum` or :func:`matmul`.

Example::

    w = Tensor([0.5, -1.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(sigmoid(w))
    backward(tape, loss)
    w.grad  # sigma'(w)
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

DEBUG = bool(os.environ.get("RNS_DEBUG"))


class DimensionError(ValueError):
    """Shapes of operands do not fit the operation."""


class TapeError(RuntimeError):
    """Misuse of a computation tape (non-scalar loss, second backward, ...)."""


class Tensor:
    """Dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Append-only record of differentiable operations.

    Used as a context manager. Nodes are appended in execution order, so
    inputs always precede the nodes that consume them. A tape supports a
    single :meth:`backward`; a second call raises :class:`TapeError` rather
    than silently accumulating gradients twice.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check(out: np.ndarray, name: str) -> None:
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Wrap a forward result and record it when any input is tracked."""
    _check(out, name)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.requires_grad = needs
    result._node = None
    tape = _active_tape()
    if needs and tape is not None:
        node = _Node(tuple(inputs), result, backward_fn)
        result._node = node
        tape.nodes.append(node)
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through ``tape`` into every tracked tensor.

    Leaf tensors accumulate into ``.grad``; intermediate tensors get their
    gradient assigned. Untracked tensors are never touched.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
    # a recorded loss that was never an op output (a tracked leaf)
    if loss._node is None and loss.requires_grad:
        one = np.ones_like(loss.data)
        loss.grad = one if loss.grad is None else loss.grad + one


# ---------------------------------------------------------------------------
# selection freezing: argmax decisions can be recorded and replayed so finite
# difference checks perturb a fixed piecewise-linear branch
# ---------------------------------------------------------------------------


class SelectionLog:
    def __init__(self):
        self.entries: list[np.ndarray] = []
        self.cursor = 0
        self.mode = "record"


@contextmanager
def record_selections() -> Iterator[SelectionLog]:
    log = SelectionLog()
    prev = getattr(_local, "selections", None)
    _local.selections = log
    try:
        yield log
    finally:
        _local.selections = prev


@contextmanager
def replay_selections(log: SelectionLog) -> Iterator[SelectionLog]:
    prev = getattr(_local, "selections", None)
    log.mode = "replay"
    log.cursor = 0
    _local.selections = log
    try:
        yield log
    finally:
        _local.selections = prev
        log.mode = "record"


def selection(compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Return an index array, honouring an active record/replay log."""
    log = getattr(_local, "selections", None)
    if log is None:
        return compute()
    if log.mode == "replay":
        idx = log.entries[log.cursor]
        log.cursor += 1
        return idx
    idx = compute()
    log.entries.append(idx)
    return idx


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions, reshaping
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    if out.size != a.size:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}")
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, tuple(tensors), bw, "stack")


def max_axis(a: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis`` plus the argmax; ties go to the lowest index.

    The gradient flows only to the selected position.
    """
    x = a.data
    if x.shape[axis] == 0:
        raise DimensionError("max over an empty axis")
    idx = selection(lambda: np.argmax(x, axis=axis))
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw, "max"), idx


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: needs equal 1-D shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.array(ad @ bd), (a, b), lambda g: (g * bd, g * ad), "dot")


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum (``"ij,jk->ik"``) with gradients.

    Every index of an operand must appear in the output or in another
    operand, and no operand may repeat an index.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise DimensionError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    sizes: dict[str, int] = {}
    for sub_i, t in zip(in_subs, operands):
        if len(sub_i) != t.data.ndim or len(set(sub_i)) != len(sub_i):
            raise DimensionError(f"einsum: subscript {sub_i!r} does not fit shape {t.shape}")
        for ch, n in zip(sub_i, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum: index {ch!r} has sizes {sizes[ch]} and {n}")
    for i, sub_i in enumerate(in_subs):
        seen = set(out_sub).union(*(s for j, s in enumerate(in_subs) if j != i))
        if not set(sub_i) <= seen:
            raise DimensionError(f"einsum: operand {sub_i!r} has an index summed in isolation")
    datas = [t.data for t in operands]
    out = np.einsum(subscripts, *datas, optimize=True)

    def bw(g):
        grads = []
        for i, sub_i in enumerate(in_subs):
            if not operands[i].requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            odata = [d for j, d in enumerate(datas) if j != i]
            spec = ",".join([out_sub] + others) + "->" + sub_i
            grads.append(np.einsum(spec, g, *odata, optimize=True))
        return tuple(grads)

    return _make(out, tuple(operands), bw, "einsum")


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table; the gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for {table.shape[0]} rows")
    rows = table.shape
    out = table.data[idx]

    def bw(g):
        full = np.zeros(rows)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return _make(out, (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# attention and convolution
# ---------------------------------------------------------------------------


def _softmax_data(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        filled = np.where(mask, x, -np.inf)
        z = filled - filled.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    Positions where ``mask`` is False get weight exactly 0.
    """
    x = logits.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise DimensionError(f"softmax: mask {m.shape} vs logits {x.shape}")
        if not np.all(m.any(axis=-1)):
            raise ValueError("softmax: every position of a row is masked")
    s = _softmax_data(x, m)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (logits,), bw, "softmax")


def conv_window(inp: Tensor, filt: Tensor, bias: Tensor, start: int) -> Tensor:
    """ReLU of one full-depth window correlation.

    ``inp`` is l x d x K, ``filt`` is h x d x K and ``start`` is 1-based, so
    the window covers rows ``start .. start+h-1``.
    """
    if inp.data.ndim != 3 or filt.data.ndim != 3 or inp.shape[1:] != filt.shape[1:]:
        raise DimensionError(f"conv_window: input {inp.shape} vs filter {filt.shape}")
    l, h = inp.shape[0], filt.shape[0]
    if h > l:
        raise DimensionError(f"conv_window: filter height {h} exceeds length {l}")
    if not 1 <= start <= l - h + 1:
        raise IndexError(f"conv_window: start {start} outside 1..{l - h + 1}")
    lo = start - 1
    win = inp.data[lo:lo + h]
    pre = float((win * filt.data).sum() + bias.data.reshape(-1)[0])
    active = pre > 0
    shape_in, fd = inp.shape, filt.data
    bshape = bias.shape

    def bw(g):
        gv = float(g) if active else 0.0
        gin = np.zeros(shape_in)
        gin[lo:lo + h] = gv * fd
        return gin, gv * win, np.full(bshape, gv)

    return _make(np.array(max(pre, 0.0)), (inp, filt, bias), bw, "conv_window")


def correlate(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Valid multi-channel correlation over a batch of sequences.

    ``x`` is B x l x C, ``filters`` is c x h x C and ``bias`` is c; the
    result is B x (l-h+1) x c, before any activation.
    """
    if x.data.ndim != 3 or filters.data.ndim != 3 or x.shape[2] != filters.shape[2]:
        raise DimensionError(f"correlate: input {x.shape} vs filters {filters.shape}")
    if bias.shape != (filters.shape[0],):
        raise DimensionError(f"correlate: bias {bias.shape} vs {filters.shape[0]} filters")
    B, l, C = x.shape
    c, h, _ = filters.shape
    if h > l:
        raise DimensionError(f"correlate: filter height {h} exceeds length {l}")
    W = l - h + 1
    x2 = x.data.reshape(B * l, C)
    f2 = filters.data.reshape(c * h, C)
    # resp[b, t, k, o]: row t of sequence b against offset o of filter k
    resp = (x2 @ f2.T).reshape(B, l, c, h)
    out = np.empty((B, W, c))
    out[:] = bias.data
    for o in range(h):
        out += resp[:, o:o + W, :, o]

    def bw(g):
        g_resp = np.zeros((B, l, c, h))
        for o in range(h):
            g_resp[:, o:o + W, :, o] = g
        g2 = g_resp.reshape(B * l, c * h)
        gx = (g2 @ f2).reshape(B, l, C)
        gf = (g2.T @ x2).reshape(c, h, C)
        return gx, gf, g.sum(axis=(0, 1))

    return _make(out, (x, filters, bias), bw, "correlate")
