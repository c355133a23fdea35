"""Dense f64 tensors with tape-based reverse-mode differentiation.

Values are plain numpy arrays (float64, rank <= 4, BCHW layout for images).
A :class:`Tape` records every operation applied to its nodes; because
entries are appended as they are computed, the tape is already in
topological order and :meth:`Tape.backward` simply replays it in reverse,
accumulating adjoints into every leaf created with ``requires_grad=True``.

Tapes are cheap single-use objects: build a graph, call ``backward`` once,
discard. Multiple tapes over disjoint data may run in parallel; a single
tape is not thread-safe.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 4


class ShapeError(ValueError):
    """Rejected input: a shape violates the operation's contract."""


class NonFiniteError(FloatingPointError):
    """A value contains NaN or Inf where the contract requires finite data."""


def as_tensor(value) -> np.ndarray:
    """Coerce to the canonical value type: C-contiguous float64, rank <= 4, finite."""
    a = np.ascontiguousarray(value, dtype=np.float64)
    if a.ndim > MAX_RANK:
        raise ShapeError(f"rank {a.ndim} exceeds the supported maximum of {MAX_RANK}")
    _check_finite(a, "input tensor")
    return a


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def softmax_values(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a (B, K) array (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


class Node:
    """Handle to one tape entry; ``value`` is the forward result.

    ``requires_grad`` means "an adjoint must reach this node": set explicitly
    on leaves, propagated to derived nodes. ``grad`` is populated on leaves
    by :meth:`Tape.backward`.
    """

    __slots__ = ("tape", "index", "value", "requires_grad", "grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.value.shape}, grad={self.requires_grad})"


class _Entry:
    __slots__ = ("op", "inputs", "node", "backward")

    def __init__(self, op: str, inputs: tuple, node: Node, backward: Optional[Callable]):
        self.op = op
        self.inputs = inputs          # indices of input nodes, all < node.index
        self.node = node
        self.backward = backward      # grad_out -> [(input_index, grad_contribution)]


class Tape:
    """Append-only operation record, topologically ordered by construction."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def leaf(self, value, requires_grad: bool = False) -> Node:
        """Register an input tensor (parameter or data) on the tape."""
        return self._record("leaf", (), as_tensor(value), requires_grad, None)

    def _record(self, op: str, inputs: tuple, value: np.ndarray,
                requires_grad: bool, backward: Optional[Callable]) -> Node:
        node = Node(self, len(self._entries), value, requires_grad)
        self._entries.append(_Entry(op, inputs, node, backward))
        return node

    def backward(self, out: Node) -> dict[Node, np.ndarray]:
        """Accumulate d(out)/d(leaf) for every grad-requiring leaf.

        ``out`` must be a scalar (shape ``()``). Leaves that do not
        participate in ``out`` receive an all-zero gradient.
        """
        if out.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if out.value.shape != ():
            raise ShapeError(
                f"backward requires a scalar output node, got shape {out.value.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self._entries)
        grads[out.index] = np.ones((), dtype=np.float64)
        for i in range(out.index, -1, -1):
            entry = self._entries[i]
            g = grads[i]
            if g is None or entry.backward is None:
                continue
            for idx, contrib in entry.backward(g):
                if grads[idx] is None:
                    grads[idx] = contrib
                else:
                    grads[idx] = grads[idx] + contrib
        result: dict[Node, np.ndarray] = {}
        for entry in self._entries:
            node = entry.node
            if entry.op == "leaf" and node.requires_grad:
                g = grads[node.index]
                if g is None:
                    g = np.zeros_like(node.value)
                node.grad = np.ascontiguousarray(g, dtype=np.float64)
                result[node] = node.grad
        return result


def _out(tape: Tape, op: str, inputs: Sequence[Node], value: np.ndarray,
         backward: Optional[Callable]) -> Node:
    _check_finite(value, f"{op} output")
    needs = any(n.requires_grad for n in inputs)
    return tape._record(op, tuple(n.index for n in inputs), value,
                        needs, backward if needs else None)


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Window columns in (B, Cin*Kh*Kw, Ho*Wo) layout.

    Built one kernel offset at a time so every copy is a plain strided
    slice; the result reshapes for batched GEMM without further movement.
    """
    b, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def conv2d(x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation of a BCHW batch with an OIHW kernel, zero padding.

    Output height is floor((H + 2*padding - Kh)/stride) + 1, same for width.
    """
    tape = _same_tape(x, kernel)
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 (BCHW), got rank {x.value.ndim}")
    if kernel.value.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4 (OIHW), got rank {kernel.value.ndim}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    b, cin, h, w = x.value.shape
    cout, kcin, kh, kw = kernel.value.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * padding}")

    cols, ho, wo = _im2col(x.value, kh, kw, stride, padding)
    wmat = kernel.value.reshape(cout, cin * kh * kw)
    y = np.matmul(wmat, cols).reshape(b, cout, ho, wo)

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bw(g: np.ndarray):
        g3 = np.ascontiguousarray(g).reshape(b, cout, ho * wo)
        grads = []
        if need_k:
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            grads.append((kernel.index, dw.reshape(kernel.value.shape)))
        if need_x:
            dcols = np.matmul(wmat.T, g3).reshape(b, cin, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((b, cin, hp, wp), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            grads.append((x.index, dx))
        return grads

    return _out(tape, "conv2d", (x, kernel), y, bw)


# ---------------------------------------------------------------------------
# pointwise and affine ops

def relu(x: Node) -> Node:
    """Elementwise max(0, x); backward passes gradient only where x > 0."""
    y = np.maximum(x.value, 0.0)
    xv = x.value

    def bw(g: np.ndarray):
        return [(x.index, g * (xv > 0))]

    return _out(x.tape, "relu", (x,), y, bw)


def dense(x: Node, weight: Node, bias: Node) -> Node:
    """Affine map: x @ weight.T + bias, batched over the rows of x."""
    tape = _same_tape(x, weight, bias)
    if x.value.ndim != 2:
        raise ShapeError(f"dense: input must be rank 2 (B, N), got rank {x.value.ndim}")
    if weight.value.ndim != 2 or bias.value.ndim != 1:
        raise ShapeError("dense: weight must be rank 2 (M, N) and bias rank 1 (M)")
    bsz, n = x.value.shape
    m, wn = weight.value.shape
    if wn != n:
        raise ShapeError(f"dense: input width {n} does not match weight width {wn}")
    if bias.value.shape[0] != m:
        raise ShapeError(f"dense: bias length {bias.value.shape[0]} does not match {m} output units")
    y = x.value @ weight.value.T + bias.value
    xv, wv = x.value, weight.value
    need = (x.requires_grad, weight.requires_grad, bias.requires_grad)

    def bw(g: np.ndarray):
        grads = []
        if need[0]:
            grads.append((x.index, g @ wv))
        if need[1]:
            grads.append((weight.index, g.T @ xv))
        if need[2]:
            grads.append((bias.index, g.sum(axis=0)))
        return grads

    return _out(tape, "dense", (x, weight, bias), y, bw)


def channel_affine(x: Node, gamma: Node, beta: Node) -> Node:
    """Per-channel scale and shift of a BCHW tensor: x * gamma[c] + beta[c]."""
    tape = _same_tape(x, gamma, beta)
    if x.value.ndim != 4:
        raise ShapeError(f"channel_affine: input must be rank 4 (BCHW), got rank {x.value.ndim}")
    c = x.value.shape[1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(
            f"channel_affine: scale/shift must have shape ({c},) to match {c} channels, "
            f"got {gamma.value.shape} and {beta.value.shape}")
    gm = gamma.value[None, :, None, None]
    y = x.value * gm + beta.value[None, :, None, None]
    xv = x.value
    need = (x.requires_grad, gamma.requires_grad, beta.requires_grad)

    def bw(g: np.ndarray):
        grads = []
        if need[0]:
            grads.append((x.index, g * gm))
        if need[1]:
            grads.append((gamma.index, (g * xv).sum(axis=(0, 2, 3))))
        if need[2]:
            grads.append((beta.index, g.sum(axis=(0, 2, 3))))
        return grads

    return _out(tape, "channel_affine", (x, gamma, beta), y, bw)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum of two same-shape tensors (the residual skip join)."""
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    need = (a.requires_grad, b.requires_grad)

    def bw(g: np.ndarray):
        grads = []
        if need[0]:
            grads.append((a.index, g))
        if need[1]:
            grads.append((b.index, g))
        return grads

    return _out(tape, "add", (a, b), a.value + b.value, bw)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of two same-shape tensors."""
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")
    av, bv = a.value, b.value
    need = (a.requires_grad, b.requires_grad)

    def bw(g: np.ndarray):
        grads = []
        if need[0]:
            grads.append((a.index, g * bv))
        if need[1]:
            grads.append((b.index, g * av))
        return grads

    return _out(tape, "mul", (a, b), av * bv, bw)


# ---------------------------------------------------------------------------
# reductions and reshapes

def softmax(logits: Node) -> Node:
    """Row-wise softmax of (B, K) logits, max-subtracted for stability."""
    if logits.value.ndim != 2:
        raise ShapeError(f"softmax: logits must be rank 2 (B, K), got rank {logits.value.ndim}")
    p = softmax_values(logits.value)

    def bw(g: np.ndarray):
        return [(logits.index, p * (g - (g * p).sum(axis=1, keepdims=True)))]

    return _out(logits.tape, "softmax", (logits,), p, bw)


def pool(x: Node, kind: str, window: int | None = None, stride: int | None = None) -> Node:
    """Spatial pooling over a BCHW tensor.

    kind "max": windowed maxima (ties route the gradient to the first
    maximum in row-major window order). kind "global_avg": per-channel
    mean, output shape (B, C, 1, 1).
    """
    if x.value.ndim != 4:
        raise ShapeError(f"pool: input must be rank 4 (BCHW), got rank {x.value.ndim}")
    b, c, h, w = x.value.shape
    if kind == "global_avg":
        y = x.value.mean(axis=(2, 3), keepdims=True)

        def bw(g: np.ndarray):
            return [(x.index, np.broadcast_to(g / (h * w), (b, c, h, w)).copy())]

        return _out(x.tape, "global_avg_pool", (x,), y, bw)

    if kind != "max":
        raise ValueError(f"pool: unknown kind {kind!r} (expected 'max' or 'global_avg')")
    if window is None or stride is None:
        raise ValueError("pool: max pooling requires window and stride")
    if window < 1 or stride < 1:
        raise ValueError(f"pool: window and stride must be >= 1, got {window}, {stride}")
    if window > h:
        raise ShapeError(f"pool: window {window} exceeds input height {h}")
    if window > w:
        raise ShapeError(f"pool: window {window} exceeds input width {w}")
    win = sliding_window_view(x.value, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    y = np.ascontiguousarray(y)

    def bw(g: np.ndarray):
        dx = np.zeros((b, c, h, w), dtype=np.float64)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            mask = arg == idx
            if mask.any():
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(mask, g, 0.0)
        return [(x.index, dx)]

    return _out(x.tape, "max_pool", (x,), y, bw)


def cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Computed in fused log-sum-exp form; stable for any finite logits.
    """
    if logits.value.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be rank 2 (B, K), got rank {logits.value.ndim}")
    b, k = logits.value.shape
    lab = np.asarray(labels)
    if lab.shape != (b,):
        raise ShapeError(f"cross_entropy: labels must have shape ({b},), got {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers")
    if lab.min() < 0 or lab.max() >= k:
        bad = lab[(lab < 0) | (lab >= k)][0]
        raise ValueError(f"cross_entropy: label {bad} outside [0, {k})")
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = np.asarray((lse - z[np.arange(b), lab]).mean())

    def bw(g: np.ndarray):
        dz = softmax_values(z)
        dz[np.arange(b), lab] -= 1.0
        return [(logits.index, dz * (g / b))]

    return _out(logits.tape, "cross_entropy", (logits,), loss, bw)


def flatten(x: Node) -> Node:
    """Collapse all trailing axes: (B, ...) -> (B, prod(...))."""
    if x.value.ndim < 2:
        raise ShapeError(f"flatten: input must have a batch axis, got rank {x.value.ndim}")
    shape = x.value.shape
    y = np.ascontiguousarray(x.value).reshape(shape[0], -1)

    def bw(g: np.ndarray):
        return [(x.index, g.reshape(shape))]

    return _out(x.tape, "flatten", (x,), y, bw)


def sum_all(x: Node) -> Node:
    """Sum every element down to a scalar."""
    shape = x.value.shape
    y = np.asarray(x.value.sum())

    def bw(g: np.ndarray):
        return [(x.index, np.broadcast_to(g, shape).copy())]

    return _out(x.tape, "sum_all", (x,), y, bw)


def column_sum(x: Node, column: int) -> Node:
    """Sum of one column of a (B, K) tensor, as a scalar.

    With B independent rows this scalar's input gradient is dx[b, column]
    = 1, so batched per-row scores can share one backward pass.
    """
    if x.value.ndim != 2:
        raise ShapeError(f"column_sum: input must be rank 2 (B, K), got rank {x.value.ndim}")
    k = x.value.shape[1]
    if not 0 <= column < k:
        raise ValueError(f"column_sum: column {column} outside [0, {k})")
    y = np.asarray(x.value[:, column].sum())

    def bw(g: np.ndarray):
        dx = np.zeros_like(x.value)
        dx[:, column] = g
        return [(x.index, dx)]

    return _out(x.tape, "column_sum", (x,), y, bw)
