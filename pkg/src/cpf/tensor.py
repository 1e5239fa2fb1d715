"""Dense 2-D float64 tensors with tape-based reverse-mode autodiff.

The operation vocabulary is fixed and closed: matmul (optionally against a
transposed right operand), add, concat/select/softmax along the last
dimension, scalar scaling, and a fused temperature cross-entropy. Forward
calls record onto the single installed Tape only when an input requires a
gradient; with no tape installed the same functions run as plain float64
numpy math, so inference shares the training code path at zero overhead.

Backward replays the tape in strict reverse insertion order and clears it.
Accumulation order is fixed (row-major, single reduction order), so runs
with a fixed seed are bit-reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "matmul",
    "add",
    "concat_lastdim",
    "select_rows",
    "softmax_lastdim",
    "scale",
    "cross_entropy",
    "scaled_dot_attention",
    "backward",
    "grad_check",
]

OP_KINDS = (
    "matmul",
    "add",
    "concat-lastdim",
    "softmax-lastdim",
    "scale",
    "cross-entropy",
    "select-row",
)


class Tensor:
    """A 2-D float64 array plus an optional same-shape gradient.

    Vectors are carried as 1xN rows and scalars as 1x1; 0-D and 1-D input
    is reshaped on construction. Data is row-major.
    """

    __slots__ = ("data", "grad", "requires_grad", "_traced")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError("tensor dimensions must be positive")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._traced = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs: arr is already float64 2-D.
        out = object.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = False
        out._traced = False
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def _needs_grad(self) -> bool:
        return self.requires_grad or self._traced

    def _add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: kind, input/output tensors, and saved forward state."""

    __slots__ = ("kind", "inputs", "output", "saved")

    def __init__(self, kind: str, inputs: tuple, output: Tensor, saved: tuple):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.saved = saved


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Append-only record of one forward pass; one tape active at a time."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; one tape per step")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


def _record(kind: str, inputs: tuple, output: Tensor, saved: tuple = ()) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None:
        for t in inputs:
            if t.requires_grad or t._traced:
                output._traced = True
                tape.nodes.append(TapeNode(kind, inputs, output, saved))
                break
    return output


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """C = A @ B, or A @ B.T when transpose_b is set."""
    inner = b.data.shape[1] if transpose_b else b.data.shape[0]
    if a.data.shape[1] != inner:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}"
            + (" transposed" if transpose_b else "")
        )
    out = Tensor._wrap(a.data @ (b.data.T if transpose_b else b.data))
    return _record("matmul", (a, b), out, (transpose_b,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a 1xN row broadcast over a's rows (bias add)."""
    if a.data.shape == b.data.shape:
        broadcast = False
    elif b.data.shape == (1, a.data.shape[1]):
        broadcast = True
    else:
        raise DimensionError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}")
    out = Tensor._wrap(a.data + b.data)
    return _record("add", (a, b), out, (broadcast,))


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last dimension; all parts share the row count."""
    if not parts:
        raise DimensionError("concat_lastdim: no inputs")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise DimensionError(
                f"concat_lastdim: row counts disagree, {[p.data.shape for p in parts]}"
            )
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    widths = tuple(p.data.shape[1] for p in parts)
    return _record("concat-lastdim", tuple(parts), out, (widths,))


def select_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows by index (repeats allowed); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("select_rows: indices must be a non-empty 1-D sequence")
    n = x.data.shape[0]
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"select_rows: index out of range for {n} rows")
    out = Tensor._wrap(x.data[idx])
    return _record("select-row", (x,), out, (idx,))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_arr = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(out_arr)
    return _record("softmax-lastdim", (x,), out, (out_arr,))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    if not math.isfinite(factor):
        raise NumericError(f"scale factor must be finite, got {factor}")
    out = Tensor._wrap(x.data * factor)
    return _record("scale", (x,), out, (factor,))


def cross_entropy(logits: Tensor, label: int, temperature: float) -> Tensor:
    """-log softmax(logits / temperature)[label], fused log-softmax for stability.

    Returns a 1x1 tensor; the fusion keeps the math stable down to the
    temperatures the model uses (0.05 magnifies logits twentyfold).
    """
    if logits.data.shape[0] != 1:
        raise DimensionError(f"cross_entropy expects a 1xN logit row, got {logits.data.shape}")
    n = logits.data.shape[1]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits.data[0] / temperature
    if not np.isfinite(z).all():
        raise NumericError("cross_entropy input contains non-finite values")
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    p = np.exp(z - lse)
    out = Tensor._wrap(np.array([[lse - z[label]]]))
    return _record("cross-entropy", (logits,), out, (p, label, temperature))


def scaled_dot_attention(
    q: Tensor, keys: Tensor, values: Tensor, scale_by: float
) -> tuple[Tensor, Tensor]:
    """softmax(q keys^T / scale_by) values -> (pooled 1xD row, 1xT weights).

    The output is a convex combination of the value rows; keys and values
    must agree on the row count but may differ in width.
    """
    if q.data.shape[1] != keys.data.shape[1]:
        raise DimensionError(
            f"attention: query width {q.data.shape} does not match keys {keys.data.shape}"
        )
    if keys.data.shape[0] != values.data.shape[0]:
        raise DimensionError(
            f"attention: keys {keys.data.shape} and values {values.data.shape} row counts differ"
        )
    if not scale_by > 0:
        raise ValueError(f"attention scale must be positive, got {scale_by}")
    weights = softmax_lastdim(scale(matmul(q, keys, transpose_b=True), 1.0 / scale_by))
    return matmul(weights, values), weights


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _back_matmul(node: TapeNode, g: np.ndarray) -> None:
    a, b = node.inputs
    (transpose_b,) = node.saved
    if a._needs_grad():
        a._add_grad(g @ (b.data if transpose_b else b.data.T))
    if b._needs_grad():
        b._add_grad(g.T @ a.data if transpose_b else a.data.T @ g)


def _back_add(node: TapeNode, g: np.ndarray) -> None:
    a, b = node.inputs
    (broadcast,) = node.saved
    if a._needs_grad():
        a._add_grad(g)
    if b._needs_grad():
        b._add_grad(g.sum(axis=0, keepdims=True) if broadcast else g)


def _back_concat(node: TapeNode, g: np.ndarray) -> None:
    (widths,) = node.saved
    start = 0
    for part, w in zip(node.inputs, widths):
        if part._needs_grad():
            part._add_grad(g[:, start : start + w])
        start += w


def _back_select(node: TapeNode, g: np.ndarray) -> None:
    (x,) = node.inputs
    (idx,) = node.saved
    if x._needs_grad():
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._add_grad(gx)


def _back_softmax(node: TapeNode, g: np.ndarray) -> None:
    (x,) = node.inputs
    (p,) = node.saved
    if x._needs_grad():
        x._add_grad((g - (g * p).sum(axis=1, keepdims=True)) * p)


def _back_scale(node: TapeNode, g: np.ndarray) -> None:
    (x,) = node.inputs
    (factor,) = node.saved
    if x._needs_grad():
        x._add_grad(g * factor)


def _back_cross_entropy(node: TapeNode, g: np.ndarray) -> None:
    (logits,) = node.inputs
    p, label, temperature = node.saved
    if logits._needs_grad():
        d = p.copy()
        d[label] -= 1.0
        logits._add_grad((g[0, 0] / temperature) * d.reshape(1, -1))


_BACKWARD: dict[str, Callable[[TapeNode, np.ndarray], None]] = {
    "matmul": _back_matmul,
    "add": _back_add,
    "concat-lastdim": _back_concat,
    "select-row": _back_select,
    "softmax-lastdim": _back_softmax,
    "scale": _back_scale,
    "cross-entropy": _back_cross_entropy,
}


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requiring tensor reachable from loss; clear the tape.

    The loss must be scalar (1x1). Nodes are visited in strict reverse
    insertion order; nodes whose output received no gradient are skipped.
    """
    if loss.data.shape != (1, 1):
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is not None:
            _BACKWARD[node.kind](node, g)
    tape.nodes.clear()


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between fn's tape gradient at x and central differences.

    The disagreement is |analytic - numeric| / max(1, |analytic|, |numeric|),
    maximised over coordinates. fn must be deterministic and scalar-valued.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    was_requiring = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = fn(x)
            if out.data.shape != (1, 1):
                raise ValueError("grad_check needs a scalar-valued fn")
            if not np.isfinite(out.data).all():
                raise NumericError("grad_check: fn produced a non-finite value")
            backward(tape, out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        x.grad = None
        numeric = np.empty_like(x.data)
        flat = x.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(x).item()
            flat[i] = orig - eps
            fm = fn(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("grad_check: fn produced a non-finite value")
            nflat[i] = (fp - fm) / (2.0 * eps)
    finally:
        x.requires_grad = was_requiring
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
