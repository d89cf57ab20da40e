# Copyright (C) 2026 Jean Paul Fernandez
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

"""
Dense float64 matrices with a define-by-run reverse-mode tape.

Every tensor is two-dimensional. Operations whose operands need gradients
append a record to a Tape; the tape is created lazily by the first such
operation of a forward pass and shared by everything computed from it;
tapes that meet in one operation are merged. Leaves (parameters, encoder
outputs) never belong to a tape.
"""

import math
import numpy as np
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from app.errors import ContractError, ShapeError

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


class Tensor:
    """A 2-D float64 matrix with an accumulated gradient of the same shape."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name", "_tape")

    def __init__(
        self, values, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"tensor shape must be two positive ints, got {arr.shape}")
        self.values: Array = arr
        self.grad: Array = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class TapeRecord:
    node_id: int
    op: str
    parents: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Operations of one forward pass, in the order they ran."""

    records: list[TapeRecord] = field(default_factory=list)

    def record(self, op: str, parents: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        node_id = len(self.records)
        output.node_id = node_id
        output._tape = self
        self.records.append(TapeRecord(node_id, op, parents, output, backward))

    def leaves(self) -> list[Tensor]:
        """Distinct gradient-requiring leaves read by this tape, in first-use order."""
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for p in rec.parents:
                if p.is_leaf and p.requires_grad and id(p) not in seen:
                    seen[id(p)] = p
        return list(seen.values())

    def __len__(self) -> int:
        return len(self.records)


def _merge(tapes: list["Tape"]) -> "Tape":
    """
    Moves the records of every tape onto the longest one. Independent tapes
    share no nodes, so appending keeps every record after its inputs.
    """
    target = max(tapes, key=len)
    for other in tapes:
        if other is target:
            continue
        for rec in other.records:
            rec.node_id = len(target.records)
            rec.output.node_id = rec.node_id
            rec.output._tape = target
            target.records.append(rec)
        other.records = []
    return target


def _emit(op: str, parents: tuple[Tensor, ...], values: Array, backward: BackwardFn) -> Tensor:
    needs_grad = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.requires_grad = needs_grad
    out.node_id = None
    out.name = None
    out._tape = None
    if not needs_grad:
        return out

    tapes = list({id(p._tape): p._tape for p in parents if p._tape is not None}.values())
    if not tapes:
        tape = Tape()
    elif len(tapes) == 1:
        tape = tapes[0]
    else:
        tape = _merge(tapes)
    tape.record(op, parents, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- LINEAR ALGEBRA ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; gradients flow to both operands."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit(
        "matmul",
        (a, b),
        a.values @ b.values,
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be a 1×c row added to every row of `a`."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.values + b.values, lambda g: (g, g))
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return _emit(
            "add_row",
            (a, b),
            a.values + b.values,
            lambda g: (g, g.sum(axis=0, keepdims=True)),
        )
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of equal shapes."""
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.values * b.values, lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.values * s, lambda g: (g * s,))


def diag(a: Tensor) -> Tensor:
    """Square matrix with the entries of a row or column vector on its diagonal."""
    if a.shape[0] != 1 and a.shape[1] != 1:
        raise ShapeError(f"diag: expected a vector, got {a.shape}")
    shape = a.shape
    return _emit(
        "diag",
        (a,),
        np.diag(a.values.ravel()),
        lambda g: (np.diagonal(g).copy().reshape(shape),),
    )


# --- STRUCTURE ---


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows: nothing to concatenate")
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise ShapeError(f"concat_rows: column counts differ ({width} vs {p.shape[1]})")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def _backward(g: Array):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", tuple(parts), np.vstack([p.values for p in parts]), _backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols: nothing to concatenate")
    height = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != height:
            raise ShapeError(f"concat_cols: row counts differ ({height} vs {p.shape[0]})")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def _backward(g: Array):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", tuple(parts), np.hstack([p.values for p in parts]), _backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] is outside {a.shape[0]} rows")

    def _backward(g: Array):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", (a,), a.values[start:stop].copy(), _backward)


# --- REDUCTIONS ---


def total(a: Tensor) -> Tensor:
    """Sum of every entry as a 1×1 tensor."""
    return _emit(
        "total",
        (a,),
        np.array([[a.values.sum()]]),
        lambda g: (np.full_like(a.values, g[0, 0]),),
    )


def row_sums(a: Tensor) -> Tensor:
    """n×m -> n×1."""
    return _emit(
        "row_sums",
        (a,),
        a.values.sum(axis=1, keepdims=True),
        lambda g: (np.broadcast_to(g, a.values.shape).copy(),),
    )


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows, n×c -> 1×c."""
    n = a.shape[0]
    return _emit(
        "mean_rows",
        (a,),
        a.values.mean(axis=0, keepdims=True),
        lambda g: (np.broadcast_to(g / n, a.values.shape).copy(),),
    )


# --- NONLINEARITIES ---


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form."""
    x = a.values
    inner = GELU_K * (x + GELU_C * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g: Array):
        dinner = GELU_K * (1.0 + 3.0 * GELU_C * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _emit("gelu", (a,), out, _backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax: every row becomes a probability vector."""
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g: Array):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (a,), s, _backward)


def softmax_global(a: Tensor) -> Tensor:
    """Softmax over the entire matrix: all p·q entries sum to one."""
    shifted = a.values - a.values.max()
    e = np.exp(shifted)
    s = e / e.sum()

    def _backward(g: Array):
        return (s * (g - (g * s).sum()),)

    return _emit("softmax_global", (a,), s, _backward)


def cross_entropy(logits: Tensor, answer_index: int) -> Tensor:
    """-log softmax(logits)[answer_index] for a 1×k row of logits, log-sum-exp form."""
    if logits.shape[0] != 1:
        raise ShapeError(f"cross_entropy: expected a 1×k logit row, got {logits.shape}")
    k = logits.shape[1]
    if not 0 <= answer_index < k:
        raise ContractError(f"cross_entropy: answer index {answer_index} outside [0, {k})")
    z = logits.values[0]
    peak = z.max()
    e = np.exp(z - peak)
    lse = peak + math.log(e.sum())
    loss = lse - z[answer_index]

    def _backward(g: Array):
        p = (e / e.sum()).reshape(1, k)
        p[0, answer_index] -= 1.0
        return (g[0, 0] * p,)

    return _emit("cross_entropy", (logits,), np.array([[loss]]), _backward)


# --- REVERSE MODE ---


def gradients(loss: Tensor, wrt: Iterable[Tensor]) -> list[Array]:
    """
    Returns ∂loss/∂t for every tensor in `wrt` without touching their `grad` fields.

    Pure with respect to the tensors involved, so independent tapes may be
    differentiated from several threads at once.
    """
    targets = list(wrt)
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None or loss.node_id is None:
        return [np.zeros_like(t.values) for t in targets]

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.values)}
    for rec in reversed(loss._tape.records[: loss.node_id + 1]):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(t), np.zeros_like(t.values)) for t in targets]


def backward(loss: Tensor) -> None:
    """Accumulates ∂loss/∂leaf into `grad` of every gradient-requiring leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return
    leaves = loss._tape.leaves()
    for leaf, g in zip(leaves, gradients(loss, leaves)):
        leaf.grad = leaf.grad + g
