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

"""Parameterised building blocks on top of the tape: self-attention and the MLP."""

import math
import numpy as np
from dataclasses import dataclass
from typing import Iterator, Sequence

from app.errors import ConfigurationError, ShapeError
from app.tensor import (
    Tensor,
    add,
    concat_cols,
    gelu,
    matmul,
    scale,
    softmax_rows,
    transpose,
)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    """Scaled-uniform initialisation, limit sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def c_in(self) -> int:
        return self.w_q[0].shape[0]

    @property
    def c_out(self) -> int:
        return self.w_o.shape[1]

    @classmethod
    def initialize(cls, rng: np.random.Generator, c_in: int, c_out: int, heads: int = 1) -> "AttentionParams":
        if heads < 1 or c_out % heads != 0:
            raise ConfigurationError(f"{heads} heads do not divide output width {c_out}")
        d_head = c_out // heads
        w_q, w_k, w_v = [], [], []
        for h in range(heads):
            w_q.append(glorot(rng, c_in, d_head, f"w_q.{h}"))
            w_k.append(glorot(rng, c_in, d_head, f"w_k.{h}"))
            w_v.append(glorot(rng, c_in, d_head, f"w_v.{h}"))
        return cls(w_q, w_k, w_v, glorot(rng, heads * d_head, c_out, "w_o"))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for h in range(self.heads):
            yield f"{prefix}.w_q.{h}", self.w_q[h]
            yield f"{prefix}.w_k.{h}", self.w_k[h]
            yield f"{prefix}.w_v.{h}", self.w_v[h]
        yield f"{prefix}.w_o", self.w_o


@dataclass
class MLPParams:
    """Affine layers; GELU sits between consecutive layers, never after the last."""

    layers: list[tuple[Tensor, Tensor]]

    @property
    def c_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def c_out(self) -> int:
        return self.layers[-1][0].shape[1]

    @classmethod
    def initialize(cls, rng: np.random.Generator, widths: Sequence[int]) -> "MLPParams":
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least an input and an output width")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = glorot(rng, fan_in, fan_out, f"{i}.w")
            b = Tensor.zeros(1, fan_out, requires_grad=True, name=f"{i}.b")
            layers.append((w, b))
        return cls(layers)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(self.layers):
            yield f"{prefix}.{i}.w", w
            yield f"{prefix}.{i}.b", b


def attend(Z: Tensor, params: AttentionParams) -> tuple[Tensor, list[Tensor]]:
    """
    Scaled dot-product self-attention over the rows of Z.

    Returns the output-projected result and the row-stochastic attention
    matrix of every head.
    """
    if Z.shape[1] != params.c_in:
        raise ShapeError(
            f"self_attention: input has {Z.shape[1]} channels, parameters expect {params.c_in}"
        )
    d_head = params.w_q[0].shape[1]
    outputs, weights = [], []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = matmul(Z, w_q)
        k = matmul(Z, w_k)
        v = matmul(Z, w_v)
        attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_head)))
        outputs.append(matmul(attn, v))
        weights.append(attn)
    merged = outputs[0] if len(outputs) == 1 else concat_cols(outputs)
    return matmul(merged, params.w_o), weights


def self_attention(Z: Tensor, params: AttentionParams) -> Tensor:
    return attend(Z, params)[0]


def mlp(Z: Tensor, params: MLPParams) -> Tensor:
    """Row-wise affine -> GELU -> affine (for as many layers as configured)."""
    if Z.shape[1] != params.c_in:
        raise ShapeError(f"mlp: input has {Z.shape[1]} channels, first layer expects {params.c_in}")
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        Z = add(matmul(Z, w), b)
        if i < last:
            Z = gelu(Z)
    return Z
