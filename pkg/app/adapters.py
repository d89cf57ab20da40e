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
Adapters turning frozen visual features (and the prompt) into tokens.

    linear             X' = X·W                                  (N×C')
    cross_attention    softmax_rows(Q·Kᵀ/√E)·V, Q from words     (M×E)
    global_only        MLP(global_attention(X, y))               (N×C')
    local_only         local_attention(X, Y)                     (N×C')
    global_plus_local  ratio·local(I, Y) + (1 − ratio)·MLP(I),
                       I = global_attention(X, y)                (N×C')
"""

import math
import numpy as np
from enum import Enum
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, Iterator, Optional

from app.encoders import GlobalTokenProjector, global_token, project_words
from app.errors import ConfigurationError, ContractError, ShapeError
from app.layers import AttentionParams, MLPParams, attend, glorot, mlp
from app.tensor import (
    Tensor,
    add,
    concat_rows,
    diag,
    matmul,
    row_sums,
    scale,
    slice_rows,
    softmax_global,
    softmax_rows,
    transpose,
)


class Variant(str, Enum):
    linear = "linear"
    cross_attention = "cross_attention"
    global_only = "global_only"
    local_only = "local_only"
    global_plus_local = "global_plus_local"


PROMPT_AWARE: frozenset[Variant] = frozenset(
    {Variant.global_only, Variant.local_only, Variant.global_plus_local}
)


class GNum(str, Enum):
    """How many prompt-derived tokens join global attention: none, one pooled token, or every word."""

    zero = "0"
    one = "1"
    all = "L"


@dataclass(frozen=True)
class AdapterConfig:
    variant: Variant = Variant.global_plus_local
    N: int = 9
    M: int = 8  # longest prompt accepted; parameters do not depend on it
    C: int = 24
    D: int = 16
    C_i: int = 24
    E: int = 24
    C_prime: int = 32
    g_num: GNum = GNum.one
    ratio: float = 0.8
    heads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        g_num = self.g_num.value if isinstance(self.g_num, GNum) else str(self.g_num)
        object.__setattr__(self, "g_num", GNum(g_num))
        for name in ("N", "M", "C", "D", "C_i", "E", "C_prime", "heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"adapter dimension {name} must be positive")
        if not 0.0 <= float(self.ratio) <= 1.0:
            raise ConfigurationError(f"ratio {self.ratio} outside [0, 1]")
        if self.C_i % self.heads != 0:
            raise ConfigurationError(f"{self.heads} heads do not divide C_i={self.C_i}")

    @property
    def has_global(self) -> bool:
        return self.variant in (Variant.global_only, Variant.global_plus_local)

    @property
    def has_local(self) -> bool:
        return self.variant in (Variant.local_only, Variant.global_plus_local)

    @property
    def effective_g_num(self) -> GNum:
        """G-Num only means something when there is a global path."""
        return self.g_num if self.has_global else GNum.zero

    @property
    def uses_projector(self) -> bool:
        return self.effective_g_num is not GNum.zero

    @property
    def output_dim(self) -> int:
        return self.E if self.variant is Variant.cross_attention else self.C_prime

    def global_rows(self, M: int) -> int:
        """g, the number of prompt rows appended inside global attention."""
        return {GNum.zero: 0, GNum.one: 1, GNum.all: M}[self.effective_g_num]

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["variant"] = self.variant.value
        out["g_num"] = self.g_num.value
        return out

    @classmethod
    def from_dict(cls, section: Dict[str, Any]) -> "AdapterConfig":
        return cls(**section)


@dataclass
class AdapterParams:
    """Trainable tensors; only the fields of the configured variant are set."""

    linear_w: Optional[Tensor] = None
    w_q: Optional[Tensor] = None
    w_k: Optional[Tensor] = None
    w_v: Optional[Tensor] = None
    global_attn: Optional[AttentionParams] = None
    global_mlp: Optional[MLPParams] = None
    w_i: Optional[Tensor] = None
    w_y: Optional[Tensor] = None
    local_mlp: Optional[MLPParams] = None

    @classmethod
    def initialize(cls, cfg: AdapterConfig, rng: np.random.Generator) -> "AdapterParams":
        p = cls()
        if cfg.variant is Variant.linear:
            p.linear_w = glorot(rng, cfg.C, cfg.C_prime, "linear.w")
        elif cfg.variant is Variant.cross_attention:
            p.w_q = glorot(rng, cfg.D, cfg.E, "cross.w_q")
            p.w_k = glorot(rng, cfg.C, cfg.E, "cross.w_k")
            p.w_v = glorot(rng, cfg.C, cfg.E, "cross.w_v")
        if cfg.has_global:
            p.global_attn = AttentionParams.initialize(rng, cfg.C, cfg.C_i, cfg.heads)
            p.global_mlp = MLPParams.initialize(rng, (cfg.C_i, 2 * cfg.C_i, cfg.C_prime))
        if cfg.has_local:
            width = cfg.C_i if cfg.has_global else cfg.C
            p.w_i = glorot(rng, width, cfg.E, "local.w_i")
            p.w_y = glorot(rng, cfg.D, cfg.E, "local.w_y")
            p.local_mlp = MLPParams.initialize(rng, (width, 2 * width, cfg.C_prime))
        return p

    def named_parameters(self, prefix: str = "adapter") -> Iterator[tuple[str, Tensor]]:
        singles = (
            ("linear.w", self.linear_w),
            ("cross.w_q", self.w_q),
            ("cross.w_k", self.w_k),
            ("cross.w_v", self.w_v),
            ("local.w_i", self.w_i),
            ("local.w_y", self.w_y),
        )
        for name, t in singles:
            if t is not None:
                yield f"{prefix}.{name}", t
        if self.global_attn is not None:
            yield from self.global_attn.named_parameters(f"{prefix}.global.attn")
        if self.global_mlp is not None:
            yield from self.global_mlp.named_parameters(f"{prefix}.global.mlp")
        if self.local_mlp is not None:
            yield from self.local_mlp.named_parameters(f"{prefix}.local.mlp")


@dataclass
class AttentionArtifacts:
    """
    S: N×M local similarity (sums to one over the whole matrix).
    a: 1×N per-patch weights, a_i = Σ_j S_ij.
    global_attn: (N+g)×(N+g) self-attention weights, averaged over heads.
    """

    S: Optional[Tensor] = None
    a: Optional[Tensor] = None
    global_attn: Optional[Tensor] = None
    g: int = 0
    words: tuple[str, ...] = field(default_factory=tuple)


def _require(value, what: str):
    if value is None:
        raise ContractError(f"adapter parameters have no {what}")
    return value


# --- BASELINES ---


def linear_adapter(X: Tensor, p: AdapterParams) -> Tensor:
    """Prompt-unaware projection X·W; one token per patch."""
    return matmul(X, _require(p.linear_w, "linear weight"))


def cross_attention_map(X: Tensor, Y: Tensor, p: AdapterParams) -> tuple[Tensor, Tensor]:
    """Returns (tokens M×E, row-stochastic word→patch attention M×N)."""
    w_q = _require(p.w_q, "cross-attention W_q")
    w_k = _require(p.w_k, "cross-attention W_k")
    w_v = _require(p.w_v, "cross-attention W_v")
    if Y.shape[1] != w_q.shape[0] or X.shape[1] != w_k.shape[0]:
        raise ShapeError(
            f"cross_attention: X {X.shape} / Y {Y.shape} do not fit W_k {w_k.shape} / W_q {w_q.shape}"
        )
    E = w_q.shape[1]
    Q = matmul(Y, w_q)
    K = matmul(X, w_k)
    V = matmul(X, w_v)
    attn = softmax_rows(scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(E)))
    return matmul(attn, V), attn


def cross_attention_adapter(X: Tensor, Y: Tensor, p: AdapterParams) -> Tensor:
    return cross_attention_map(X, Y, p)[0]


# --- PROMPT-AWARE PATHS ---


def _global_attend(
    X: Tensor, y: Optional[Tensor], p: AdapterParams, expected_g: Optional[int] = None
) -> tuple[Tensor, Tensor, int]:
    params = _require(p.global_attn, "global attention block")
    g = 0 if y is None else y.shape[0]
    if expected_g is not None and g != expected_g:
        raise ConfigurationError(f"global attention got {g} prompt rows, config expects {expected_g}")
    if y is not None and y.shape[1] != X.shape[1]:
        raise ShapeError(f"global token width {y.shape[1]} differs from patch width {X.shape[1]}")

    n = X.shape[0]
    seq = X if y is None else concat_rows([X, y])
    out, weights = attend(seq, params)
    mean_weights = np.mean([w.values for w in weights], axis=0)
    I = out if g == 0 else slice_rows(out, 0, n)
    return I, Tensor(mean_weights), g


def global_attention(
    X: Tensor, y: Optional[Tensor], p: AdapterParams, expected_g: Optional[int] = None
) -> Tensor:
    """
    I (N×C_i): self-attention over the patches with g prompt rows appended
    at the end of the sequence; the last g output rows are dropped.
    `y=None` is the g=0 case, plain self-attention over X.
    """
    return _global_attend(X, y, p, expected_g)[0]


def local_attention(I: Tensor, Y: Tensor, p: AdapterParams) -> tuple[Tensor, AttentionArtifacts]:
    """
    S = SOFTMAX((I·W_i)·(Y·W_y)ᵀ/√E) over the whole matrix, a_i = Σ_j S_ij,
    tokens = MLP(diag(a)·I). Returns N tokens.
    """
    w_i = _require(p.w_i, "local W_i")
    w_y = _require(p.w_y, "local W_y")
    local_mlp = _require(p.local_mlp, "local MLP")
    if Y.shape[0] < 1:
        raise ContractError("local attention needs a non-empty prompt")
    if I.shape[1] != w_i.shape[0] or Y.shape[1] != w_y.shape[0]:
        raise ShapeError(
            f"local_attention: I {I.shape} / Y {Y.shape} do not fit W_i {w_i.shape} / W_y {w_y.shape}"
        )
    E = w_i.shape[1]
    logits = scale(matmul(matmul(I, w_i), transpose(matmul(Y, w_y))), 1.0 / math.sqrt(E))
    S = softmax_global(logits)
    a = transpose(row_sums(S))
    Z = matmul(diag(a), I)
    return mlp(Z, local_mlp), AttentionArtifacts(S=S, a=a)


def fuse(local: Tensor, glob: Tensor, ratio: float) -> Tensor:
    """ratio·local + (1 − ratio)·glob; the endpoints return one path untouched."""
    if ratio == 1.0:
        return local
    if ratio == 0.0:
        return glob
    return add(scale(local, ratio), scale(glob, 1.0 - ratio))


def prompt_aware_adapter(
    X: Tensor,
    Y: Tensor,
    y_global: Optional[Tensor],
    cfg: AdapterConfig,
    p: AdapterParams,
) -> tuple[Tensor, AttentionArtifacts]:
    if cfg.variant not in PROMPT_AWARE:
        raise ContractError(f"variant '{cfg.variant.value}' is not prompt-aware")

    if cfg.variant is Variant.local_only:
        return local_attention(X, Y, p)

    expected_g = cfg.global_rows(Y.shape[0])
    I, g_attn, g = _global_attend(X, y_global, p, expected_g)
    glob = mlp(I, _require(p.global_mlp, "global MLP"))

    if cfg.variant is Variant.global_only:
        return glob, AttentionArtifacts(global_attn=g_attn, g=g)

    local, artifacts = local_attention(I, Y, p)
    artifacts.global_attn = g_attn
    artifacts.g = g
    return fuse(local, glob, cfg.ratio), artifacts


def global_prompt_rows(
    Y: Tensor, cfg: AdapterConfig, proj: Optional[GlobalTokenProjector]
) -> Optional[Tensor]:
    """The g rows appended inside global attention: nothing, the pooled token, or every projected word."""
    g_num = cfg.effective_g_num
    if g_num is GNum.zero:
        return None
    if proj is None:
        raise ContractError(f"g_num={g_num.value} needs a global token projector")
    if g_num is GNum.one:
        return global_token(Y, proj)
    return project_words(Y, proj)


def apply_adapter(
    cfg: AdapterConfig,
    p: AdapterParams,
    X: Tensor,
    Y: Tensor,
    y_global: Optional[Tensor] = None,
) -> tuple[Tensor, Optional[AttentionArtifacts]]:
    """Dispatches on the variant; baselines return no artifacts."""
    if X.shape[0] != cfg.N:
        raise ShapeError(f"adapter configured for N={cfg.N} patches, got {X.shape[0]}")
    if Y.shape[0] > cfg.M:
        raise ShapeError(f"prompt has {Y.shape[0]} words, adapter allows at most M={cfg.M}")
    if cfg.variant is Variant.linear:
        return linear_adapter(X, p), None
    if cfg.variant is Variant.cross_attention:
        return cross_attention_adapter(X, Y, p), None
    return prompt_aware_adapter(X, Y, y_global, cfg, p)


# --- VISUALISATION ---


@dataclass
class AttentionGrids:
    local: Optional[np.ndarray]
    global_: Optional[np.ndarray]


def extract_attention(artifacts: AttentionArtifacts, rows: int, cols: int) -> AttentionGrids:
    """
    Reshapes the per-patch local weights and the global token's attention
    over the patches into the rows×cols scene grid. Values are not rescaled.
    """
    n = rows * cols
    local = None
    if artifacts.a is not None:
        if artifacts.a.size != n:
            raise ShapeError(f"{artifacts.a.size} patch weights cannot fill a {rows}x{cols} grid")
        local = artifacts.a.values.reshape(rows, cols).copy()

    glob = None
    if artifacts.global_attn is not None and artifacts.g > 0:
        weights = artifacts.global_attn.values
        if weights.shape[0] - artifacts.g != n:
            raise ShapeError(
                f"global attention over {weights.shape[0] - artifacts.g} patches cannot fill a {rows}x{cols} grid"
            )
        token_rows = weights[n:, :n]
        glob = token_rows.mean(axis=0).reshape(rows, cols)

    return AttentionGrids(local=local, global_=glob)
