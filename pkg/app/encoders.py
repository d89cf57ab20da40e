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

"""Frozen stand-ins for the pretrained image and text encoders, and the global-token projection."""

import numpy as np
from dataclasses import dataclass
from typing import Iterator, Sequence

from app import utils
from app.errors import ConfigurationError, ContractError, ShapeError
from app.layers import glorot
from app.synth_qa import COLORS, OBJECTS, REGIONS, Scene, prompt_vocabulary
from app.tensor import Tensor, add, matmul, mean_rows

UNK = "<unk>"

# Sub-stream keys under the encoder seed.
_IMAGE_STREAM = 0
_TEXT_STREAM = 1


@dataclass(frozen=True)
class FrozenImageEncoder:
    """
    Maps a patch descriptor (object, color, region) to a C-vector.

    The table stacks one block of rows per attribute; a patch embedding is
    the sum of its three attribute rows, so equal descriptors give equal rows.
    """

    seed: int
    patch_grid: tuple[int, int]
    C: int
    embedding_table: Tensor

    @classmethod
    def build(cls, seed: int, rows: int, cols: int, C: int) -> "FrozenImageEncoder":
        if rows < 1 or cols < 1 or C < 1:
            raise ConfigurationError(f"image encoder needs a non-empty grid and C >= 1, got {rows}x{cols}, C={C}")
        rng = utils.make_rng(seed, _IMAGE_STREAM)
        n_rows = len(OBJECTS) + len(COLORS) + len(REGIONS)
        table = Tensor(rng.normal(0.0, 0.5, size=(n_rows, C)), requires_grad=False, name="image.table")
        return cls(seed, (rows, cols), C, table)

    def descriptor_rows(self, obj: str, color: str, region: str) -> tuple[int, int, int]:
        try:
            return (
                OBJECTS.index(obj),
                len(OBJECTS) + COLORS.index(color),
                len(OBJECTS) + len(COLORS) + REGIONS.index(region),
            )
        except ValueError as e:
            raise ConfigurationError(
                f"patch descriptor ({obj}, {color}, {region}) is outside the encoder vocabulary"
            ) from e


def encode_image(scene: Scene, enc: FrozenImageEncoder) -> Tensor:
    """X (N×C): row i embeds patch i in row-major order. Never requires grad."""
    if scene.n_patches < 1:
        raise ShapeError("scene has no patches")
    if (scene.rows, scene.cols) != enc.patch_grid:
        raise ConfigurationError(
            f"scene grid {scene.rows}x{scene.cols} does not match encoder grid "
            f"{enc.patch_grid[0]}x{enc.patch_grid[1]}"
        )
    table = enc.embedding_table.values
    index = np.array([enc.descriptor_rows(p.object, p.color, p.region) for p in scene.patches])
    return Tensor(table[index].sum(axis=1), requires_grad=False)


@dataclass(frozen=True)
class FrozenTextEncoder:
    seed: int
    vocab: tuple[str, ...]
    D: int
    word_table: Tensor

    @classmethod
    def build(cls, seed: int, D: int, vocab: Sequence[str] | None = None) -> "FrozenTextEncoder":
        words = tuple(vocab) if vocab is not None else prompt_vocabulary()
        if UNK in words:
            raise ConfigurationError(f"'{UNK}' is reserved")
        if len(set(words)) != len(words):
            raise ConfigurationError("text encoder vocabulary has duplicate words")
        full = (UNK,) + words
        rng = utils.make_rng(seed, _TEXT_STREAM)
        table = Tensor(rng.normal(0.0, 1.0, size=(len(full), D)), requires_grad=False, name="text.table")
        return cls(seed, full, D, table)

    def index(self, word: str) -> int:
        try:
            return self.vocab.index(word)
        except ValueError:
            return 0


def encode_prompt(words: Sequence[str], enc: FrozenTextEncoder) -> Tensor:
    """Y (M×D): row j embeds word j; unknown words read the UNK row."""
    if len(words) < 1:
        raise ContractError("prompt must contain at least one word")
    rows = [enc.index(w) for w in words]
    return Tensor(enc.word_table.values[rows], requires_grad=False)


@dataclass
class GlobalTokenProjector:
    """Learned map from the D-dim prompt space into the C-dim patch space."""

    w_proj: Tensor
    bias: Tensor

    @classmethod
    def initialize(cls, rng: np.random.Generator, D: int, C: int) -> "GlobalTokenProjector":
        return cls(glorot(rng, D, C, "w_proj"), Tensor.zeros(1, C, requires_grad=True, name="bias"))

    def named_parameters(self, prefix: str = "projector") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_proj", self.w_proj
        yield f"{prefix}.bias", self.bias


def global_token(Y: Tensor, proj: GlobalTokenProjector) -> Tensor:
    """y (1×C): mean-pool the prompt words, then project."""
    return add(matmul(mean_rows(Y), proj.w_proj), proj.bias)


def project_words(Y: Tensor, proj: GlobalTokenProjector) -> Tensor:
    """Every word projected on its own (M×C); used when all words join global attention."""
    return add(matmul(Y, proj.w_proj), proj.bias)
