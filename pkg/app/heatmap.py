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
Attention export: comma-separated numeric grids next to plain (P2) PGM
images scaled per image by min-max; a constant grid becomes flat mid-gray.
"""

import csv
import numpy as np
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

from app import utils
from app.adapters import PROMPT_AWARE, AttentionArtifacts, extract_attention
from app.errors import NoAttentionArtifactsError, ShapeError
from app.synth_qa import SceneQA
from app.trainer import PromptAwareModel

FLAT_GRAY = 128


def to_gray(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.full(grid.shape, FLAT_GRAY, dtype=int)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(int)


def write_pgm(path: Path, grid: np.ndarray) -> Path:
    if grid.ndim != 2:
        raise ShapeError(f"a PGM image needs a 2-D grid, got shape {grid.shape}")
    pixels = to_gray(grid)
    rows, cols = pixels.shape
    lines = ["P2", f"{cols} {rows}", "255"] + [" ".join(str(int(v)) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    return Path(path)


def read_pgm(path: Path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text(encoding="ascii").splitlines() if not line.startswith("#") for t in line.split()]
    if not tokens or tokens[0] != "P2":
        raise ShapeError(f"{path} is not a plain PGM file")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4 : 4 + rows * cols]]).reshape(rows, cols)


def write_grid_csv(path: Path, grid: np.ndarray, header: Optional[Sequence[str]] = None) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if header is not None:
            writer.writerow(header)
        for row in np.atleast_2d(grid):
            writer.writerow([f"{float(v):.17g}" for v in row])
    return Path(path)


def read_grid_csv(path: Path, has_header: bool = False) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if has_header:
        rows = rows[1:]
    return np.array([[float(v) for v in row] for row in rows])


def export_artifacts(
    artifacts: AttentionArtifacts, rows: int, cols: int, out_dir: Path
) -> Dict[str, Path]:
    """
    Writes whatever the artifacts hold:
        local_weights.csv / .pgm      per-patch weights a on the scene grid
        global_attention.csv / .pgm   attention of the global token(s) over the patches
        similarity.csv                raw S, prompt words as the header row
    """
    grids = extract_attention(artifacts, rows, cols)
    if grids.local is None and grids.global_ is None:
        raise NoAttentionArtifactsError("these artifacts carry neither local weights nor global-token attention")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}
    if grids.local is not None:
        written["local_csv"] = write_grid_csv(out_dir / "local_weights.csv", grids.local)
        written["local_pgm"] = write_pgm(out_dir / "local_weights.pgm", grids.local)
    if grids.global_ is not None:
        written["global_csv"] = write_grid_csv(out_dir / "global_attention.csv", grids.global_)
        written["global_pgm"] = write_pgm(out_dir / "global_attention.pgm", grids.global_)
    if artifacts.S is not None:
        S = artifacts.S.values
        header = list(artifacts.words) if len(artifacts.words) == S.shape[1] else [f"w{j}" for j in range(S.shape[1])]
        written["similarity_csv"] = write_grid_csv(out_dir / "similarity.csv", S, header=header)
    return written


def export_attention(
    checkpoint: Union[PromptAwareModel, Path, str], scene_qa: SceneQA, out_dir: Path
) -> Dict[str, Path]:
    """
    Runs one forward pass and exports its attention maps.

    Raises:
        NoAttentionArtifactsError: the checkpoint holds a linear or cross-attention adapter.
    """
    model = checkpoint if isinstance(checkpoint, PromptAwareModel) else PromptAwareModel.from_checkpoint(Path(checkpoint))
    variant = model.adapter_cfg.variant
    if variant not in PROMPT_AWARE:
        raise NoAttentionArtifactsError(f"no attention artifacts for the {variant.value} variant")

    _, artifacts = model.forward(scene_qa)
    if artifacts is None:
        raise NoAttentionArtifactsError(f"no attention artifacts for the {variant.value} variant")
    written = export_artifacts(artifacts, scene_qa.scene.rows, scene_qa.scene.cols, out_dir)
    utils.log_event(
        "INFO",
        f"Exported attention for '{scene_qa.prompt}' ({variant.value}) to {out_dir}: "
        + ", ".join(p.name for p in written.values()),
    )
    return written
