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
Checkpoint container.

A NumPy `.npz` archive holding one float64 array per parameter name (shape
kept, row-major), plus two string entries: `__config__`, the canonical JSON
of the model config, and `__config_hash__`, its SHA-256.
"""

import json
import numpy as np
from pathlib import Path
from typing import Any, Dict, Optional

from app import utils
from app.errors import ConfigMismatchError, ConfigurationError

CONFIG_KEY = "__config__"
HASH_KEY = "__config_hash__"


def save_checkpoint(path: Path, model_config: Dict[str, Any], state: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for reserved in (CONFIG_KEY, HASH_KEY):
        if reserved in state:
            raise ConfigurationError(f"parameter name '{reserved}' is reserved")
    payload = {name: np.ascontiguousarray(values, dtype=np.float64) for name, values in state.items()}
    payload[CONFIG_KEY] = np.array(utils.canonical_json(model_config))
    payload[HASH_KEY] = np.array(utils.sha256_json(model_config))
    with open(path, "wb") as f:
        np.savez(f, **payload)
    return path


def load_checkpoint(
    path: Path, expected_hash: Optional[str] = None
) -> tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Returns (model_config, state).

    Raises:
        ConfigMismatchError: the embedded hash does not match the embedded
            config, or differs from `expected_hash`.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        names = list(archive.files)
        if CONFIG_KEY not in names or HASH_KEY not in names:
            raise ConfigurationError(f"{path} is not a checkpoint (no embedded config)")
        model_config = json.loads(str(archive[CONFIG_KEY]))
        stored_hash = str(archive[HASH_KEY])
        state = {n: archive[n].copy() for n in names if n not in (CONFIG_KEY, HASH_KEY)}

    if utils.sha256_json(model_config) != stored_hash:
        raise ConfigMismatchError(f"{path}: embedded config does not match its hash")
    if expected_hash is not None and stored_hash != expected_hash:
        raise ConfigMismatchError(
            f"{path} was written for config {stored_hash[:12]}, expected {expected_hash[:12]}"
        )
    return model_config, state
