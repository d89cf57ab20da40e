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


import os
import copy
import json
from pathlib import Path
from colorama import Style, Fore
from typing import Optional, Dict, Any

from app import utils
from app.errors import ConfigurationError

# --- APP IDENTITY ---
APP_NAME = "prompt-adapters"
APP_VERSION = "0.3.0"
DEVELOPER_NAME = "Jean Paul Fernandez"
DEVELOPER_USERNAME = "jpxoi"

HOME_ENV_VAR = "PROMPT_ADAPTERS_HOME"


def get_app_data_dir() -> Path:
    """Returns the path for app data (Logs, run registry) under ~/.prompt-adapters."""
    override = os.getenv(HOME_ENV_VAR)
    app_dir: Path = Path(override) if override else Path.home() / ".prompt-adapters"
    app_dir.mkdir(parents=True, exist_ok=True)
    return app_dir


def app_logs_dir() -> Path:
    return get_app_data_dir() / "logs" / "app"


def registry_path() -> Path:
    return get_app_data_dir() / "runs.db"


# --- DEFAULTS ---
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "data": {
        "rows": 3,
        "cols": 3,
        "min_objects": 1,
        "max_objects": 4,
        "sizes": {"object": 150, "count": 150, "color": 150, "position": 150},
        "train_fraction": 0.67,
        "max_retries": 1000,
    },
    "encoder": {
        "C": 24,
        "D": 16,
        "seed": 1234,
    },
    "adapter": {
        "variant": "global_plus_local",
        "C_i": 24,
        "E": 24,
        "C_prime": 32,
        "M": 8,
        "g_num": "1",
        "ratio": 0.8,
        "heads": 1,
    },
    "train": {
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.05,
        "warmup_steps": 1000,
        "lr_start": 1e-6,
        "lr_peak": 8e-5,
        "lr_min": 1e-5,
        "max_epochs": 5,
        "iters_per_epoch": 400,
        "batch_size": 4,
        "grad_clip": 1.0,
        "workers": 1,
        "frozen": ["encoder.*"],
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any], where: str) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict) and key != "sizes":
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key '{where}{key}' must be an object")
            merged[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_configuration(path: Optional[Path] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """
    Loads an experiment config, deep-merged over DEFAULT_CONFIG.

    Args:
        path (Path, optional): JSON file. None means defaults only.
        seed (int, optional): Overrides the top-level `seed` key.

    Returns:
        dict: The effective configuration.
    """
    user_config: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                user_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(user_config, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")

    effective = _merge(DEFAULT_CONFIG, user_config, "")
    if seed is not None:
        effective["seed"] = int(seed)
    return effective


def save_configuration(new_config: Dict[str, Any], path: Path) -> Path:
    """Writes a config as indented JSON that `load_configuration` reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(new_config, f, indent=4)
        f.write("\n")
    return path


def config_hash(cfg: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, compact separators)."""
    return utils.sha256_json(cfg)


def show_config(cfg: Dict[str, Any], source: Optional[Path] = None) -> None:
    """Prints the effective configuration grouped by section."""

    def _fmt_val(val: Any) -> str:
        if val is None:
            return f"{Fore.YELLOW}Auto / None{Style.RESET_ALL}"
        if isinstance(val, (list, tuple)):
            val = ", ".join(str(v) for v in val)
        elif isinstance(val, dict):
            val = ", ".join(f"{k}={v}" for k, v in val.items())
        return f"{Fore.CYAN}{val}{Style.RESET_ALL}"

    def _print_row(key: str, val: Any):
        print(f"   {Style.DIM}•{Style.RESET_ALL} {key:<18} {_fmt_val(val)}")

    print(f" {Fore.WHITE}{Style.BRIGHT}🎲 Run{Style.RESET_ALL}")
    _print_row("seed", cfg["seed"])
    _print_row("config hash", config_hash(cfg)[:16])

    titles = {
        "data": "🧩 Synthetic Data",
        "encoder": "🧊 Frozen Encoders",
        "adapter": "🔌 Adapter",
        "train": "📉 Optimization",
    }
    for section, title in titles.items():
        print(f"\n {Fore.WHITE}{Style.BRIGHT}{title}{Style.RESET_ALL}")
        for key, val in cfg[section].items():
            _print_row(key, val)

    print(f"{Style.DIM}" + "─" * 50 + f"{Style.RESET_ALL}")
    where = str(source) if source else "built-in defaults"
    print(f" {Fore.GREEN}➜ Source:{Style.RESET_ALL} {Style.DIM}{where}{Style.RESET_ALL}\n")
