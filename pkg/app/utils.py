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
import json
import math
import hashlib
import datetime
import numpy as np
from app import config
from pathlib import Path
from collections import deque
from colorama import Fore, Style
from typing import Any, Callable, Literal, Sequence, TypeVar, cast

T = TypeVar("T")

SEED_MASK = (1 << 63) - 1


def format_duration(seconds: float) -> str:
    """
    Formats a duration in seconds into a human-readable string.
    e.g. 75.5 -> "1m 15s", 4.2 -> "4.2s"

    Args:
        seconds (float): Duration in seconds.

    Returns:
        str: Formatted duration string.
    """
    try:
        if math.isnan(seconds) or math.isinf(seconds) or seconds < 0:
            return "Unknown duration"

        m, s = divmod(seconds, 60)

        if m > 0:
            return f"{int(m)}m {int(s)}s"
        else:
            return f"{s:.1f}s"
    except Exception:
        return "Unknown duration"


def print_banner(subtitle: str = "") -> None:
    """
    Prints the standardized banner.

    Args:
        subtitle (str, optional): A subtitle to display below the main title. Defaults to "".
    """
    print(
        f"{Fore.GREEN}●{Style.RESET_ALL} {Style.BRIGHT}{config.APP_NAME}{Style.RESET_ALL} "
        f"{Style.DIM}v{config.APP_VERSION}{Style.RESET_ALL}"
    )
    if subtitle:
        print(f"{Style.DIM}  {subtitle}{Style.RESET_ALL}")
    print(f"{Style.DIM}" + "─" * 50 + f"{Style.RESET_ALL}")


# --- SEEDING ---


def make_rng(*keys: int) -> np.random.Generator:
    """
    Returns a PCG64 generator seeded from the given integer keys.

    Every random draw in the package goes through this function so that
    identical keys reproduce identical streams on every platform.
    """
    if not keys:
        raise ValueError("make_rng needs at least one seed key")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


def derive_seed(*keys: int) -> int:
    """Derives a non-negative 63-bit child seed from integer keys."""
    state = np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)
    return int(state[0]) & SEED_MASK


# --- REDUCTION ---


def pairwise_sum(items: Sequence[T], add: Callable[[T, T], T] | None = None) -> T:
    """
    Sums `items` with a balanced binary tree.

    The association order depends only on len(items), so the result does not
    change with how many workers produced the items.
    """
    if not items:
        raise ValueError("pairwise_sum of an empty sequence")
    combine = add if add is not None else (lambda a, b: a + b)  # type: ignore[operator]

    def _reduce(lo: int, hi: int) -> T:
        if hi - lo == 1:
            return items[lo]
        mid = (lo + hi) // 2
        return combine(_reduce(lo, mid), _reduce(mid, hi))

    return _reduce(0, len(items))


# --- HASHING ---


def canonical_json(payload: Any) -> str:
    """JSON with sorted keys and compact separators; the input of every hash."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_json(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


# --- LOGS ---


def log_event(level: str, message: str) -> None:
    """
    Appends an entry to today's app log file.

    Args:
        level (str): INFO, WARN or ERROR.
        message (str): Free text; may span several lines.
    """
    log_dir = config.app_logs_dir()
    os.makedirs(log_dir, exist_ok=True)

    date_str = datetime.datetime.now().strftime("%Y-%m-%d")
    log_file = log_dir / f"{date_str}_daily.log"

    timestamp = datetime.datetime.now().strftime("%H:%M:%S")
    header_line = f"─── {timestamp} {level.upper()} ".ljust(80, "─")

    try:
        with open(log_file, "a", encoding="utf-8") as f:
            f.write(f"{header_line}\n{message.strip()}\n\n")
    except IOError:
        pass


def show_logs(lines_to_show: int = 50) -> None:
    """
    Finds the most recent log file and prints the last N lines.
    """
    print_banner("Recent Logs")

    log_dir = config.app_logs_dir()

    list_of_files: list[Path] = list(log_dir.glob("*_daily.log")) if log_dir.exists() else []

    if not list_of_files:
        print(f"{Fore.YELLOW}⚠ No log files found in:{Style.RESET_ALL}")
        print(f"  {log_dir}")
        return

    latest_file = cast(Path, max(list_of_files, key=os.path.getmtime))

    print(
        f"{Style.DIM}Reading latest log file: {Fore.CYAN}{latest_file.name}{Style.RESET_ALL}\n"
    )

    try:
        with open(latest_file, "r", encoding="utf-8", errors="replace") as f:
            last_lines = deque(f, maxlen=lines_to_show)

            if not last_lines:
                print(f"{Style.DIM}(Log file is empty){Style.RESET_ALL}")

            for line in last_lines:
                print(f"{Style.DIM}│{Style.RESET_ALL} {line.rstrip()}")

    except Exception as e:
        print(f"{Fore.RED}Error reading log file: {e}{Style.RESET_ALL}")

    print(f"\n{Style.DIM}" + "─" * 50 + f"{Style.RESET_ALL}")
    print(
        f"{Fore.GREEN}➜ Full logs location:{Style.RESET_ALL} {Style.BRIGHT}{log_dir}{Style.RESET_ALL}"
    )


def status_line(kind: Literal["ok", "fail", "warn", "info"], label: str, details: str = "") -> None:
    """Prints one console status line in the house style."""
    icon = {
        "ok": f"{Fore.GREEN}✓{Style.RESET_ALL}",
        "fail": f"{Fore.RED}✗{Style.RESET_ALL}",
        "warn": f"{Fore.YELLOW}⚠{Style.RESET_ALL}",
        "info": f"{Fore.CYAN}●{Style.RESET_ALL}",
    }[kind]
    suffix = f" {Style.DIM}{details}{Style.RESET_ALL}" if details else ""
    print(f" {icon} {Style.BRIGHT}{label}{Style.RESET_ALL}{suffix}")
