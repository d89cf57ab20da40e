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
import sqlite3
import datetime
from app import config
from colorama import Fore, Style
from contextlib import contextmanager
from typing import Any, Dict, Generator, List, Optional


@contextmanager
def get_db_connection() -> Generator[sqlite3.Connection, None, None]:
    """
    Context manager for registry connections.
    Ensures connections are closed and rows are accessible by name.
    """
    conn = sqlite3.connect(database=config.registry_path())
    conn.row_factory = sqlite3.Row
    try:
        yield conn
    finally:
        conn.close()


def init_db() -> bool:
    """Creates the runs table (WAL mode). Returns False instead of raising on failure."""
    try:
        with get_db_connection() as conn:
            conn.execute("PRAGMA journal_mode=WAL;")
            conn.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    config_hash TEXT NOT NULL,
                    variant TEXT NOT NULL,
                    label TEXT,
                    split_hash TEXT,
                    status TEXT NOT NULL,
                    report TEXT,
                    recorded_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)
            conn.execute("CREATE INDEX IF NOT EXISTS idx_config_hash ON runs(config_hash);")
            conn.commit()

        path = config.registry_path()
        if os.name == "posix" and os.path.exists(path):
            try:
                os.chmod(path, 0o600)
            except OSError as e:
                print(f"{Fore.YELLOW}Could not set secure permissions on registry: {e}{Style.RESET_ALL}")
        return True

    except sqlite3.Error as e:
        print(f"{Fore.RED}✗ [DB ERROR] Failed to initialize run registry: {e}{Style.RESET_ALL}")
        return False


def record_run(
    config_hash: str,
    variant: str,
    status: str,
    report: Optional[Dict[str, Any]] = None,
    label: Optional[str] = None,
    split_hash: Optional[str] = None,
) -> None:
    """Appends one finished (or failed) run. Registry errors are printed, never raised."""
    try:
        with get_db_connection() as conn:
            conn.execute(
                "INSERT INTO runs (config_hash, variant, label, split_hash, status, report, recorded_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?)",
                (
                    config_hash,
                    variant,
                    label,
                    split_hash,
                    status,
                    json.dumps(report, sort_keys=True) if report is not None else None,
                    datetime.datetime.now(datetime.timezone.utc).isoformat(),
                ),
            )
            conn.commit()
    except sqlite3.Error as e:
        print(f"{Fore.RED}✗ [DB ERROR] Failed to record run {variant}: {e}{Style.RESET_ALL}")


def recent_runs(limit: int = 20) -> List[Dict[str, Any]]:
    """Newest first."""
    try:
        with get_db_connection() as conn:
            cursor = conn.execute(
                "SELECT id, config_hash, variant, label, split_hash, status, report, recorded_at "
                "FROM runs ORDER BY id DESC LIMIT ?",
                (limit,),
            )
            rows = []
            for row in cursor.fetchall():
                entry = dict(row)
                entry["report"] = json.loads(entry["report"]) if entry["report"] else None
                rows.append(entry)
            return rows
    except sqlite3.Error as e:
        print(f"{Fore.RED}✗ [DB ERROR] Failed to read run registry: {e}{Style.RESET_ALL}")
        return []


def show_runs(limit: int = 20) -> None:
    rows = recent_runs(limit)
    if not rows:
        print(f"{Fore.YELLOW}⚠ No runs recorded yet.{Style.RESET_ALL}")
        print(f"  {Style.DIM}{config.registry_path()}{Style.RESET_ALL}")
        return

    for row in rows:
        ok = row["status"] == "ok"
        icon = f"{Fore.GREEN}✓{Style.RESET_ALL}" if ok else f"{Fore.RED}✗{Style.RESET_ALL}"
        total = row["report"].get("total") if row["report"] else None
        acc = f"{total:.4f}" if isinstance(total, (int, float)) else "-"
        name = row["label"] or row["variant"]
        print(
            f" {icon} {Style.BRIGHT}{name:<28}{Style.RESET_ALL} "
            f"{Fore.CYAN}{acc:>7}{Style.RESET_ALL} "
            f"{Style.DIM}{row['config_hash'][:12]}  {row['recorded_at']}{Style.RESET_ALL}"
        )
