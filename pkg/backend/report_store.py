from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
import threading
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

import numpy as np

LOGGER = logging.getLogger(__name__)

METADATA_FILE = "metadata.json"
SUMMARY_FILE = "summary.txt"


def to_plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into JSON-ready values; non-finite floats become strings."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def dumps(payload: Any) -> str:
    return json.dumps(to_plain(payload), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_hash(config: dict[str, Any]) -> str:
    body = json.dumps(to_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:12]


class RunStore:
    """One run directory per resolved config; report bodies never carry timestamps."""

    def __init__(self, output_dir: str | os.PathLike[str], experiment: str, config: dict[str, Any]) -> None:
        self.config = to_plain(config)
        self.run_id = f"{experiment}-{config_hash(self.config)}"
        self.run_dir = Path(output_dir) / self.run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.lock = threading.Lock()
        self._started = time.monotonic()
        self._started_at = datetime.now(timezone.utc).isoformat()

    def _register(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.run_dir / name

    def write_json(self, name: str, payload: dict[str, Any]) -> Path:
        body = {"config": self.config, **payload}
        with self.lock:
            path = self._register(name)
            path.write_text(dumps(body), encoding="utf-8")
        LOGGER.debug("wrote %s", path)
        return path

    def write_csv(self, name: str, rows: Iterable[dict[str, Any]]) -> Path:
        rows = [to_plain(row) for row in rows]
        columns: list[str] = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        with self.lock:
            path = self._register(name)
            with path.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in row.items()})
        LOGGER.debug("wrote %s", path)
        return path

    def write_summary(self, lines: Iterable[str]) -> Path:
        with self.lock:
            path = self._register(SUMMARY_FILE)
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def path_for(self, name: str) -> Path:
        """Path for an artifact written by the engine itself (npz archives)."""
        with self.lock:
            return self._register(name)

    def write_metadata(self, *, exit_status: int, extra: dict[str, Any] | None = None) -> Path:
        payload = {
            "run_id": self.run_id,
            "started_at": self._started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "runtime_seconds": round(time.monotonic() - self._started, 3),
            "host": platform.node(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "exit_status": exit_status,
            "files": sorted(self.files),
            **(extra or {}),
        }
        path = self.run_dir / METADATA_FILE
        with self.lock:
            path.write_text(dumps(payload), encoding="utf-8")
        return path
