"""Result writers.

JSON floats go through ``repr`` (shortest string that round-trips), CSV
floats through ``%.17g``; both are lossless. The run manifest is written next
to the primary output so the primary bytes depend only on flags and seeds.
"""

import csv
import io
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from enum import Enum
from importlib import metadata
from typing import Any, Iterable, Optional, Sequence, TextIO

import numpy as np

_PACKAGES = ("numpy", "scipy")


def to_plain(value: Any) -> Any:
    """numpy arrays, enums and dataclasses to JSON-ready builtins; non-finite floats to strings."""
    if isinstance(value, Enum):
        return value.value
    if is_dataclass(value) and not isinstance(value, type):
        return to_plain(asdict(value))
    if isinstance(value, dict):
        return {str(key): to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def dump_json(document: Any) -> str:
    return json.dumps(to_plain(document), indent=2, ensure_ascii=False) + "\n"


def format_float(value: float) -> str:
    return "%.17g" % value


def dump_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            format_float(float(item)) if isinstance(item, (float, np.floating)) else item for item in row
        )
    return buffer.getvalue()


def write_text(text: str, path: Optional[str], stream: Optional[TextIO] = None) -> None:
    if path is None:
        (stream or sys.stdout).write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)


def manifest_path(output_path: str) -> str:
    return f"{output_path}.manifest.json"


def _versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in _PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class RunManifest:
    command: str
    arguments: list[str]
    config: dict[str, Any]
    seeds: dict[str, int]
    versions: dict[str, str] = field(default_factory=_versions)
    started_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    duration_seconds: Optional[float] = None

    def to_json(self) -> str:
        return dump_json(asdict(self))
