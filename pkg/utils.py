"""
Utility functions for the detection engine.

Seed derivation, locale-independent number formatting, JSON output and
time formatting helpers shared by the pipeline modules.
"""

import json
import math
import os
from typing import Any, Iterable, List

import numpy as np


def derive_seed(seed: int, *keys: int) -> int:
    """
    Mix a base seed with integer keys (e.g. an image index).

    Per-item seeds make per-item work independent of processing order.

    Args:
        seed: Base seed (non-negative)
        keys: Additional non-negative integers to mix in

    Returns:
        Non-negative 63-bit seed
    """
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def format_number(value: float) -> str:
    """
    Format a float with 6 significant digits, independent of locale.

    Args:
        value: Number to format

    Returns:
        Formatted string (e.g. "0.993421", "inf")
    """
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(float(value), ".6g")


def write_json(path: str, data: Any) -> None:
    """
    Write data as UTF-8 JSON with sorted keys and a trailing newline.

    Sorted keys keep repeated runs byte-identical.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def write_json_lines(path: str, records: Iterable[dict]) -> int:
    """
    Write one compact JSON object per line.

    Returns:
        Number of records written
    """
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            f.write("\n")
            count += 1
    return count


def read_json_lines(path: str) -> List[dict]:
    """Read a JSON-lines file, skipping blank lines."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records


def ensure_parent_dir(path: str) -> None:
    """Create the directory that will hold path, if needed."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def format_time(seconds: float) -> str:
    """
    Format time duration in human-readable format.

    Args:
        seconds: Time in seconds

    Returns:
        Formatted time string (e.g., "1.23s" or "1m 23s")
    """
    if seconds < 60:
        return f"{seconds:.2f}s"
    else:
        minutes = int(seconds // 60)
        remaining_seconds = seconds % 60
        return f"{minutes}m {remaining_seconds:.1f}s"


def format_kb(num_bytes: int) -> str:
    """Format a byte count as kB (bytes / 1000) with one decimal."""
    return f"{num_bytes / 1000.0:.1f} kB"
