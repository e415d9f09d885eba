"""
Helper functions for writing run artifacts and fanning work out over threads.
"""

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def atomic_write_bytes(path, payload: bytes):
    """Write to a temporary sibling, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not np.isfinite(value):
        # JSON has no infinities; attack epsilons use them for "never succeeded"
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def to_json(value: Any) -> str:
    return json.dumps(_jsonable(value), sort_keys=True, indent=2) + "\n"


def write_json(path, value: Any):
    atomic_write_text(path, to_json(value))


def write_jsonl(path, rows: Iterable[Dict[str, Any]]):
    atomic_write_text(path, "".join(json.dumps(_jsonable(row), sort_keys=True) + "\n" for row in rows))


def write_columns(path, columns: Sequence[Sequence[float]], header: str = ""):
    """Whitespace-separated numeric columns, one row per line, for plotting tools."""
    lines = [f"# {header}"] if header else []
    for row in zip(*columns):
        lines.append(" ".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """
    Apply fn to every item, optionally on a thread pool.

    Results come back in input order whatever the schedule, so callers that
    give each item its own RNG substream get schedule-independent output.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def chunked(n: int, size: int) -> List[slice]:
    return [slice(start, min(start + size, n)) for start in range(0, n, size)]
