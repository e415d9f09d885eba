import json
import math
from pathlib import Path

import numpy as np

from jem_lab.utils import (
    atomic_write_text, chunked, parallel_map, to_json, write_columns, write_json, write_jsonl,
)

OUT_DIR = "/mock_out"


def test_atomic_write_creates_parents_and_leaves_no_temp_files(fs):
    path = Path(OUT_DIR) / "nested" / "file.txt"
    atomic_write_text(path, "first")
    atomic_write_text(path, "second")
    assert path.read_text() == "second"
    assert [p.name for p in path.parent.iterdir()] == ["file.txt"]


def test_json_handles_numpy_and_infinities():
    payload = json.loads(to_json({"eps": np.array([0.5, math.inf]), "n": np.int64(3), "x": np.float64(0.25)}))
    assert payload == {"eps": [0.5, "inf"], "n": 3, "x": 0.25}


def test_write_json_and_jsonl(fs):
    write_json(f"{OUT_DIR}/a.json", {"b": 1, "a": 2})
    assert list(json.loads(Path(f"{OUT_DIR}/a.json").read_text())) == ["a", "b"]
    write_jsonl(f"{OUT_DIR}/rows.jsonl", [{"epoch": 0}, {"epoch": 1}])
    lines = Path(f"{OUT_DIR}/rows.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [0, 1]


def test_write_columns(fs):
    write_columns(f"{OUT_DIR}/curve.txt", [[0.0, 0.5], [1.0, 0.25]], header="epsilon accuracy")
    lines = Path(f"{OUT_DIR}/curve.txt").read_text().splitlines()
    assert lines == ["# epsilon accuracy", "0.0 1.0", "0.5 0.25"]


def test_parallel_map_keeps_input_order():
    items = list(range(20))
    assert parallel_map(lambda v: v * v, items, threads=4) == [v * v for v in items]
    assert parallel_map(lambda v: v, [], threads=4) == []


def test_chunked_covers_range():
    assert chunked(5, 2) == [slice(0, 2), slice(2, 4), slice(4, 5)]
    assert chunked(0, 3) == []
