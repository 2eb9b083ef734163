"""Flat binary checkpoints with a CSV manifest; reload is bit-exact.

A checkpoint is ``<stem>.bin`` (concatenated little-endian float64 arrays
in C order) plus ``<stem>.manifest.csv`` with columns
``group,name,shape,offset`` where shape is 'x'-separated dims and offset
is the byte position in the .bin file. Keys are ``group.name`` and are
written in sorted order.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np


def save_checkpoint(params: Mapping[str, np.ndarray], stem: str | Path) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    offset = 0
    rows = []
    with open(f"{stem}.bin", "wb") as bin_fh:
        for key in sorted(params):
            group, _, name = key.partition(".")
            array = np.ascontiguousarray(params[key], dtype="<f8")
            shape = "x".join(str(d) for d in array.shape)
            rows.append((group, name, shape, str(offset)))
            bin_fh.write(array.tobytes())
            offset += array.nbytes
    with open(f"{stem}.manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("group", "name", "shape", "offset"))
        writer.writerows(rows)


def load_checkpoint(stem: str | Path) -> dict[str, np.ndarray]:
    stem = Path(stem)
    blob = Path(f"{stem}.bin").read_bytes()
    params: dict[str, np.ndarray] = {}
    with open(f"{stem}.manifest.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["group", "name", "shape", "offset"]:
            raise ValueError(f"{stem}: bad manifest header")
        for group, name, shape_text, offset_text in reader:
            shape = tuple(int(d) for d in shape_text.split("x")) if shape_text else ()
            count = int(np.prod(shape)) if shape else 1
            offset = int(offset_text)
            array = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            params[f"{group}.{name}"] = array.reshape(shape).copy()
    return params
