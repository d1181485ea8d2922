"""Binary checkpoints and metrics CSV files.

Checkpoint layout::

    b"AUTOROUTE-CKPT\\n"   magic
    uint32                 format version
    uint64                 header length
    header                 UTF-8 JSON (sorted keys): meta + record table
    payload                records back to back; arrays as little-endian float64

Every record is ``{"name", "kind": "array"|"bytes", "shape", "offset", "nbytes"}``
with offsets relative to the payload start.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"AUTOROUTE-CKPT\n"
VERSION = 1
_PREFIX = struct.Struct("<IQ")


def write_checkpoint(path, records: dict, meta: dict | None = None) -> None:
    """``records`` maps names to numpy arrays or raw ``bytes`` blobs."""
    table, chunks, offset = [], [], 0
    for name, value in records.items():
        if isinstance(value, (bytes, bytearray)):
            data, kind, shape = bytes(value), "bytes", []
        else:
            arr = np.asarray(value, dtype=np.float64)
            data, kind, shape = arr.astype("<f8").tobytes(), "array", list(arr.shape)
        table.append({"name": name, "kind": kind, "shape": shape, "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "records": table}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(VERSION, len(header)))
        fh.write(header)
        for data in chunks:
            fh.write(data)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(records, meta)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + _PREFIX.size
    header = json.loads(blob[start : start + hlen])
    payload = blob[start + hlen :]
    records = {}
    for rec in header["records"]:
        data = payload[rec["offset"] : rec["offset"] + rec["nbytes"]]
        if rec["kind"] == "bytes":
            records[rec["name"]] = data
        else:
            records[rec["name"]] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rec["shape"])
    return records, header["meta"]


# -- metrics CSV --------------------------------------------------------------


def history_columns(n_layers: int, pi_sizes: list[int] | None) -> list[str]:
    cols = ["epoch"] + [f"action_L{i}" for i in range(n_layers)]
    if pi_sizes is not None:
        cols += [f"reward_L{i}" for i in range(n_layers)]
        cols += [f"pi_L{i}_{k}" for i, size in enumerate(pi_sizes) for k in range(size)]
    return cols + ["train_loss", "holdout_loss", "test_mse", "lr"]


def flatten_row(row: dict) -> dict:
    flat = {"epoch": row["epoch"]}
    for i, a in enumerate(row["actions"]):
        flat[f"action_L{i}"] = a
    for i, r in enumerate(row.get("rewards", [])):
        flat[f"reward_L{i}"] = r
    for i, pi in enumerate(row.get("pi", [])):
        for k, p in enumerate(pi):
            flat[f"pi_L{i}_{k}"] = float(p)
    for key in ("train_loss", "holdout_loss", "test_mse", "lr"):
        flat[key] = row[key]
    return flat


def _fmt(v) -> str:
    # repr round-trips float64 exactly
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Append-and-flush CSV writer so a crashed run keeps its history."""

    def __init__(self, path, columns: list[str]):
        self.columns = columns
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)
        self._fh.flush()

    def write(self, flat: dict) -> None:
        self._writer.writerow([_fmt(flat[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_rows(path, columns: list[str], rows: Iterable[dict]) -> None:
    writer = MetricsWriter(path, columns)
    try:
        for r in rows:
            writer.write(r)
    finally:
        writer.close()


def read_rows(path) -> list[dict]:
    """Parse a CSV written by this module; ints stay ints, the rest are floats."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k == "epoch" or k.startswith("action_"):
                    row[k] = int(v)
                elif k in ("op", "mode", "status"):
                    row[k] = v
                else:
                    row[k] = float(v)
            out.append(row)
    return out
