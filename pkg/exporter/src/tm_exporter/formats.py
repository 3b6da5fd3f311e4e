"""Writers for the two binary containers.

NNW v1:    magic "NNW1" | u64 LE manifest length | UTF-8 JSON manifest
           (layers + blob offsets) | raw little-endian float32 blobs.
STDUMP v1: magic "STDM" | u32 LE version = 1 | u64 LE metadata length |
           UTF-8 JSON metadata {n, m, k_entries, order, dtype} |
           n*m fixed-size records of little-endian float32 values.
"""

from __future__ import annotations

import json
import struct
from typing import Iterable

import numpy as np

NNW_MAGIC = b"NNW1"
STDUMP_MAGIC = b"STDM"
STDUMP_VERSION = 1


def write_nnw(path, input_shape, layers: list[dict], blobs: list[tuple[int, str, np.ndarray]]) -> None:
    """``blobs``: (layer index, param name, float32 array) triples."""
    blob_meta, raws, offset = [], [], 0
    for layer_idx, name, arr in sorted(blobs, key=lambda t: (t[0], t[1])):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        blob_meta.append(
            {"layer": layer_idx, "param": name, "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        raws.append(raw)
        offset += len(raw)
    manifest = {
        "format": "nnw",
        "version": 1,
        "input_shape": list(input_shape),
        "layers": layers,
        "blobs": blob_meta,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(NNW_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for raw in raws:
            f.write(raw)


class DumpWriter:
    """Streams STDUMP records; sample-major order (inner loop over
    transformations)."""

    def __init__(self, path, n: int, m: int, entries: list[dict],
                 extra_metadata: dict | None = None):
        self.cell_count = sum(int(np.prod(e["shape"])) for e in entries)
        self.expected = n * m
        self.written = 0
        meta = {
            "n": n,
            "m": m,
            "k_entries": entries,
            "order": "sample_major",
            "dtype": "f32le",
        }
        if extra_metadata:
            meta.update(extra_metadata)
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        self._f = open(path, "wb")
        self._f.write(STDUMP_MAGIC)
        self._f.write(struct.pack("<I", STDUMP_VERSION))
        self._f.write(struct.pack("<Q", len(payload)))
        self._f.write(payload)

    def write_record(self, values: np.ndarray) -> None:
        arr = np.ascontiguousarray(values, dtype="<f4")
        if arr.size != self.cell_count:
            raise ValueError(f"record has {arr.size} values, manifest needs {self.cell_count}")
        self._f.write(arr.tobytes())
        self.written += 1

    def close(self) -> None:
        self._f.close()
        if self.written != self.expected:
            raise ValueError(f"wrote {self.written} records, header promised {self.expected}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._f.close()
        return False


def write_dump(path, n: int, m: int, entries: list[dict],
               records: Iterable[np.ndarray], extra_metadata: dict | None = None) -> None:
    with DumpWriter(path, n, m, entries, extra_metadata) as w:
        for values in records:
            w.write_record(values)
