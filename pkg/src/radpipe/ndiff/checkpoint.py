"""Named-tensor archive used for checkpoints, reducers and classifiers.

Same pairing idea as the RVOL volume format: ``<name>.json`` holds the
tensor directory (names, shapes, dtypes, byte offsets) plus free-form
metadata, ``<name>.bin`` holds the little-endian payloads concatenated
in directory order.  Entries are sorted by name so the archive bytes
are a pure function of its contents.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import FormatError

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.int64): "i64"}


def _archive_paths(path: str | os.PathLike) -> tuple[str, str]:
    base = str(path)
    for suffix in (".json", ".bin"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base + ".json", base + ".bin"


def save_archive(path: str | os.PathLike, arrays: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    header_path, bin_path = _archive_paths(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float32)
        tag = _DTYPE_TAGS[arr.dtype]
        blob = np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset,
             "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "ndiff-archive",
        "version": 1,
        "byte_order": "little",
        "meta": meta or {},
        "tensors": entries,
    }
    with open(header_path, "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(bin_path, "wb") as f:
        for blob in blobs:
            f.write(blob)


def load_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    header_path, bin_path = _archive_paths(path)
    for p in (header_path, bin_path):
        if not os.path.exists(p):
            raise FormatError(f"missing archive file: {p}")
    with open(header_path) as f:
        try:
            header = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid archive header {header_path}: {e}") from e
    if header.get("format") != "ndiff-archive":
        raise FormatError(f"{header_path} is not an ndiff archive")
    with open(bin_path, "rb") as f:
        payload = f.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        try:
            name = entry["name"]
            shape = tuple(int(n) for n in entry["shape"])
            dt = _DTYPES[entry["dtype"]]
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad tensor entry in {header_path}: {e}") from e
        if offset + nbytes > len(payload):
            raise FormatError(
                f"{bin_path}: tensor {name} extends past end of payload "
                f"({offset + nbytes} > {len(payload)})"
            )
        arr = np.frombuffer(payload, dtype=dt, count=nbytes // np.dtype(dt).itemsize,
                            offset=offset)
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{bin_path}: tensor {name} size does not match shape {shape}")
        arrays[name] = arr.reshape(shape).copy()
    return arrays, header.get("meta", {})
