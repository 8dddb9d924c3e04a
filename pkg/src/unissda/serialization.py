"""Dataset and parameter serialization.

Binary layout (all little-endian)::

    magic   4 bytes  b"USDA"
    version uint32
    N, d    uint64, uint64
    domain  uint8    (0 source, 1 target)
    L       uint64   size of the label set
    features  N*d float64, row-major
    class_ids N int64
    labeled   N uint8
    split     N uint8 (0 train, 1 val, 2 test)
    label_set L int64

Parameter checkpoints are a sequence of named array blocks::

    magic b"USDP", version uint32, count uint32
    per block: name length uint16, utf-8 name, ndim uint8 (1 or 2),
               ndim x uint64 shape, then float64 values row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .datagen import DOMAINS, SPLITS, FeatureDataset
from .exceptions import DataError

_DATA_MAGIC = b"USDA"
_PARAM_MAGIC = b"USDP"
_VERSION = 1


def write_jsonl(ds: FeatureDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"label_set": list(ds.label_set), "domain": ds.domain}) + "\n")
        for i in range(len(ds)):
            rec = {
                "features": ds.features[i].tolist(),
                "class_id": int(ds.class_ids[i]),
                "domain": ds.domain,
                "labeled": bool(ds.labeled_mask[i]),
                "split": str(ds.split[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> FeatureDataset:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "label_set" not in lines[0]:
        raise DataError(f"{path}: missing header record")
    header, rows = lines[0], lines[1:]
    d = len(rows[0]["features"]) if rows else 0
    feats = np.array([r["features"] for r in rows], dtype=np.float64).reshape(len(rows), d)
    return FeatureDataset(
        feats,
        np.array([r["class_id"] for r in rows], dtype=np.int64),
        header["domain"],
        np.array([r["labeled"] for r in rows], dtype=bool),
        np.array([r["split"] for r in rows], dtype="<U5"),
        tuple(header["label_set"]),
    )


def dataset_to_bytes(ds: FeatureDataset) -> bytes:
    n, d = ds.features.shape
    split_codes = np.array([SPLITS.index(s) for s in ds.split], dtype=np.uint8)
    parts = [
        _DATA_MAGIC,
        struct.pack("<IQQBQ", _VERSION, n, d, DOMAINS.index(ds.domain), len(ds.label_set)),
        ds.features.astype("<f8").tobytes(order="C"),
        ds.class_ids.astype("<i8").tobytes(),
        ds.labeled_mask.astype(np.uint8).tobytes(),
        split_codes.tobytes(),
        np.asarray(ds.label_set, dtype="<i8").tobytes(),
    ]
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> FeatureDataset:
    if buf[:4] != _DATA_MAGIC:
        raise DataError("not a dataset file (bad magic)")
    header = struct.Struct("<IQQBQ")
    version, n, d, dom, n_labels = header.unpack_from(buf, 4)
    if version != _VERSION:
        raise DataError(f"unsupported dataset format version {version}")
    off = 4 + header.size
    expected = off + n * d * 8 + n * 8 + n + n + n_labels * 8
    if len(buf) != expected:
        raise DataError(f"dataset file truncated: {len(buf)} bytes, expected {expected}")

    def take(count, dtype, width):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += count * width
        return arr

    feats = take(n * d, "<f8", 8).reshape(n, d).astype(np.float64)
    class_ids = take(n, "<i8", 8).astype(np.int64)
    labeled = take(n, np.uint8, 1).astype(bool)
    split = np.array(SPLITS, dtype="<U5")[take(n, np.uint8, 1)]
    label_set = tuple(int(c) for c in take(n_labels, "<i8", 8))
    return FeatureDataset(feats, class_ids, DOMAINS[dom], labeled, split, label_set)


def write_binary(ds: FeatureDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_binary(path) -> FeatureDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def params_to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [_PARAM_MAGIC, struct.pack("<II", _VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise DataError(f"parameter {name} must be 1-D or 2-D")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != _PARAM_MAGIC:
        raise DataError("not a parameter file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise DataError(f"unsupported parameter format version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{ndim}Q", buf, off + 1)
        off += 1 + 8 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
        off += size * 8
        out[name] = arr.astype(np.float64)
    return out
