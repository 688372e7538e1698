"""On-disk dataset format: ``manifest.json`` plus one "ULMV" tensor blob per
(patient, view, timepoint) observation.

Blob layout (little-endian)::

    4s   magic  b"ULMV"
    H    format version (1)
    B    dtype code (1 float32, 2 float64, 3 int64)
    B    rank
    I*   one uint32 per dimension
    ...  row-major payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .catalog import MISSING_LABEL, Dataset, ViewCatalog

MAGIC = b"ULMV"
BLOB_VERSION = 1
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4sHBB")
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class DatasetFormatError(ValueError):
    """Base class for on-disk format problems."""


class ChecksumError(DatasetFormatError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"checksum mismatch for {self.path}")


class SchemaVersionError(DatasetFormatError):
    pass


class DanglingReferenceError(DatasetFormatError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"manifest references missing file {self.path}")


class BlobError(DatasetFormatError):
    pass


def encode_blob(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise BlobError(f"unsupported dtype {arr.dtype}")
    head = _HEADER.pack(MAGIC, BLOB_VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_blob(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise BlobError(f"{source}: truncated header")
    magic, version, code, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BlobError(f"{source}: bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise BlobError(f"{source}: unsupported blob version {version}")
    if code not in DTYPE_CODES:
        raise BlobError(f"{source}: unknown dtype code {code}")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise BlobError(f"{source}: truncated dimensions")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dt = DTYPE_CODES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != need:
        raise BlobError(f"{source}: payload has {len(buf) - off} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dt, count=need // dt.itemsize, offset=off).reshape(shape).copy()


def sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    names = ds.catalog.names
    patients = []
    for i, pid in enumerate(ds.patient_ids):
        blobs = []
        for t in range(ds.timepoints):
            for a, name in enumerate(names):
                if not ds.available[i, t, a]:
                    continue
                rel = f"blobs/{pid}_{name}_t{t}.ulmv"
                buf = encode_blob(ds.obs[a][i, t])
                (root / rel).write_bytes(buf)
                blobs.append({"view": name, "t": t, "file": rel, "sha256": sha256(buf)})
        patients.append({
            "id": pid,
            "split": str(ds.split[i]),
            "labels": [None if y == MISSING_LABEL else int(y) for y in ds.labels[i]],
            "available": ds.available[i].astype(int).tolist(),
            "blobs": blobs,
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "class_count": ds.class_count,
        "catalog": ds.catalog.to_dict(),
        "meta": ds.meta,
        "patients": patients,
    }
    _dump_json(manifest, root / "manifest.json")
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DanglingReferenceError(mpath)
    manifest = json.loads(mpath.read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"manifest schema version {version!r}, expected {SCHEMA_VERSION}")
    catalog = ViewCatalog.from_dict(manifest["catalog"])
    P, L, n = len(manifest["patients"]), catalog.timepoints, catalog.n_views
    obs = [np.zeros((P, L) + v.obs_shape, dtype=np.float32) for v in catalog.views]
    available = np.zeros((P, L, n), dtype=bool)
    labels = np.full((P, L), MISSING_LABEL, dtype=np.int64)
    ids, split = [], []
    for i, rec in enumerate(manifest["patients"]):
        ids.append(rec["id"])
        split.append(rec["split"])
        labels[i] = [MISSING_LABEL if y is None else y for y in rec["labels"]]
        flags = np.asarray(rec["available"], dtype=bool)
        seen = np.zeros_like(flags)
        for b in rec["blobs"]:
            fpath = root / b["file"]
            if not fpath.is_file():
                raise DanglingReferenceError(fpath)
            buf = fpath.read_bytes()
            if sha256(buf) != b["sha256"]:
                raise ChecksumError(fpath)
            a, t = catalog.index(b["view"]), int(b["t"])
            arr = decode_blob(buf, str(fpath))
            if arr.shape != catalog.views[a].obs_shape:
                raise BlobError(f"{fpath}: shape {arr.shape} != {catalog.views[a].obs_shape}")
            obs[a][i, t] = arr
            seen[t, a] = True
        if not np.array_equal(seen, flags):
            raise DatasetFormatError(f"patient {rec['id']}: availability flags disagree with blob list")
        available[i] = flags
    ds = Dataset(catalog, int(manifest["class_count"]), obs, available, labels, ids,
                 np.asarray(split, dtype="<U5"), manifest.get("meta", {}))
    ds.validate()
    return ds


def directory_checksums(path) -> dict[str, str]:
    """sha256 of every file under ``path`` keyed by relative path."""
    root = Path(path)
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = sha256(p.read_bytes())
    return dict(sorted(out.items()))
