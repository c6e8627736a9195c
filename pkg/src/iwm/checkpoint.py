"""Checkpoint bundles: a JSON manifest plus a versioned little-endian tensor archive.

Layout of ``<dir>/tensors.bin``::

    magic  b"IWMTENS\\0"
    u32    format version
    u32    tensor count
    repeated:
        u16  name length, utf-8 name
        u8   dtype code (0=f32, 1=f64, 2=i64)
        u8   ndim, then ndim x u64 extents
        raw little-endian scalars, row-major

``<dir>/manifest.json`` carries the format version, configs, step, a metric
summary and SHA-256 hashes of the archive and of every tensor.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"IWMTENS\x00"
ARCHIVE = "tensors.bin"
MANIFEST = "manifest.json"

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(RuntimeError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class CheckpointBundle:
    tensors: dict[str, np.ndarray]
    configs: dict = field(default_factory=dict)
    step: int = 0
    metrics: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Sub-dict of tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_archive(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if le.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[le.dtype], le.ndim))
        parts.append(struct.pack(f"<{le.ndim}Q", *le.shape))
        parts.append(np.ascontiguousarray(le).tobytes())
    return b"".join(parts)


def decode_archive(data: bytes) -> dict[str, np.ndarray]:
    try:
        if data[:8] != MAGIC:
            raise CheckpointCorrupt("bad archive magic")
        version, count = struct.unpack_from("<II", data, 8)
        if version > FORMAT_VERSION:
            raise CheckpointVersionError(f"archive format {version} is newer than supported {FORMAT_VERSION}")
        off = 16
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(data):
                raise CheckpointCorrupt(f"archive truncated inside tensor {name}")
            out[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=off).reshape(shape).copy()
            off += nbytes
        if off != len(data):
            raise CheckpointCorrupt("trailing bytes after last tensor")
        return out
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointCorrupt(f"malformed archive: {exc}") from exc


def tensor_hash(arr: np.ndarray) -> str:
    return _sha(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    archive = encode_archive(bundle.tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(bundle.step),
        "configs": bundle.configs,
        "metrics": bundle.metrics,
        "archive_sha256": _sha(archive),
        "tensors": {
            name: {"shape": list(arr.shape), "dtype": str(arr.dtype), "sha256": tensor_hash(arr)}
            for name, arr in sorted(bundle.tensors.items())
        },
    }
    tmp = path / (ARCHIVE + ".tmp")
    tmp.write_bytes(archive)
    tmp.replace(path / ARCHIVE)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointCorrupt(f"manifest unreadable: {exc}") from exc
    version = manifest.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version!r} is not supported (this build reads <= {FORMAT_VERSION})")
    data = (path / ARCHIVE).read_bytes()
    if _sha(data) != manifest.get("archive_sha256"):
        raise CheckpointCorrupt(f"archive hash mismatch in {path}")
    tensors = decode_archive(data)
    listed = manifest.get("tensors", {})
    if set(listed) != set(tensors):
        raise CheckpointCorrupt("manifest and archive list different tensors")
    for name, arr in tensors.items():
        if tensor_hash(arr) != listed[name]["sha256"]:
            raise CheckpointCorrupt(f"tensor {name} hash mismatch")
    return CheckpointBundle(tensors, manifest.get("configs", {}), manifest.get("step", 0),
                            manifest.get("metrics", {}))
