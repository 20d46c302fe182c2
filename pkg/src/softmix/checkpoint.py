"""Manifest + blob checkpoint files.

A checkpoint is two files: a UTF-8 manifest of tab-separated key/value lines
and a binary blob holding every tensor as little-endian float32, concatenated
in manifest order. The manifest records the blob's SHA-256; loading verifies it
together with every tensor's shape and extent.

Manifest layout::

    format_version  1
    blob            model.bin
    sha256          <hex digest of the blob>
    meta.<key>      <value>
    tensor          <name>  <comma-separated shape>  <byte offset>  <byte length>
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = "1"
_DTYPE = np.dtype("<f4")


def blob_path_for(manifest_path: str | Path) -> Path:
    manifest_path = Path(manifest_path)
    return manifest_path.with_suffix(".bin")


def _check_text(value: str, what: str) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise FormatError(f"{what} may not contain tabs or newlines: {value!r}")
    return value


def save_checkpoint(
    manifest_path: str | Path,
    tensors: dict[str, np.ndarray],
    meta: dict[str, str] | None = None,
) -> Path:
    """Write ``tensors`` (in insertion order) and ``meta`` strings. Returns the manifest path."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = blob_path_for(manifest_path)

    chunks = []
    lines = []
    offset = 0
    for name, array in tensors.items():
        _check_text(name, "tensor name")
        data = np.ascontiguousarray(np.asarray(array, dtype=np.float64).astype(_DTYPE)).tobytes()
        shape = ",".join(str(s) for s in np.shape(array))
        lines.append(f"tensor\t{name}\t{shape}\t{offset}\t{len(data)}")
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()

    header = [
        f"format_version\t{FORMAT_VERSION}",
        f"blob\t{blob_path.name}",
        f"sha256\t{digest}",
    ]
    for key, value in (meta or {}).items():
        header.append(f"meta.{_check_text(key, 'meta key')}\t{_check_text(str(value), 'meta value')}")

    blob_path.write_bytes(blob)
    manifest_path.write_text("\n".join(header + lines) + "\n", encoding="utf-8")
    return manifest_path


def load_checkpoint(manifest_path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint back as ``(tensors, meta)``; tensors come back as float32 arrays."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FormatError(f"checkpoint manifest not found: {manifest_path}")
    header: dict[str, str] = {}
    meta: dict[str, str] = {}
    entries: list[tuple[str, tuple[int, ...], int, int]] = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "tensor":
            if len(fields) != 5:
                raise FormatError(f"{manifest_path}:{lineno}: malformed tensor entry")
            _, name, shape_text, off, length = fields
            shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
            entries.append((name, shape, int(off), int(length)))
        elif len(fields) == 2:
            key, value = fields
            if key.startswith("meta."):
                meta[key[5:]] = value
            else:
                header[key] = value
        else:
            raise FormatError(f"{manifest_path}:{lineno}: expected key<TAB>value")

    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {header.get('format_version')!r}")
    blob_path = manifest_path.parent / header.get("blob", blob_path_for(manifest_path).name)
    if not blob_path.exists():
        raise FormatError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise FormatError(f"checksum mismatch for {blob_path}")

    tensors: dict[str, np.ndarray] = {}
    for name, shape, off, length in entries:
        count = int(np.prod(shape)) if shape else 1
        if length != count * _DTYPE.itemsize or off + length > len(blob):
            raise FormatError(f"tensor {name!r} has inconsistent shape/extent")
        tensors[name] = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=off).reshape(shape).copy()
    return tensors, meta
