"""Checkpoint archive: a manifest plus raw little-endian tensor blobs.

Layout (byte-exact, also documented in docs/formats.md):

    offset 0   magic b"DDCK"
    4          u32 LE format version (currently 1)
    8          u32 LE manifest length M
    12         manifest, M bytes of UTF-8 JSON with sorted keys
    12 + M     blob data, concatenated in manifest order

The manifest records the producing module, the config hash, parent
checkpoint checksums (lineage), frozen flags, schedule constants, and one
entry per blob (name, dtype, shape, sha256, nbytes). Blob checksums are
verified on load and a mismatch names the offending blob. Nothing in the
archive depends on time or machine, so identical (config, seed) runs
produce bit-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DDCK"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<u1"}


class CheckpointError(ValueError):
    """Corruption, version, or config-hash failures."""


@dataclass
class Checkpoint:
    module: str
    config_hash: str
    tensors: dict[str, np.ndarray]
    parents: dict[str, str] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    schedules: dict[str, dict] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write the archive; returns the sha256 of the complete file, which is
    the checksum lineage manifests cite."""
    blobs = []
    datas = []
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        # Single-byte dtypes print "|u1"; normalize to the LE spelling.
        dtype = arr.dtype.newbyteorder("<").str.replace("|", "<")
        if dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
            dtype = "<f8"
        raw = np.ascontiguousarray(arr.astype(dtype, copy=False)).tobytes()
        blobs.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "sha256": hashlib.sha256(raw).hexdigest(),
                "nbytes": len(raw),
            }
        )
        datas.append(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "module": ckpt.module,
        "config_hash": ckpt.config_hash,
        "parents": ckpt.parents,
        "frozen": ckpt.frozen,
        "schedules": ckpt.schedules,
        "extra": ckpt.extra,
        "blobs": blobs,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(mbytes).to_bytes(4, "little"))
        fh.write(mbytes)
        for raw in datas:
            fh.write(raw)
    return file_checksum(path)


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    allow_config_mismatch: bool = False,
) -> Checkpoint:
    """Parse and verify an archive. Every blob's sha256 is rechecked; a
    config-hash mismatch is rejected unless explicitly overridden."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
    mlen = int.from_bytes(raw[8:12], "little")
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash:
        if not allow_config_mismatch:
            raise CheckpointError(
                f"{path}: checkpoint config hash {manifest['config_hash'][:12]} does not match "
                f"the active config {expected_config_hash[:12]}; pass the explicit override to load anyway"
            )
    tensors = {}
    off = 12 + mlen
    for blob in manifest["blobs"]:
        data = raw[off : off + blob["nbytes"]]
        off += blob["nbytes"]
        digest = hashlib.sha256(data).hexdigest()
        if digest != blob["sha256"]:
            raise CheckpointError(
                f"{path}: checksum mismatch in blob {blob['name']!r} "
                f"(stored {blob['sha256'][:12]}, computed {digest[:12]})"
            )
        tensors[blob["name"]] = np.frombuffer(data, dtype=blob["dtype"]).reshape(blob["shape"]).copy()
    return Checkpoint(
        module=manifest["module"],
        config_hash=manifest["config_hash"],
        tensors=tensors,
        parents=manifest["parents"],
        frozen=manifest["frozen"],
        schedules=manifest["schedules"],
        extra=manifest["extra"],
    )


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
