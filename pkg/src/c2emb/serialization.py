"""Binary containers: model checkpoints and embedding vector files.

Checkpoint layout (all integers little-endian):

    bytes 0..3   magic "C2PM"
    u32          format version (currently 1)
    u32          metadata length in bytes
    ...          metadata, canonical UTF-8 JSON
    u64          parameter count
    per parameter, sorted by name:
        u64      name length in bytes, then the UTF-8 name
        u64      rank, then rank x u64 dimension sizes
        ...      float64 values, C order

Embedding file layout:

    bytes 0..3   magic "C2EV"
    u32          format version (currently 1)
    u64          vector count, u64 dimension
    ...          count x dimension float64 values, row-major

Both formats round-trip float64 payloads bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError

__all__ = [
    "CHECKPOINT_MAGIC", "EMBEDDINGS_MAGIC", "FORMAT_VERSION",
    "Checkpoint", "save_checkpoint", "load_checkpoint", "inspect_checkpoint",
    "save_embeddings", "load_embeddings",
]

CHECKPOINT_MAGIC = b"C2PM"
EMBEDDINGS_MAGIC = b"C2EV"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int
    config_hash: str
    merged: bool = False
    seed: int = 0
    lora: dict | None = None

    def content_digest(self) -> str:
        """Digest of the parameter payload alone, independent of metadata."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            a = np.ascontiguousarray(self.params[name], dtype="<f8")
            h.update(name.encode("utf-8"))
            h.update(struct.pack("<Q", a.ndim))
            h.update(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
            h.update(a.tobytes())
        return h.hexdigest()


def _metadata_bytes(ck: Checkpoint) -> bytes:
    meta = {"step": ck.step, "config_hash": ck.config_hash,
            "merged": ck.merged, "seed": ck.seed, "lora": ck.lora}
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        meta = _metadata_bytes(ck)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<Q", len(ck.params)))
        for name in sorted(ck.params):
            arr = np.ascontiguousarray(ck.params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version}, "
                f"expected {FORMAT_VERSION}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, path, "metadata length"))
        try:
            meta = json.loads(_read_exact(f, meta_len, path, "metadata"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: malformed metadata: {e.msg}") from e
        for key in ("step", "config_hash", "merged", "seed", "lora"):
            if key not in meta:
                raise CheckpointError(f"{path}: metadata missing {key!r}")
        (count,) = struct.unpack("<Q", _read_exact(f, 8, path, "parameter count"))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(f, 8, path, "name length"))
            name = _read_exact(f, name_len, path, "parameter name").decode("utf-8")
            if name in params:
                raise CheckpointError(f"{path}: duplicate parameter {name!r}")
            (rank,) = struct.unpack("<Q", _read_exact(f, 8, path, "rank"))
            shape = struct.unpack(
                f"<{rank}Q", _read_exact(f, 8 * rank, path, f"dims of {name!r}")) if rank else ()
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 8 * size, path, f"values of {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").astype(
                np.float64, copy=True).reshape(shape)
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return Checkpoint(params=params, step=int(meta["step"]),
                      config_hash=str(meta["config_hash"]),
                      merged=bool(meta["merged"]), seed=int(meta["seed"]),
                      lora=meta["lora"])


def inspect_checkpoint(path) -> dict:
    """Summary of a checkpoint file: metadata plus per-parameter shapes."""
    ck = load_checkpoint(path)
    return {
        "version": FORMAT_VERSION,
        "step": ck.step,
        "config_hash": ck.config_hash,
        "merged": ck.merged,
        "seed": ck.seed,
        "lora": ck.lora,
        "n_params": len(ck.params),
        "n_values": int(sum(a.size for a in ck.params.values())),
        "params": [{"name": n, "shape": list(ck.params[n].shape)}
                   for n in sorted(ck.params)],
    }


def save_embeddings(path, vectors: np.ndarray) -> None:
    arr = np.ascontiguousarray(vectors, dtype="<f8")
    if arr.ndim != 2:
        raise CheckpointError(f"embeddings must be 2-d, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(EMBEDDINGS_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != EMBEDDINGS_MAGIC:
            raise CheckpointError(f"{path}: not an embeddings file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported embeddings version {version}")
        count, dim = struct.unpack("<QQ", _read_exact(f, 16, path, "header"))
        raw = _read_exact(f, 8 * count * dim, path, "values")
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64, copy=True).reshape(count, dim)
