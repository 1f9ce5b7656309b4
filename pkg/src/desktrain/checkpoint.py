"""Binary checkpoint bundles with integrity checking and atomic writes.

A bundle captures everything needed to resume a run bit-exactly: step
counter, parameters, optimizer moments, per-rank dataloader states, the
stochastic-rounding stream position, and the numeric mode.

File layout (little-endian):

    magic "DTCP" | u32 format version
    u64 length | meta JSON (step, mode, opt_t, loader states, SR state,
                            tensor manifest: name, group, shape)
    u64 length | tensor payload (raw float64 bytes, manifest order)
    32-byte SHA-256 over everything above

The trailing hash is verified before any parsing, so truncated or corrupted
files fail fast with `CheckpointError`. Writes go to a temp file in the
destination directory followed by an atomic rename, so a crash mid-write
never leaves a half-written checkpoint under the final name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .data import LoaderState, restore_state, save_state
from .optim import OptimState

MAGIC = b"DTCP"
FORMAT_VERSION = 1
_HASH_BYTES = 32


class CheckpointError(ValueError):
    """Raised for unreadable, corrupted, or incompatible checkpoint data."""


@dataclass
class CheckpointBundle:
    step: int
    params: dict[str, np.ndarray]
    optim: OptimState
    loader_states: tuple[LoaderState, ...]
    numeric_mode: str
    sr_state: dict | None = None

    def tensor_groups(self) -> list[tuple[str, str, np.ndarray]]:
        """(group, name, tensor) triples in canonical serialization order."""
        triples = []
        for group, tensors in (("params", self.params), ("m", self.optim.m), ("v", self.optim.v)):
            for name in sorted(tensors):
                triples.append((group, name, tensors[name]))
        return triples


def bundle_to_bytes(bundle: CheckpointBundle) -> bytes:
    manifest = []
    payload_parts = []
    for group, name, tensor in bundle.tensor_groups():
        arr = np.ascontiguousarray(np.asarray(tensor, dtype=np.float64))
        manifest.append({"group": group, "name": name, "shape": list(arr.shape)})
        payload_parts.append(arr.tobytes())
    meta = {
        "step": bundle.step,
        "numeric_mode": bundle.numeric_mode,
        "opt_t": bundle.optim.t,
        "sr_state": bundle.sr_state,
        "loader_states": [save_state(s) for s in bundle.loader_states],
        "tensors": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(payload_parts)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<Q", len(payload))
    out += payload
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def bundle_from_bytes(data: bytes) -> CheckpointBundle:
    if len(data) < len(MAGIC) + 4 + _HASH_BYTES:
        raise CheckpointError("checkpoint data truncated")
    body, digest = data[:-_HASH_BYTES], data[-_HASH_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (bad hash)")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint bundle (bad magic)")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    meta, offset = _read_block(body, offset, "meta")
    payload, offset = _read_block(body, offset, "tensor payload")
    if offset != len(body):
        raise CheckpointError("trailing bytes after tensor payload")
    try:
        meta = json.loads(meta.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"invalid checkpoint metadata: {exc}") from exc

    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "m": {}, "v": {}}
    pos = 0
    for entry in meta["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = payload[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"tensor payload truncated at {entry['name']!r}")
        groups[entry["group"]][entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(payload):
        raise CheckpointError("tensor payload has trailing bytes")
    if set(groups["params"]) != set(groups["m"]) or set(groups["m"]) != set(groups["v"]):
        raise CheckpointError("parameter and moment tensor names disagree")
    return CheckpointBundle(
        step=int(meta["step"]),
        params=groups["params"],
        optim=OptimState(m=groups["m"], v=groups["v"], t=int(meta["opt_t"])),
        loader_states=tuple(restore_state(r) for r in meta["loader_states"]),
        numeric_mode=str(meta["numeric_mode"]),
        sr_state=meta["sr_state"],
    )


def _read_block(body: bytes, offset: int, what: str) -> tuple[bytes, int]:
    if offset + 8 > len(body):
        raise CheckpointError(f"checkpoint truncated before {what} length")
    (length,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    if offset + length > len(body):
        raise CheckpointError(f"checkpoint truncated inside {what}")
    return body[offset : offset + length], offset + length


def save_checkpoint(bundle: CheckpointBundle, path: str) -> None:
    """Serialize and write atomically (temp file + rename)."""
    data = bundle_to_bytes(bundle)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())
