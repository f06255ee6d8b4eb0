"""Binary checkpoints of an agent state.

Layout::

    b"CLPU"                 magic
    u16 LE                  format version
    u16 LE                  reserved (0)
    u32 LE                  header length in bytes
    header                  UTF-8 JSON, sorted keys, no whitespace
    payload                 concatenated little-endian array blobs

The header lists every blob as ``{name, dtype, shape, offset, nbytes}``.
Floats are stored as ``<f4`` and integer labels as ``<i4``.  Per-task blobs
carry the task id in their name (``temp/3/W0``, ``mem/3/x``, ...), so a
forgotten task can be checked for absence by name.
"""

from __future__ import annotations

import json
import struct
from typing import Union

import numpy as np

from . import numkern as nk
from .errors import BadMagicError, TruncatedError, VersionMismatchError
from .protocol import AgentState, EpisodicMemory, Instruction, ModelRegistry, TaskStatus

MAGIC = b"CLPU"
VERSION = 1
_PREFIX = struct.Struct("<4sHHI")


def _param_blobs(prefix: str, p: nk.NetParams):
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        yield f"{prefix}/W{i}", w.astype("<f4")
        yield f"{prefix}/b{i}", b.astype("<f4")


def to_bytes(state: AgentState) -> bytes:
    reg = state.registry
    blobs = list(_param_blobs("main", reg.main))
    for k in sorted(reg.temp):
        blobs += _param_blobs(f"temp/{k}", reg.temp[k])
    masks = {}
    for k in sorted(reg.memories):
        m = reg.memories[k]
        blobs.append((f"mem/{k}/x", m.x.astype("<f4")))
        blobs.append((f"mem/{k}/y", m.y.astype("<i4")))
        blobs.append((f"mem/{k}/h", m.h.astype("<f4")))
        masks[str(k)] = list(m.mask)
    for table in sorted(state.extras):
        for k in sorted(state.extras[table]):
            blobs += _param_blobs(f"extra/{table}/{k}", state.extras[table][k])

    table, offset = [], 0
    for name, arr in blobs:
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "arch": list(state.sizes),
        "strategy": state.strategy,
        "master_seed": state.master_seed,
        "t": state.t,
        "status": [[k, s.instruction.value, s.first_learned_at, s.memory_ref]
                   for k, s in sorted(state.status.items())],
        "memory_masks": masks,
        "extras": sorted(state.extras),
        "blobs": table,
        "payload_size": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, 0, len(head)), head]
    parts += [np.ascontiguousarray(arr).tobytes() for _, arr in blobs]
    return b"".join(parts)


def from_bytes(raw: bytes) -> AgentState:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(raw) < _PREFIX.size:
        raise TruncatedError("truncated checkpoint prefix")
    _, version, _, head_len = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise TruncatedError("truncated checkpoint header")
    header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    if len(raw) != start + header["payload_size"]:
        raise TruncatedError(f"payload is {len(raw) - start} bytes, header says {header['payload_size']}")

    arrays = {}
    for b in header["blobs"]:
        arr = np.frombuffer(raw, dtype=np.dtype(b["dtype"]), count=b["nbytes"] // np.dtype(b["dtype"]).itemsize,
                            offset=start + b["offset"])
        arrays[b["name"]] = arr.reshape(b["shape"])

    def params(prefix):
        n = len(header["arch"]) - 1
        return nk.NetParams([arrays[f"{prefix}/W{i}"].astype(np.float32) for i in range(n)],
                            [arrays[f"{prefix}/b{i}"].astype(np.float32) for i in range(n)])

    def task_ids(prefix):
        return sorted({int(name.split("/")[-2]) for name in arrays if name.startswith(prefix + "/")})

    reg = ModelRegistry(params("main"))
    for k in task_ids("temp"):
        reg.temp[k] = params(f"temp/{k}")
    for k in sorted({int(name.split("/")[1]) for name in arrays if name.startswith("mem/")}):
        reg.memories[k] = EpisodicMemory(
            k, arrays[f"mem/{k}/x"].astype(np.float32), arrays[f"mem/{k}/y"].astype(np.int64),
            arrays[f"mem/{k}/h"].astype(np.float32), tuple(header["memory_masks"][str(k)]))
    extras = {}
    for table in header["extras"]:
        extras[table] = {k: params(f"extra/{table}/{k}") for k in task_ids(f"extra/{table}")}
    status = {k: TaskStatus(Instruction(ins), first, ref) for k, ins, first, ref in header["status"]}
    return AgentState(header["master_seed"], header["arch"], header["strategy"], reg,
                      status, extras, header["t"])


def save_checkpoint(state: AgentState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(state))


def load_checkpoint(path) -> AgentState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def blob_names(raw: Union[bytes, str]) -> list[str]:
    """Blob names listed in a checkpoint's header (bytes or a file path)."""
    if isinstance(raw, str):
        with open(raw, "rb") as fh:
            raw = fh.read()
    _, _, _, head_len = _PREFIX.unpack_from(raw)
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
    return [b["name"] for b in header["blobs"]]
