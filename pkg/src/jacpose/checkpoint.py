"""Checkpoint container: a text header followed by little-endian float64 payloads.

Layout::

    jacpose-checkpoint 1
    meta <key> <value>
    tensor <name> <d0,d1,...> <byte offset>
    end
    <raw bytes>

Offsets are relative to the first byte after the ``end`` line. Metadata and
tensors are written in sorted-name order so identical state gives identical
bytes.
"""
import os

import numpy as np

MAGIC = "jacpose-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None):
    meta = meta or {}
    header = [f"{MAGIC} {VERSION}"]
    for key in sorted(meta):
        value = str(meta[key])
        if any(c.isspace() for c in key) or "\n" in value:
            raise CheckpointError(f"metadata {key!r} is not a single-line token")
        header.append(f"meta {key} {value}")
    payload = []
    offset = 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        shape = ",".join(str(n) for n in arr.shape)
        header.append(f"tensor {name} {shape} {offset}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header.append("end")
    with open(os.fspath(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Return ``(tensors, meta)``; metadata values are strings."""
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise CheckpointError(f"{path}: not a version {VERSION} checkpoint")
    data = blob[pos:]
    meta, tensors = {}, {}
    for line in lines[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, shape, offset = rest.split(" ")
            dims = tuple(int(n) for n in shape.split(",")) if shape else ()
            offset = int(offset)
            count = int(np.prod(dims))
            if offset + 8 * count > len(data):
                raise CheckpointError(f"{path}: tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unknown header record {kind!r}")
    return tensors, meta
