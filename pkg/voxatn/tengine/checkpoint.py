"""VXM1 checkpoint container.

Layout::

    VXM1
    layers <n>
    <one manifest line per layer>
    params <m>
    <name> <d0>x<d1>x...
    end_header
    then per parameter, in header order: uint64 LE element count, float64 LE data
"""
from __future__ import annotations

import struct
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..errors import CheckpointError

MAGIC = "VXM1"
_LEN = struct.Struct("<Q")


def _shape_text(shape: Tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def write_checkpoint(manifest: Sequence[str], params: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    header = [MAGIC, f"layers {len(manifest)}", *manifest, f"params {len(params)}"]
    header += [f"{name} {_shape_text(arr.shape)}" for name, arr in params]
    header.append("end_header")
    chunks = ["\n".join(header).encode("ascii") + b"\n"]
    for _name, arr in params:
        data = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(_LEN.pack(data.size))
        chunks.append(data.tobytes(order="C"))
    return b"".join(chunks)


def _first_difference(got: Sequence[str], want: Sequence[str]) -> str:
    for i, (g, w) in enumerate(zip(got, want)):
        if g != w:
            return f"line {i + 1}: checkpoint has {g!r}, model expects {w!r}"
    return f"checkpoint has {len(got)} entries, model expects {len(want)}"


def read_checkpoint(
    data: bytes,
    manifest: Sequence[str],
    shapes: Sequence[Tuple[str, Tuple[int, ...]]],
) -> Dict[str, np.ndarray]:
    """Parse a VXM1 blob and validate it against the expected manifest and parameter shapes."""
    lines: List[str] = []
    pos = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated checkpoint header (no end_header)")
        try:
            line = data[pos:end].decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointError(f"non-ASCII checkpoint header at header line {len(lines) + 1}") from None
        pos = end + 1
        if line == "end_header":
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"not a {MAGIC} checkpoint")

    def counted(idx: int, key: str) -> int:
        if idx >= len(lines):
            raise CheckpointError(f"missing '{key}' header line")
        parts = lines[idx].split()
        if len(parts) != 2 or parts[0] != key or not parts[1].isdigit():
            raise CheckpointError(f"malformed '{key}' header line {lines[idx]!r}")
        return int(parts[1])

    n_layers = counted(1, "layers")
    got_manifest = lines[2 : 2 + n_layers]
    if list(got_manifest) != list(manifest):
        raise CheckpointError(f"layer manifest mismatch: {_first_difference(got_manifest, manifest)}")
    n_params = counted(2 + n_layers, "params")
    got_params = lines[3 + n_layers :]
    want_params = [f"{name} {_shape_text(tuple(shape))}" for name, shape in shapes]
    if len(got_params) != n_params or got_params != want_params:
        raise CheckpointError(f"parameter table mismatch: {_first_difference(got_params, want_params)}")

    out: Dict[str, np.ndarray] = {}
    for name, shape in shapes:
        if pos + _LEN.size > len(data):
            raise CheckpointError(f"truncated checkpoint before parameter {name}")
        (count,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        expected = int(np.prod(shape, dtype=np.int64))
        if count != expected:
            raise CheckpointError(f"parameter {name}: stored length {count}, expected {expected}")
        nbytes = count * 8
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated data for parameter {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name} holds non-finite values")
        out[name] = arr
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last parameter")
    return out
