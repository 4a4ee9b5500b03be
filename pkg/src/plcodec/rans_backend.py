"""Out-of-process rANS coder backend.

The high-throughput coder lives in a separate executable; this wrapper
speaks a one-shot binary protocol over stdin/stdout, so the boundary is
arrays in, arrays out, with integer status codes. Payload bytes are
backend-specific: a stream produced here can only be decoded here, but
the CDF-table contract (cumulative u32 rows summing to 2^16) is shared
with the in-process range coder, so containers tagged coder_id=2 carry
identical symbols at nearly identical cost.

Request layout (little-endian):
    magic "RNS1", op u8 (1=encode, 2=decode), 3 pad bytes,
    num_rows u32, row_len u32, rows as u32[num_rows*row_len],
    count u32, row_idx u32[count],
    encode: indices u32[count]
    decode: payload_len u32, payload bytes
Response:
    status u8 (0 ok, 1 invalid table, 2 symbol out of range,
    3 corrupt stream, 4 malformed request)
    ok+encode: length u32, payload bytes
    ok+decode: count u32, indices u32[count]
    error: message_len u32, utf-8 message

The executable is located through PLCODEC_RANS_CLI (either a .js file to
run under node, or any executable), falling back to rans-ts/dist/cli.js
next to the working directory or the package checkout.
"""

from __future__ import annotations

import os
import shutil
import struct
import subprocess
from pathlib import Path

import numpy as np

from .rangecoder import (
    CorruptPayloadError,
    InvalidTableError,
    OutOfAlphabetError,
    _as_rows,
)

REQUEST_MAGIC = b"RNS1"
OP_ENCODE = 1
OP_DECODE = 2

STATUS_OK = 0
STATUS_INVALID_TABLE = 1
STATUS_OUT_OF_RANGE = 2
STATUS_CORRUPT = 3
STATUS_BAD_REQUEST = 4


class BackendUnavailableError(RuntimeError):
    """The rANS executable could not be located."""


def find_rans_cli() -> list[str] | None:
    """Resolve the coder executable to an argv prefix, or None."""
    env = os.environ.get("PLCODEC_RANS_CLI")
    if env:
        p = Path(env)
        if p.exists():
            if p.suffix == ".js":
                node = shutil.which("node")
                return [node, str(p)] if node else None
            return [str(p)]
        return None
    candidates = [
        Path.cwd() / "rans-ts" / "dist" / "cli.js",
        Path(__file__).resolve().parents[2] / "rans-ts" / "dist" / "cli.js",
    ]
    node = shutil.which("node")
    if node:
        for c in candidates:
            if c.exists():
                return [node, str(c)]
    return None


def _encode_request(op: int, rows: np.ndarray, row_idx: np.ndarray, tail: bytes) -> bytes:
    head = struct.pack(
        "<4sB3xII", REQUEST_MAGIC, op, rows.shape[0], rows.shape[1]
    )
    parts = [
        head,
        rows.astype("<u4").tobytes(),
        struct.pack("<I", row_idx.shape[0]),
        row_idx.astype("<u4").tobytes(),
        tail,
    ]
    return b"".join(parts)


_STATUS_ERRORS = {
    STATUS_INVALID_TABLE: InvalidTableError,
    STATUS_OUT_OF_RANGE: OutOfAlphabetError,
    STATUS_CORRUPT: CorruptPayloadError,
    STATUS_BAD_REQUEST: ValueError,
}


class RansBackend:
    """Subprocess-backed coder with the container backend interface."""

    coder_id = 2

    def __init__(self, command: list[str] | None = None):
        if command is None:
            command = find_rans_cli()
        if not command:
            raise BackendUnavailableError(
                "rANS coder not found: build rans-ts (npm run build) or set PLCODEC_RANS_CLI"
            )
        self.command = list(command)

    def _run(self, request: bytes) -> bytes:
        proc = subprocess.run(self.command, input=request, capture_output=True)
        if proc.returncode != 0:
            raise RuntimeError(
                f"rANS backend exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}"
            )
        return proc.stdout

    @staticmethod
    def _check(response: bytes) -> bytes:
        if len(response) < 1:
            raise RuntimeError("empty response from rANS backend")
        status = response[0]
        if status == STATUS_OK:
            return response[1:]
        (msg_len,) = struct.unpack_from("<I", response, 1)
        message = response[5 : 5 + msg_len].decode(errors="replace")
        exc = _STATUS_ERRORS.get(status, RuntimeError)
        raise exc(message or f"rANS backend status {status}")

    def encode(self, indices: np.ndarray, rows: np.ndarray, row_idx: np.ndarray) -> bytes:
        rows = _as_rows(rows)
        indices = np.asarray(indices)
        row_idx = np.asarray(row_idx)
        if indices.shape != row_idx.shape:
            raise ValueError("indices and row_idx must align")
        if indices.size and (indices.min() < 0 or indices.max() >= rows.shape[1] - 1):
            raise OutOfAlphabetError("symbol index outside the table alphabet")
        if row_idx.size and (row_idx.min() < 0 or row_idx.max() >= rows.shape[0]):
            raise ValueError("row index out of range")
        tail = indices.astype("<u4").tobytes()
        body = self._check(self._run(_encode_request(OP_ENCODE, rows, row_idx, tail)))
        (n,) = struct.unpack_from("<I", body, 0)
        return body[4 : 4 + n]

    def decode(self, payload: bytes, rows: np.ndarray, row_idx: np.ndarray, count: int) -> np.ndarray:
        rows = _as_rows(rows)
        row_idx = np.asarray(row_idx)
        if row_idx.shape[0] != count:
            raise ValueError("row_idx length must equal count")
        tail = struct.pack("<I", len(payload)) + bytes(payload)
        body = self._check(self._run(_encode_request(OP_DECODE, rows, row_idx, tail)))
        (n,) = struct.unpack_from("<I", body, 0)
        if n != count:
            raise CorruptPayloadError("decoded symbol count disagrees with the request")
        return np.frombuffer(body, dtype="<u4", offset=4, count=n).astype(np.int64)


def load_rans_backend(command: list[str] | None = None) -> RansBackend:
    """Instantiate and register the backend so coder_id=2 containers decode."""
    from .codec import register_coder

    backend = RansBackend(command)
    register_coder(backend)
    return backend
