"""Length-prefixed binary frames between the host and the secure worker.

Frame: payload length (u32 LE), message type (u8), payload. Tensors are
encoded as ndim (u8), dims (u32 LE each) and float64 LE data in row-major
order, so values cross the boundary bit-exactly.
"""

from __future__ import annotations

import json
import struct
from enum import IntEnum

import numpy as np

HEADER = struct.Struct("<IB")


class Msg(IntEnum):
    FORWARD_ACT = 1
    BACKWARD_GRAD = 2
    LOSS = 3
    STEP_DONE = 4
    SHUTDOWN = 5
    INIT = 6
    READY = 7
    PARAMS = 8
    ERROR = 9


class BoundaryError(RuntimeError):
    """The worker died or the frame sequence went out of sync."""


class Channel:
    """Frame reader/writer over a pair of binary streams; counts bytes both ways."""

    def __init__(self, rfile, wfile):
        self.rfile = rfile
        self.wfile = wfile
        self.sent = 0
        self.received = 0

    def send(self, kind: Msg, payload: bytes = b"") -> None:
        frame = HEADER.pack(len(payload), kind) + payload
        self.wfile.write(frame)
        self.wfile.flush()
        self.sent += len(frame)

    def recv(self, expect: Msg | None = None) -> tuple[Msg, bytes]:
        head = self._read(HEADER.size)
        length, kind = HEADER.unpack(head)
        try:
            kind = Msg(kind)
        except ValueError:
            raise BoundaryError(f"unknown message type {kind}") from None
        payload = self._read(length)
        self.received += HEADER.size + length
        if kind is Msg.ERROR and expect is not Msg.ERROR:
            raise BoundaryError(f"worker error: {payload.decode(errors='replace')}")
        if expect is not None and kind is not expect:
            raise BoundaryError(f"expected {expect.name}, got {kind.name}")
        return kind, payload

    def _read(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.rfile.read(n - len(buf))
            if not chunk:
                raise BoundaryError(f"stream closed after {len(buf)} of {n} bytes")
            buf += chunk
        return buf


def pack_tensor(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    return struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def unpack_tensor(buf: bytes, off: int = 0) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    a = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(dims)
    return a, off + 8 * count


def tensor_size(shape) -> int:
    return 1 + 4 * len(shape) + 8 * int(np.prod(shape))


# -- message bodies -----------------------------------------------------------

def encode_forward(epoch: int, batch: int, labels, acts) -> bytes:
    labels = np.asarray(labels, dtype="<u2")
    return struct.pack("<III", epoch, batch, len(labels)) + labels.tobytes() + pack_tensor(acts)


def decode_forward(buf: bytes):
    epoch, batch, n = struct.unpack_from("<III", buf)
    off = 12
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    acts, _ = unpack_tensor(buf, off + 2 * n)
    return epoch, batch, labels, acts


def encode_json(obj, tensors=()) -> bytes:
    head = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<II", len(head), len(tensors)) + head + b"".join(pack_tensor(t) for t in tensors)


def decode_json(buf: bytes):
    hlen, count = struct.unpack_from("<II", buf)
    obj = json.loads(buf[8:8 + hlen])
    off = 8 + hlen
    tensors = []
    for _ in range(count):
        t, off = unpack_tensor(buf, off)
        tensors.append(t)
    return obj, tensors


def batch_boundary_bytes(batch: int, act_shape, need_grad: bool) -> int:
    """Bytes crossing the boundary for one training batch of ``batch`` examples.

    That is 8 * batch * (cut activation size + 1 loss + cut gradient size)
    plus framing: four frame headers, the epoch/batch/count words, u16
    labels, tensor shape headers and the STEP_DONE counter.
    """
    act = (batch,) + tuple(act_shape)
    forward = HEADER.size + 12 + 2 * batch + tensor_size(act)
    loss = HEADER.size + tensor_size((batch,))
    grad = HEADER.size + (tensor_size(act) if need_grad else tensor_size((0,)))
    done = HEADER.size + 4
    return forward + loss + grad + done
