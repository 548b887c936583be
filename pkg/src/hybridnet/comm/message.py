"""Message envelope, rank groups and the socket wire format."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np


class CommError(RuntimeError):
    pass


class PeerFailure(CommError):
    """The transport was closed (or a peer died) while an operation waited."""


class CommTimeout(CommError):
    pass


class MessageKind(enum.IntEnum):
    Activation = 0
    PartialError = 1
    GradientContribution = 2
    ControlBarrier = 3


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    tag: int
    src: int
    dst: int
    payload: Optional[np.ndarray] = None

    def key(self) -> tuple[int, int, int, int]:
        return (int(self.kind), self.tag, self.src, self.dst)


class GroupPurpose(enum.Enum):
    AllreducePerPartition = "allreduce-per-partition"
    World = "world"


@dataclass(frozen=True)
class RankGroup:
    members: tuple[int, ...]
    purpose: GroupPurpose = GroupPurpose.AllreducePerPartition

    def __post_init__(self):
        m = tuple(int(r) for r in self.members)
        object.__setattr__(self, "members", m)
        if not m:
            raise ValueError("rank group must not be empty")
        if any(a >= b for a, b in zip(m, m[1:])):
            raise ValueError(f"rank group members must be strictly increasing: {m}")

    def __len__(self) -> int:
        return len(self.members)

    def index(self, rank: int) -> int:
        try:
            return self.members.index(rank)
        except ValueError:
            raise CommError(f"rank {rank} is not a member of group {self.members}") from None

    @classmethod
    def world(cls, size: int) -> "RankGroup":
        return cls(tuple(range(size)), GroupPurpose.World)


# Frame: u32 length of the rest | u8 kind | i64 tag | u32 src | u32 dst |
#        u32 ndim | ndim x u64 dims | payload as big-endian float64.
_HEAD = struct.Struct(">BqIII")
_LEN = struct.Struct(">I")


def encode_frame(msg: Message) -> bytes:
    if msg.payload is None:
        dims: tuple[int, ...] = ()
        body = b""
    else:
        dims = msg.payload.shape
        body = np.ascontiguousarray(msg.payload, dtype=">f8").tobytes()
    head = _HEAD.pack(int(msg.kind), msg.tag, msg.src, msg.dst, len(dims))
    shape = struct.pack(f">{len(dims)}Q", *dims)
    rest = head + shape + body
    return _LEN.pack(len(rest)) + rest


def decode_frame(buf: bytes) -> Message:
    """Inverse of :func:`encode_frame` for one complete frame (length prefix included)."""
    if len(buf) < _LEN.size:
        raise CommError(f"truncated frame: {len(buf)} bytes")
    (length,) = _LEN.unpack_from(buf, 0)
    if len(buf) - _LEN.size != length:
        raise CommError(f"frame length field {length} but {len(buf) - _LEN.size} bytes follow")
    return decode_body(memoryview(buf)[_LEN.size:])


def decode_body(body) -> Message:
    try:
        kind, tag, src, dst, ndim = _HEAD.unpack_from(body, 0)
        off = _HEAD.size
        dims = struct.unpack_from(f">{ndim}Q", body, off)
        kind = MessageKind(kind)
    except (struct.error, ValueError) as e:
        raise CommError(f"malformed frame header: {e}") from None
    off += 8 * ndim
    if ndim == 0:
        if len(body) != off:
            raise CommError("payload bytes present on a frame without shape")
        payload = None
    else:
        count = int(np.prod(dims))
        if len(body) - off != 8 * count:
            raise CommError(f"payload has {len(body) - off} bytes, shape {dims} needs {8 * count}")
        payload = np.frombuffer(body, dtype=">f8", count=count, offset=off).astype(np.float64)
        payload = payload.reshape(dims)
    return Message(kind, tag, src, dst, payload)
