"""Transport-independent endpoint: point-to-point contract plus collectives.

Collectives are built only from ``send``/``recv`` so that both transports
share one implementation. Reductions always combine contributions in
ascending member order, which makes every member's result, and every rerun,
bitwise identical.
"""

from __future__ import annotations

import threading
import zlib
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Optional

import numpy as np

from .message import CommError, GroupPurpose, Message, MessageKind, RankGroup

COLLECTIVE_BASE = 1 << 62
_SUB_BITS = 12  # per-call sub-tags (headers, chunks)
_SEQ_BITS = 28

GC = MessageKind.GradientContribution


class Endpoint:
    """One rank's view of the transport.

    Subclasses implement :meth:`_post` and :meth:`_take`; everything else
    (argument checks, tracing, collectives) lives here.
    """

    def __init__(self, rank: int, world_size: int):
        self.rank = rank
        self.world_size = world_size
        self.trace: list[Message] = []
        self.record_payloads = False
        self._seq: dict[tuple[int, ...], int] = {}
        self._seq_lock = threading.Lock()
        self._pool: Optional[ThreadPoolExecutor] = None

    # -- point to point -------------------------------------------------

    def send(self, dst: int, msg: Message) -> None:
        """Post ``msg`` to ``dst``; blocks only while the per-peer buffer is full."""
        self._check_peer(dst)
        if msg.src != self.rank or msg.dst != dst:
            raise CommError(f"envelope {msg.src}->{msg.dst} does not match send {self.rank}->{dst}")
        self._post(msg)

    def recv(self, src: int, tag: int, kind: Optional[MessageKind] = None,
             timeout: Optional[float] = None) -> Message:
        """Block until the message ``(src, tag[, kind])`` arrives and return it."""
        self._check_peer(src)
        msg = self._take(src, tag, kind, timeout)
        if self.record_payloads:
            self.trace.append(msg)
        else:
            self.trace.append(Message(msg.kind, msg.tag, msg.src, msg.dst))
        return msg

    def send_tensor(self, dst: int, kind: MessageKind, tag: int, payload: Optional[np.ndarray]) -> None:
        self.send(dst, Message(kind, tag, self.rank, dst, payload))

    def recv_tensor(self, src: int, kind: MessageKind, tag: int) -> np.ndarray:
        return self.recv(src, tag, kind).payload

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.world_size:
            raise CommError(f"unknown rank {peer} (world size {self.world_size})")
        if peer == self.rank:
            raise CommError(f"rank {self.rank} cannot message itself")

    def _post(self, msg: Message) -> None:
        raise NotImplementedError

    def _take(self, src: int, tag: int, kind: Optional[MessageKind], timeout: Optional[float]) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=False, cancel_futures=True)
            self._pool = None

    # -- collectives ----------------------------------------------------

    def _next_tag(self, group: RankGroup) -> int:
        gid = zlib.crc32(np.asarray(group.members, dtype=np.int64).tobytes()) & 0xFFFF
        if group.purpose is GroupPurpose.World:
            gid ^= 0x8000
        with self._seq_lock:
            seq = self._seq.get(group.members, 0)
            self._seq[group.members] = seq + 1
        seq %= 1 << _SEQ_BITS
        return COLLECTIVE_BASE | (gid << (_SEQ_BITS + _SUB_BITS)) | (seq << _SUB_BITS)

    def barrier(self, group: RankGroup) -> None:
        self.allreduce(group, np.zeros(1))

    def allreduce(self, group: RankGroup, payload: np.ndarray, op: str = "sum") -> np.ndarray:
        """Reduce ``payload`` over ``group``; every member gets the same bits.

        The sum is ``((x[m0] + x[m1]) + x[m2]) + ...`` in ascending member
        order; ``mean`` divides that sum by the group size.

        Raises:
            CommError: if the caller is not a member or shapes differ across
                members (detected before any data moves).
        """
        if op not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {op!r}")
        me = group.index(self.rank)
        p = len(group)
        payload = np.asarray(payload, dtype=np.float64)
        if p == 1:
            out = payload.copy()
        else:
            base = self._next_tag(group)
            self._check_shapes(group, me, payload.shape, base)
            if p == 2:
                out = self._exchange(group, me, payload, base + 1)
            else:
                out = self._ring(group, me, payload, base + 1)
        if op == "mean":
            out = out / p
        return out

    def start_allreduce(self, group: RankGroup, payload: np.ndarray, op: str = "sum") -> Future:
        """Asynchronous :meth:`allreduce`; calls run FIFO on one helper thread per endpoint."""
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"comm-{self.rank}")
        payload = np.array(payload, dtype=np.float64)
        return self._pool.submit(self.allreduce, group, payload, op)

    def broadcast(self, group: RankGroup, root: int, payload: Optional[np.ndarray]) -> np.ndarray:
        """Return ``root``'s payload on every member, passed along the member chain from root."""
        me = group.index(self.rank)
        if root not in group.members:
            raise CommError(f"broadcast root {root} not in group {group.members}")
        p = len(group)
        r = group.index(root)
        if p == 1:
            return np.array(payload, dtype=np.float64)
        tag = self._next_tag(group)
        pos = (me - r) % p
        if pos == 0:
            out = np.array(payload, dtype=np.float64)
        else:
            out = np.array(self.recv_tensor(group.members[(me - 1) % p], GC, tag))
        if pos < p - 1:
            self.send_tensor(group.members[(me + 1) % p], GC, tag, out)
        return out

    def _check_shapes(self, group: RankGroup, me: int, shape: tuple, base: int) -> None:
        """All-gather every member's shape around the ring, then compare."""
        p = len(group)
        right, left = group.members[(me + 1) % p], group.members[(me - 1) % p]
        shapes = {me: tuple(shape)}
        cur = np.array([len(shape), *shape], dtype=np.float64)
        for step in range(p - 1):
            self.send_tensor(right, GC, base, cur)
            cur = self.recv_tensor(left, GC, base)
            shapes[(me - 1 - step) % p] = tuple(int(d) for d in cur[1:])
        distinct = set(shapes.values())
        if len(distinct) > 1:
            detail = ", ".join(f"rank {group.members[i]}: {shapes[i]}" for i in sorted(shapes))
            raise CommError(f"allreduce shape mismatch across group ({detail})")

    def _exchange(self, group: RankGroup, me: int, x: np.ndarray, tag: int) -> np.ndarray:
        other = group.members[1 - me]
        self.send_tensor(other, GC, tag, x)
        y = self.recv_tensor(other, GC, tag)
        return x + y if me == 0 else y + x

    def _ring(self, group: RankGroup, me: int, x: np.ndarray, tag: int) -> np.ndarray:
        """Ring allreduce with every chunk accumulated in member order.

        Reduce phase: each chunk travels m0 -> m1 -> ... -> m(p-1), each hop
        adding its own slice, so the last member ends with the full sums.
        Broadcast phase: the finished chunks travel on around the ring,
        m(p-1) -> m0 -> ... -> m(p-2). The last member finishes receiving
        before it forwards anything, which keeps the two phases from blocking
        each other when the transport buffers a single message.
        """
        p = len(group)
        flat = x.reshape(-1)
        bounds = np.linspace(0, flat.size, min(p, flat.size) + 1).astype(int)
        chunks = list(zip(bounds[:-1], bounds[1:]))
        right, left = group.members[(me + 1) % p], group.members[(me - 1) % p]
        out = np.empty_like(flat)

        for c, (lo, hi) in enumerate(chunks):
            if me == 0:
                self.send_tensor(right, GC, tag + c, flat[lo:hi].copy())
            else:
                partial = self.recv_tensor(left, GC, tag + c) + flat[lo:hi]
                if me < p - 1:
                    self.send_tensor(right, GC, tag + c, partial)
                else:
                    out[lo:hi] = partial

        ctag = tag + len(chunks)
        for c, (lo, hi) in enumerate(chunks):
            if me == p - 1:
                self.send_tensor(right, GC, ctag + c, out[lo:hi].copy())
            else:
                out[lo:hi] = self.recv_tensor(left, GC, ctag + c)
                if me < p - 2:
                    self.send_tensor(right, GC, ctag + c, out[lo:hi].copy())
        return out.reshape(x.shape)


def reduce_in_order(contributions: list[np.ndarray], op: str = "sum") -> np.ndarray:
    """Single-process reference: straight-line sum in list order."""
    acc = np.array(contributions[0], dtype=np.float64)
    for c in contributions[1:]:
        acc = acc + c
    if op == "mean":
        acc = acc / len(contributions)
    return acc
