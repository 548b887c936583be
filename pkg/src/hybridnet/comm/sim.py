"""In-process transport: one worker thread per rank, bounded FIFO channels."""

from __future__ import annotations

import threading
import time
from typing import Callable, Optional

import numpy as np

from .base import Endpoint
from .message import CommTimeout, Message, MessageKind, PeerFailure

DEFAULT_BOUND = 64


class _Channel:
    __slots__ = ("cond", "pending")

    def __init__(self):
        self.cond = threading.Condition()
        self.pending: list[Message] = []


class SimNetwork:
    """Channels for every ordered rank pair.

    A channel holds messages that were sent but not yet received. ``send``
    blocks while ``bound`` messages are pending on its channel; ``recv``
    removes the oldest pending message that matches ``(tag, kind)``.
    """

    def __init__(self, world_size: int, bound: int = DEFAULT_BOUND,
                 timeout: Optional[float] = None):
        if bound < 1:
            raise ValueError("buffer bound must be >= 1")
        self.world_size = world_size
        self.bound = bound
        self.timeout = timeout
        self.closed = False
        self.reason = ""
        self._channels = {(s, d): _Channel() for s in range(world_size)
                          for d in range(world_size) if s != d}
        self.endpoints = [SimEndpoint(self, r) for r in range(world_size)]

    def channel(self, src: int, dst: int) -> _Channel:
        return self._channels[(src, dst)]

    def close(self, reason: str = "transport closed") -> None:
        if self.closed:
            return
        self.closed = True
        self.reason = reason
        for ch in self._channels.values():
            with ch.cond:
                ch.cond.notify_all()
        for ep in self.endpoints:
            Endpoint.close(ep)


class SimEndpoint(Endpoint):
    def __init__(self, net: SimNetwork, rank: int):
        super().__init__(rank, net.world_size)
        self.net = net

    def _wait(self, ch: _Channel, ready: Callable[[], bool], what: str, timeout: Optional[float]):
        timeout = self.net.timeout if timeout is None else timeout
        deadline = None if timeout is None else time.monotonic() + timeout
        while not ready():
            if self.net.closed:
                raise PeerFailure(f"rank {self.rank}: {self.net.reason} while {what}")
            if deadline is None:
                ch.cond.wait()
            else:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise CommTimeout(f"rank {self.rank}: timed out after {timeout}s while {what}")
                ch.cond.wait(left)

    def _post(self, msg: Message) -> None:
        if self.net.closed:
            raise PeerFailure(f"rank {self.rank}: {self.net.reason}")
        if msg.payload is not None:
            payload = np.array(msg.payload, dtype=np.float64)
            payload.setflags(write=False)
            msg = Message(msg.kind, msg.tag, msg.src, msg.dst, payload)
        ch = self.net.channel(self.rank, msg.dst)
        with ch.cond:
            self._wait(ch, lambda: len(ch.pending) < self.net.bound,
                       f"sending tag {msg.tag} to rank {msg.dst}", None)
            ch.pending.append(msg)
            ch.cond.notify_all()

    def _take(self, src: int, tag: int, kind: Optional[MessageKind], timeout: Optional[float]) -> Message:
        ch = self.net.channel(src, self.rank)
        found: list[Message] = []

        def match() -> bool:
            for i, m in enumerate(ch.pending):
                if m.tag == tag and (kind is None or m.kind == kind):
                    found.append(ch.pending.pop(i))
                    return True
            return False

        with ch.cond:
            self._wait(ch, match, f"receiving tag {tag} from rank {src}", timeout)
            ch.cond.notify_all()
        return found[0]


def run_ranks(world_size: int, fn: Callable[[SimEndpoint], object], *,
              bound: int = DEFAULT_BOUND, timeout: Optional[float] = None,
              network: Optional[SimNetwork] = None) -> list:
    """Run ``fn(endpoint)`` on one thread per rank and return the results by rank.

    If any rank raises, the network is closed so that blocked peers wake up,
    and the first non-:class:`PeerFailure` error is re-raised.
    """
    net = network or SimNetwork(world_size, bound, timeout)
    results: list = [None] * world_size
    errors: list[Optional[BaseException]] = [None] * world_size

    def worker(rank: int) -> None:
        try:
            results[rank] = fn(net.endpoints[rank])
        except BaseException as e:  # noqa: BLE001 - re-raised below
            errors[rank] = e
            net.close(f"rank {rank} failed: {e!r}")

    threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for ep in net.endpoints:
        Endpoint.close(ep)
    primary = [e for e in errors if e is not None and not isinstance(e, PeerFailure)]
    if primary:
        raise primary[0]
    failed = [e for e in errors if e is not None]
    if failed:
        raise failed[0]
    return results

