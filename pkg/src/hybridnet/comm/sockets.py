"""Multi-process TCP transport.

Rendezvous: rank 0 listens on the configured ``host:port``. Every other rank
opens its own listener, connects to rank 0 and sends a hello frame carrying
its listening port. Rank 0 answers each with the full address table, after
which rank ``r`` dials every rank ``0 < s < r`` and accepts from ranks above
it, giving one connection per pair.

The per-peer buffer bound is enforced with credits: a receiver acknowledges
every message it matches, and a sender blocks while ``bound`` of its
messages to that peer are unacknowledged.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from typing import Optional

import numpy as np

from .base import Endpoint
from .message import (CommError, CommTimeout, Message, MessageKind, PeerFailure,
                      decode_body, encode_frame)

log = logging.getLogger(__name__)

ACK_TAG = -1
HELLO_TAG = -2
TABLE_TAG = -3
CB = MessageKind.ControlBarrier


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PeerFailure("connection closed by peer")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> Message:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    return decode_body(_recv_exact(sock, length))


def _ip_words(host: str) -> list[float]:
    return [float(b) for b in socket.inet_aton(socket.gethostbyname(host))]


class SocketEndpoint(Endpoint):
    """Endpoint for one OS process in a ``world_size``-rank job."""

    def __init__(self, rank: int, world_size: int, rendezvous: tuple[str, int], *,
                 bound: int = 64, timeout: Optional[float] = None,
                 connect_timeout: float = 30.0):
        super().__init__(rank, world_size)
        if bound < 1:
            raise ValueError("buffer bound must be >= 1")
        self.bound = bound
        self.timeout = timeout
        self._cond = threading.Condition()
        self._inbox: dict[int, list[Message]] = {r: [] for r in range(world_size) if r != rank}
        self._outstanding = {r: 0 for r in self._inbox}
        self._socks: dict[int, socket.socket] = {}
        self._wlocks: dict[int, threading.Lock] = {}
        self._closed = False
        self._dead: dict[int, str] = {}  # peer -> why its connection ended
        self._connect(rendezvous, connect_timeout)
        self._readers = [threading.Thread(target=self._reader, args=(peer, s), daemon=True,
                                          name=f"sock-reader-{rank}<-{peer}")
                         for peer, s in self._socks.items()]
        for t in self._readers:
            t.start()

    # -- setup ----------------------------------------------------------

    def _connect(self, rendezvous: tuple[str, int], connect_timeout: float) -> None:
        host, port = rendezvous
        if self.world_size == 1:
            return
        deadline = time.monotonic() + connect_timeout
        if self.rank == 0:
            lst = socket.create_server((host, port), reuse_port=False)
            lst.settimeout(connect_timeout)
            table = np.zeros((self.world_size, 5))
            table[0] = [*_ip_words(host), port]
            conns = {}
            try:
                while len(conns) < self.world_size - 1:
                    s, addr = lst.accept()
                    hello = read_frame(s)
                    conns[hello.src] = s
                    table[hello.src] = [*_ip_words(addr[0]), hello.payload[0]]
            except socket.timeout:
                raise CommTimeout(f"rendezvous: only {len(conns) + 1} of {self.world_size} "
                                  f"ranks arrived within {connect_timeout}s") from None
            finally:
                lst.close()
            for r, s in conns.items():
                s.sendall(encode_frame(Message(CB, TABLE_TAG, 0, r, table)))
                self._adopt(r, s)
            return

        lst = socket.create_server(("", 0))
        lst.settimeout(connect_timeout)
        my_port = lst.getsockname()[1]
        s0 = self._dial((host, port), deadline)
        s0.sendall(encode_frame(Message(CB, HELLO_TAG, self.rank, 0, np.array([float(my_port)]))))
        table = read_frame(s0).payload
        self._adopt(0, s0)
        for r in range(1, self.rank):
            ip = socket.inet_ntoa(bytes(int(b) for b in table[r, :4]))
            s = self._dial((ip, int(table[r, 4])), deadline)
            s.sendall(encode_frame(Message(CB, HELLO_TAG, self.rank, r, np.array([0.0]))))
            self._adopt(r, s)
        try:
            for _ in range(self.rank + 1, self.world_size):
                s, _addr = lst.accept()
                self._adopt(read_frame(s).src, s)
        except socket.timeout:
            raise CommTimeout(f"rank {self.rank}: peers did not connect within {connect_timeout}s") from None
        finally:
            lst.close()

    @staticmethod
    def _dial(addr, deadline: float) -> socket.socket:
        while True:
            try:
                return socket.create_connection(addr, timeout=5.0)
            except OSError:
                if time.monotonic() > deadline:
                    raise CommTimeout(f"could not reach {addr[0]}:{addr[1]}") from None
                time.sleep(0.05)

    def _adopt(self, peer: int, s: socket.socket) -> None:
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[peer] = s
        self._wlocks[peer] = threading.Lock()

    # -- data path ------------------------------------------------------

    def _reader(self, peer: int, s: socket.socket) -> None:
        try:
            while True:
                msg = read_frame(s)
                with self._cond:
                    if msg.kind == CB and msg.tag == ACK_TAG:
                        self._outstanding[peer] -= 1
                    else:
                        self._inbox[peer].append(msg)
                    self._cond.notify_all()
        except (OSError, CommError) as e:
            # a peer that finished its work also ends here; only waits that
            # still need this peer fail
            with self._cond:
                self._dead[peer] = f"lost connection to rank {peer}: {e}"
                self._cond.notify_all()

    def _write(self, peer: int, msg: Message) -> None:
        data = encode_frame(msg)
        with self._wlocks[peer]:
            try:
                self._socks[peer].sendall(data)
            except OSError as e:
                raise PeerFailure(f"rank {self.rank}: send to {peer} failed: {e}") from None

    def _wait(self, ready, what: str, timeout: Optional[float], peer: int) -> None:
        timeout = self.timeout if timeout is None else timeout
        deadline = None if timeout is None else time.monotonic() + timeout
        while not ready():
            if self._closed:
                raise PeerFailure(f"rank {self.rank}: transport closed while {what}")
            if peer in self._dead:
                raise PeerFailure(f"rank {self.rank}: {self._dead[peer]} while {what}")
            left = None if deadline is None else deadline - time.monotonic()
            if left is not None and left <= 0:
                raise CommTimeout(f"rank {self.rank}: timed out after {timeout}s while {what}")
            self._cond.wait(left)

    def _post(self, msg: Message) -> None:
        with self._cond:
            self._wait(lambda: self._outstanding[msg.dst] < self.bound,
                       f"sending tag {msg.tag} to rank {msg.dst}", None, msg.dst)
            self._outstanding[msg.dst] += 1
        self._write(msg.dst, msg)

    def _take(self, src: int, tag: int, kind: Optional[MessageKind], timeout: Optional[float]) -> Message:
        box = self._inbox[src]
        found: list[Message] = []

        def match() -> bool:
            for i, m in enumerate(box):
                if m.tag == tag and (kind is None or m.kind == kind):
                    found.append(box.pop(i))
                    return True
            return False

        with self._cond:
            self._wait(match, f"receiving tag {tag} from rank {src}", timeout, src)
        try:
            self._write(src, Message(CB, ACK_TAG, self.rank, src))
        except PeerFailure:
            pass  # the sender has finished; nobody is waiting for the credit
        return found[0]

    def close(self) -> None:
        super().close()
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
