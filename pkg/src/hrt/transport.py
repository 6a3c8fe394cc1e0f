"""Reliable, ordered byte transports between ranks.

Two implementations: an in-process loopback fabric (tests, single-process
multi-rank runs) and TCP (one process per rank, or in-process endpoint
pairs driven from one thread). Frames are ``(ftype, bytes)`` where ftype 0
is a header message and 1 a data message; TCP adds a
``u32 length + u8 ftype`` prefix on the wire.

``device_aware`` marks a transport whose payloads may be sourced from and
delivered into device allocations directly, selecting the direct-device
protocol instead of host staging.
"""

from __future__ import annotations

import socket
import struct
import time
from abc import ABC, abstractmethod
from collections import deque
from typing import Optional

from .errors import HrtError, TransportClosed

FT_HEADER = 0
FT_DATA = 1

_LEN_STRUCT = struct.Struct("<IB")
_HELLO = struct.Struct("<4sI")
_HELLO_MAGIC = b"HRTC"


class SendReceipt:
    __slots__ = ("done",)

    def __init__(self, done: bool = False):
        self.done = done


class Transport(ABC):
    rank: int
    world_size: int
    device_aware: bool

    @abstractmethod
    def send(self, dst: int, ftype: int, data: bytes) -> SendReceipt: ...

    @abstractmethod
    def poll(self) -> list[tuple[int, int, bytes]]:
        """Drain received frames as (src_rank, ftype, data)."""

    def progress(self) -> int:
        return 0

    def flushed(self) -> bool:
        return True

    def close(self) -> None:
        pass


class LoopbackFabric:
    """Shared mailbox set for all loopback endpoints of one world."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self.queues: dict[tuple[int, int], deque] = {
            (s, d): deque() for s in range(world_size) for d in range(world_size)
        }

    def endpoint(self, rank: int, device_aware: bool = False) -> "LoopbackTransport":
        return LoopbackTransport(self, rank, device_aware)


class LoopbackTransport(Transport):
    def __init__(self, fabric: LoopbackFabric, rank: int, device_aware: bool = False):
        self._fabric = fabric
        self.rank = rank
        self.world_size = fabric.world_size
        self.device_aware = device_aware
        self._closed = False

    def send(self, dst: int, ftype: int, data: bytes) -> SendReceipt:
        if self._closed:
            raise TransportClosed("loopback endpoint is closed")
        if not 0 <= dst < self.world_size:
            raise HrtError(f"unknown target rank {dst}")
        self._fabric.queues[(self.rank, dst)].append((ftype, bytes(data)))
        return SendReceipt(done=True)

    def poll(self) -> list[tuple[int, int, bytes]]:
        out = []
        for src in range(self.world_size):
            q = self._fabric.queues[(src, self.rank)]
            while q:
                ftype, data = q.popleft()
                out.append((src, ftype, data))
        return out

    def close(self) -> None:
        self._closed = True


class TcpTransport(Transport):
    """Non-blocking TCP endpoint; rank r listens on peers[r].

    Connections are established lazily: this endpoint dials every lower
    rank and accepts from every higher rank, so in-process endpoint pairs
    can be brought up from a single thread by alternating ``establish``.
    """

    def __init__(self, rank: int, peers: list[str], device_aware: bool = False):
        self.rank = rank
        self.world_size = len(peers)
        self.device_aware = device_aware
        self._peers = peers
        self._socks: dict[int, socket.socket] = {}
        self._outbuf: dict[int, deque] = {r: deque() for r in range(self.world_size)}
        self._inbuf: dict[int, bytearray] = {}
        self._self_inbox: deque = deque()
        self._pending_accepts: list[tuple[socket.socket, bytearray]] = []
        self._closed = False

        host, port = self._split(peers[rank])
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(self.world_size)
        self._listener.setblocking(False)

    @staticmethod
    def _split(addr: str) -> tuple[str, int]:
        host, port = addr.rsplit(":", 1)
        return host, int(port)

    @property
    def ready(self) -> bool:
        need = set(range(self.world_size)) - {self.rank}
        return need <= set(self._socks)

    def establish(self) -> bool:
        """One non-blocking connection round; returns readiness."""
        for r in range(self.rank):
            if r in self._socks:
                continue
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.settimeout(0.25)
            try:
                s.connect(self._split(self._peers[r]))
            except OSError:
                s.close()
                continue
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.sendall(_HELLO.pack(_HELLO_MAGIC, self.rank))
            s.setblocking(False)
            self._socks[r] = s
            self._inbuf[r] = bytearray()
        while True:
            try:
                s, _ = self._listener.accept()
            except (BlockingIOError, OSError):
                break
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.setblocking(False)
            self._pending_accepts.append((s, bytearray()))
        for item in list(self._pending_accepts):
            s, buf = item
            try:
                chunk = s.recv(_HELLO.size - len(buf))
                if chunk:
                    buf.extend(chunk)
            except BlockingIOError:
                pass
            if len(buf) >= _HELLO.size:
                magic, peer = _HELLO.unpack(bytes(buf[: _HELLO.size]))
                if magic != _HELLO_MAGIC:
                    s.close()
                else:
                    self._socks[peer] = s
                    self._inbuf[peer] = bytearray()
                self._pending_accepts.remove(item)
        return self.ready

    def establish_blocking(self, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        while not self.establish():
            if time.monotonic() > deadline:
                raise HrtError(f"rank {self.rank}: peers did not connect within {timeout}s")
            time.sleep(0.01)

    def send(self, dst: int, ftype: int, data: bytes) -> SendReceipt:
        if self._closed:
            raise TransportClosed("tcp endpoint is closed")
        if not 0 <= dst < self.world_size:
            raise HrtError(f"unknown target rank {dst}")
        receipt = SendReceipt()
        if dst == self.rank:
            self._self_inbox.append((self.rank, ftype, bytes(data)))
            receipt.done = True
            return receipt
        frame = _LEN_STRUCT.pack(len(data) + 1, ftype) + data
        self._outbuf[dst].append([memoryview(frame), 0, receipt])
        self._flush(dst)
        return receipt

    def _flush(self, dst: int) -> int:
        q = self._outbuf[dst]
        sock = self._socks.get(dst)
        sent_any = 0
        if sock is None:
            return 0
        while q:
            view, off, receipt = q[0]
            try:
                n = sock.send(view[off:])
            except BlockingIOError:
                break
            if n == 0:
                break
            sent_any += 1
            off += n
            if off == len(view):
                receipt.done = True
                q.popleft()
            else:
                q[0][1] = off
        return sent_any

    def progress(self) -> int:
        work = 0
        if not self.ready:
            self.establish()
        for dst in self._outbuf:
            if self._outbuf[dst]:
                work += self._flush(dst)
        for src, sock in self._socks.items():
            while True:
                try:
                    chunk = sock.recv(1 << 20)
                except BlockingIOError:
                    break
                except OSError:
                    break
                if not chunk:
                    break
                self._inbuf[src].extend(chunk)
                work += 1
        return work

    def poll(self) -> list[tuple[int, int, bytes]]:
        self.progress()
        out = []
        while self._self_inbox:
            out.append(self._self_inbox.popleft())
        for src in sorted(self._inbuf):
            buf = self._inbuf[src]
            while len(buf) >= _LEN_STRUCT.size:
                length, ftype = _LEN_STRUCT.unpack(bytes(buf[: _LEN_STRUCT.size]))
                body_len = length - 1
                total = _LEN_STRUCT.size + body_len
                if len(buf) < total:
                    break
                data = bytes(buf[_LEN_STRUCT.size : total])
                del buf[:total]
                out.append((src, ftype, data))
        return out

    def flushed(self) -> bool:
        return all(not q for q in self._outbuf.values())

    def close(self) -> None:
        self._closed = True
        for s in self._socks.values():
            try:
                s.close()
            except OSError:
                pass
        self._listener.close()
