"""Distributed layer: mobile objects, handler invocation, data transfer.

A mobile object is a globally addressable container for application state;
handlers are invoked on it via ``mp_send`` regardless of locality. Data
objects ride along either through host staging (read the newest bytes to
pinned host memory, then two messages: metadata and data) or, when the
transport is device-aware, sourced from and delivered straight into device
allocations. Messages of at most 512 total bytes collapse into a single
inline message whose payload is copied exactly once, straight from the
object into the outgoing frame.

Every send, put, and get holds an access operation on its object inside
the core runtime's dependency graph, so network transfers never overlap
conflicting tasks and objects stay alive until transmission completes.
"""

from __future__ import annotations

import struct
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .config import default_recv_cache_bytes
from .devices import DeviceAllocation, DeviceType, HostRegion, WallClock
from .errors import DeadlockError, HrtError, NotOwner, ProtocolError, TransportClosed
from .objects import AccessMode, CopyInfo, CopyState, HeteroObject
from .runtime import AccessOp, Runtime
from .transport import FT_DATA, FT_HEADER, SendReceipt, Transport
from .wire import (
    HEADER_SIZE,
    MAX_INLINE_PAYLOAD,
    NO_DEVICE,
    MessageHeader,
    MsgKind,
    decode_header,
    should_inline,
)

NONE_INDEX = 0xFFFFFFFFFFFFFFFF  # header target_index for rank-level / response traffic
_CORR = struct.Struct("<Q")

_DEVICE_TYPE_CODE = {DeviceType.HOST: 0, DeviceType.GPU_SIM: 1}


@dataclass(frozen=True)
class MobileRef:
    owner_rank: int
    local_index: int


@dataclass(frozen=True)
class GlobalObjectId:
    owner_rank: int
    object_id: int


class MobileObject:
    __slots__ = ("index", "state", "device_hint")

    def __init__(self, index: int, state: bytes, device_hint: Optional[int] = None):
        self.index = index
        self.state = bytearray(state)
        self.device_hint = device_hint


class HandlerContext:
    __slots__ = ("comm", "src_rank", "mobile", "arg")

    def __init__(self, comm: "Comm", src_rank: int, mobile: Optional[MobileObject], arg):
        self.comm = comm
        self.src_rank = src_rank
        self.mobile = mobile
        self.arg = arg


@dataclass
class CommStats:
    sends: int = 0
    inline_sends: int = 0
    split_sends: int = 0
    staging_copies: int = 0
    handlers_run: int = 0
    puts: int = 0
    gets: int = 0
    wrapper_reuses: int = 0
    recv_cache_hits: int = 0
    recv_cache_misses: int = 0


class ReceiveCache:
    """Per-device slab pool reserved for incoming message buffers."""

    def __init__(self, runtime: Runtime, capacity: int, slab: int = 1 << 20):
        self.runtime = runtime
        self.capacity = capacity
        self.slab = slab
        self._free: dict[int, list[DeviceAllocation]] = {}
        self._slab_offsets: dict[int, set[int]] = {}

    def _install(self, device_id: int) -> None:
        if device_id in self._free:
            return
        self._free[device_id] = []
        self._slab_offsets[device_id] = set()
        if self.capacity < self.slab:
            return
        try:
            base = self.runtime.registry.pool_alloc(device_id, self.capacity)
        except Exception:
            return
        count = self.capacity // self.slab
        for i in range(count):
            alloc = DeviceAllocation(device_id, base.offset + i * self.slab, self.slab)
            self._free[device_id].append(alloc)
            self._slab_offsets[device_id].add(alloc.offset)

    def acquire(self, device_id: int, nbytes: int) -> Optional[DeviceAllocation]:
        self._install(device_id)
        if nbytes <= self.slab and self._free[device_id]:
            return self._free[device_id].pop()
        return None

    def release(self, alloc: DeviceAllocation) -> None:
        self._free[alloc.device_id].append(alloc)

    def owns(self, alloc: DeviceAllocation) -> bool:
        return alloc.offset in self._slab_offsets.get(alloc.device_id, set())


class _Outgoing:
    __slots__ = ("dst", "ready", "frames", "op", "pinned", "receipts", "label")

    def __init__(self, dst: int, label: str = ""):
        self.dst = dst
        self.ready = False
        self.frames: list[tuple[int, Callable[[], bytes]]] = []
        self.op: Optional[AccessOp] = None
        self.pinned: Optional[HostRegion] = None
        self.receipts: list[SendReceipt] = []
        self.label = label


class _PendingIn:
    __slots__ = ("kind", "hdr", "src", "obj", "op", "device_id", "cache_slab", "data", "mobile")

    def __init__(self, kind: str, hdr: MessageHeader, src: int):
        self.kind = kind
        self.hdr = hdr
        self.src = src
        self.obj: Optional[HeteroObject] = None
        self.op: Optional[AccessOp] = None
        self.device_id: Optional[int] = None
        self.cache_slab = False
        self.data: Optional[bytes] = None
        self.mobile: Optional[MobileObject] = None


class Comm:
    """One rank's endpoint of the distributed runtime."""

    def __init__(
        self,
        transport: Transport,
        runtime: Runtime,
        recv_cache_bytes: Optional[int] = None,
        recv_slab_bytes: int = 1 << 20,
    ):
        self.transport = transport
        self.runtime = runtime
        self.rank = transport.rank
        self.world_size = transport.world_size
        self.stats = CommStats()
        cache_bytes = (
            recv_cache_bytes if recv_cache_bytes is not None else default_recv_cache_bytes()
        )
        self.recv_cache = ReceiveCache(runtime, cache_bytes, recv_slab_bytes)
        runtime._cache_release = self.recv_cache.release

        self._handlers: list[Callable] = []
        self._mobiles: list[MobileObject] = []
        self._outgoing: dict[int, deque] = {}
        self._awaiting_transmit: list[_Outgoing] = []
        self._pending: dict[tuple[int, int], _PendingIn] = {}
        self._pending_gets: dict[int, tuple[HeteroObject, int]] = {}
        self._hq: dict[int, deque] = {}
        self._rr_sources: int = 0
        self._next_corr = 0
        self._peer_ref_counts: dict[int, int] = {}
        self._acks: set[int] = set()
        self._closed = False
        self._recv_rr = 0
        self._exchange_started = False
        self._wrapper_pool: list[HeteroObject] = []
        self._wrapper_uids: set[int] = set()
        runtime.on_destroy.append(self._recycle_wrapper)

        self._h_exchange = self.register_handler(self._handle_exchange)

    # ------------------------------------------------------------------
    # registration / world setup

    def register_handler(self, fn: Callable) -> int:
        """Assign the next handler id; registration order must match on all ranks."""
        self._handlers.append(fn)
        return len(self._handlers) - 1

    def create_mobile_object(self, state: bytes = b"", device_hint: Optional[int] = None) -> MobileRef:
        mobile = MobileObject(len(self._mobiles), state, device_hint)
        self._mobiles.append(mobile)
        return MobileRef(self.rank, mobile.index)

    def mobile(self, ref: MobileRef) -> MobileObject:
        if ref.owner_rank != self.rank:
            raise NotOwner(f"mobile object owned by rank {ref.owner_rank}, not {self.rank}")
        return self._mobiles[ref.local_index]

    def resolve(self, ref: MobileRef) -> bytes:
        return bytes(self.mobile(ref).state)

    def begin_exchange(self) -> None:
        if self._exchange_started:
            return
        self._exchange_started = True
        payload = struct.pack("<I", len(self._mobiles))
        for r in range(self.world_size):
            self._send_raw(r, self._h_exchange, payload)

    def exchange_complete(self) -> bool:
        return len(self._peer_ref_counts) == self.world_size

    def collect_refs(self) -> list[list[MobileRef]]:
        return [
            [MobileRef(r, i) for i in range(self._peer_ref_counts[r])]
            for r in range(self.world_size)
        ]

    def exchange_refs(self) -> list[list[MobileRef]]:
        """Collective: every rank learns every rank's mobile references.

        Blocks until all peers have started their exchange; in-process
        multi-rank worlds should use :func:`exchange_all` instead.
        """
        self.begin_exchange()
        self._drive_until(self.exchange_complete)
        return self.collect_refs()

    def _handle_exchange(self, mobile, arg: bytes, ctx: HandlerContext) -> None:
        (count,) = struct.unpack("<I", arg)
        self._peer_ref_counts[ctx.src_rank] = count

    def global_id(self, obj: HeteroObject) -> GlobalObjectId:
        return GlobalObjectId(self.rank, obj.object_id)

    # ------------------------------------------------------------------
    # sending

    def _corr(self) -> int:
        self._next_corr += 1
        return self._next_corr

    def _check_open(self) -> None:
        if self._closed:
            raise TransportClosed("communication layer is shut down")

    def _check_target(self, rank: int, handler_id: int) -> None:
        if not 0 <= rank < self.world_size:
            raise HrtError(f"unknown target rank {rank}")
        if not 0 <= handler_id < len(self._handlers):
            raise HrtError(f"unknown handler id {handler_id}")

    def _queue_entry(self, entry: _Outgoing) -> None:
        self._outgoing.setdefault(entry.dst, deque()).append(entry)

    def _send_raw(self, dst: int, handler_id: int, payload: bytes, target_index: int = NONE_INDEX) -> None:
        data = bytes(payload)
        hdr = MessageHeader(
            MsgKind.HANDLER,
            handler_id=handler_id,
            target_rank=dst,
            target_index=target_index,
            payload_size=len(data),
            inline_flag=should_inline(len(data)),
            correlation_id=self._corr(),
        )
        entry = _Outgoing(dst, label="handler")
        if hdr.inline_flag:
            entry.frames = [(FT_HEADER, lambda h=hdr, d=data: h.encode() + d)]
            self.stats.inline_sends += 1
        else:
            entry.frames = [
                (FT_HEADER, lambda h=hdr: h.encode()),
                (FT_DATA, lambda h=hdr, d=data: _CORR.pack(h.correlation_id) + d),
            ]
            self.stats.split_sends += 1
        entry.ready = True
        self.stats.sends += 1
        self._queue_entry(entry)

    def mp_send(
        self,
        target: MobileRef,
        handler_id: int,
        payload: Union[bytes, bytearray, memoryview, HeteroObject, None] = None,
    ) -> None:
        """Invoke ``handler_id`` on the target mobile object, optionally
        shipping a byte payload or a data object."""
        self._check_open()
        self._check_target(target.owner_rank, handler_id)
        if payload is None or isinstance(payload, (bytes, bytearray, memoryview)):
            self._send_raw(target.owner_rank, handler_id, bytes(payload or b""), target.local_index)
            return
        self._send_object(target.owner_rank, handler_id, payload, target.local_index)

    def _object_meta(self, obj: HeteroObject) -> tuple[int, tuple[int, int, int]]:
        dims = list(obj.dims) + [0] * (3 - len(obj.dims))
        return obj.element_size, (dims[0], dims[1], dims[2])

    def _send_object(
        self, dst: int, handler_id: int, obj: HeteroObject, target_index: int
    ) -> None:
        obj.check_not_destroyed()
        self.stats.sends += 1
        corr = self._corr()
        element_size, dims = self._object_meta(obj)
        rt = self.runtime

        if self.transport.device_aware:
            # direct path: no staging read; payload leaves straight from the
            # newest copy (device preferred) once access is granted
            entry = _Outgoing(dst, label="hetero_direct")
            self.stats.split_sends += 1

            def granted_direct(r: Runtime, op: AccessOp) -> None:
                r._tick(obj)
                src_dev = obj.valid_devices()
                if src_dev:
                    did = src_dev[0]
                    view = r.registry.device(did).backend.region(
                        obj.copies[did].allocation, obj.total_size
                    )
                    sdt = _DEVICE_TYPE_CODE[r.registry.device(did).descriptor.device_type]
                elif obj.host_state is CopyState.VALID:
                    view = obj.host_region.array[: obj.total_size]
                    sdt = NO_DEVICE
                else:
                    view = np.zeros(obj.total_size, dtype=np.uint8)
                    sdt = NO_DEVICE
                hdr = MessageHeader(
                    MsgKind.HANDLER_HETERO_META,
                    handler_id=handler_id,
                    target_rank=dst,
                    target_index=target_index,
                    payload_size=obj.total_size,
                    inline_flag=False,
                    correlation_id=corr,
                    element_size=element_size,
                    dims=dims,
                    source_device_type=sdt,
                )
                entry.frames = [
                    (FT_HEADER, lambda: hdr.encode()),
                    (FT_DATA, lambda v=view: _CORR.pack(corr) + v.tobytes()),
                ]
                entry.ready = True

            entry.op = rt.register_access(obj, AccessMode.READ, granted_direct, label="send")
            self._queue_entry(entry)
            return

        if should_inline(obj.total_size):
            # single message: header and payload share one pinned buffer and
            # the object bytes are copied exactly once, into its tail
            entry = _Outgoing(dst, label="hetero_inline")
            self.stats.inline_sends += 1
            buf = rt.registry.pinned_pool.alloc(HEADER_SIZE + obj.total_size)
            entry.pinned = buf
            hdr = MessageHeader(
                MsgKind.HANDLER_HETERO_META,
                handler_id=handler_id,
                target_rank=dst,
                target_index=target_index,
                payload_size=obj.total_size,
                inline_flag=True,
                correlation_id=corr,
                element_size=element_size,
                dims=dims,
            )
            buf.array[:HEADER_SIZE] = np.frombuffer(hdr.encode(), dtype=np.uint8)
            tail = HostRegion(
                buf.array[HEADER_SIZE : HEADER_SIZE + obj.total_size],
                obj.total_size,
                offset=None,
                pooled=buf.pooled,
            )

            def granted_inline(r: Runtime, op: AccessOp) -> None:
                r._tick(obj)
                if obj.host_state is CopyState.VALID:
                    src: Union[HostRegion, DeviceAllocation] = obj.host_region
                elif obj.valid_devices():
                    src = obj.copies[obj.valid_devices()[0]].allocation
                    self.stats.staging_copies += 1
                else:
                    tail.array[:] = 0
                    entry.ready = True
                    return
                token = r.registry.enqueue_transfer(src, tail, obj.total_size)
                r._watch(token, lambda tok: setattr(entry, "ready", True))

            entry.frames = [(FT_HEADER, lambda b=buf: b.array.tobytes())]
            entry.op = rt.register_access(obj, AccessMode.READ, granted_inline, label="send")
            self._queue_entry(entry)
            return

        # host-staging two-message path
        entry = _Outgoing(dst, label="hetero_staged")
        self.stats.split_sends += 1
        hdr = MessageHeader(
            MsgKind.HANDLER_HETERO_META,
            handler_id=handler_id,
            target_rank=dst,
            target_index=target_index,
            payload_size=obj.total_size,
            inline_flag=False,
            correlation_id=corr,
            element_size=element_size,
            dims=dims,
        )
        entry.frames = [
            (FT_HEADER, lambda: hdr.encode()),
            (
                FT_DATA,
                lambda: _CORR.pack(corr)
                + self.runtime._ensure_host_region(obj).array[: obj.total_size].tobytes(),
            ),
        ]

        def granted_staged(r: Runtime, op: AccessOp) -> None:
            r._tick(obj)
            if obj.host_state is CopyState.VALID:
                entry.ready = True
                return
            valid = obj.valid_devices()
            region = r._ensure_host_region(obj)
            if not valid:
                region.array[: obj.total_size] = 0
                obj.host_state = CopyState.VALID
                entry.ready = True
                return
            self.stats.staging_copies += 1
            token = r.registry.enqueue_transfer(
                obj.copies[valid[0]].allocation, region, obj.total_size
            )

            def staged(tok) -> None:
                obj.host_state = CopyState.VALID
                entry.ready = True

            r._watch(token, staged)

        entry.op = rt.register_access(obj, AccessMode.READ, granted_staged, label="send")
        self._queue_entry(entry)

    # ------------------------------------------------------------------
    # put / get

    def hetero_put(
        self,
        gid: GlobalObjectId,
        source: Union[HeteroObject, bytes, bytearray, memoryview],
        completion_handler_id: int,
    ) -> None:
        """Overwrite a (possibly remote) object with the source bytes; the
        completion handler fires on the owner."""
        self._check_open()
        self._check_target(gid.owner_rank, completion_handler_id)
        self.stats.puts += 1
        corr = self._corr()
        dst = gid.owner_rank
        if isinstance(source, HeteroObject):
            obj = source
            element_size, dims = self._object_meta(obj)
            hdr = MessageHeader(
                MsgKind.PUT_META,
                handler_id=completion_handler_id,
                target_rank=dst,
                target_index=gid.object_id,
                payload_size=obj.total_size,
                inline_flag=self.transport.device_aware is False and should_inline(obj.total_size),
                correlation_id=corr,
                element_size=element_size,
                dims=dims,
            )
            self._ship_object_payload(hdr, obj)
        else:
            data = bytes(source)
            hdr = MessageHeader(
                MsgKind.PUT_META,
                handler_id=completion_handler_id,
                target_rank=dst,
                target_index=gid.object_id,
                payload_size=len(data),
                inline_flag=should_inline(len(data)),
                correlation_id=corr,
            )
            entry = _Outgoing(dst, label="put_bytes")
            if hdr.inline_flag:
                entry.frames = [(FT_HEADER, lambda: hdr.encode() + data)]
                self.stats.inline_sends += 1
            else:
                entry.frames = [
                    (FT_HEADER, lambda: hdr.encode()),
                    (FT_DATA, lambda: _CORR.pack(corr) + data),
                ]
                self.stats.split_sends += 1
            entry.ready = True
            self._queue_entry(entry)

    def _ship_object_payload(self, hdr: MessageHeader, obj: HeteroObject) -> None:
        """Queue an object-sourced message (PUT_META or get response)."""
        obj.check_not_destroyed()
        rt = self.runtime
        dst = hdr.target_rank
        corr = hdr.correlation_id
        entry = _Outgoing(dst, label="put_obj")

        if self.transport.device_aware:
            self.stats.split_sends += 1

            def granted_direct(r: Runtime, op: AccessOp) -> None:
                r._tick(obj)
                valid = obj.valid_devices()
                if valid:
                    view = r.registry.device(valid[0]).backend.region(
                        obj.copies[valid[0]].allocation, obj.total_size
                    )
                elif obj.host_state is CopyState.VALID:
                    view = obj.host_region.array[: obj.total_size]
                else:
                    view = np.zeros(obj.total_size, dtype=np.uint8)
                entry.frames = [
                    (FT_HEADER, lambda: hdr.encode()),
                    (FT_DATA, lambda v=view: _CORR.pack(corr) + v.tobytes()),
                ]
                entry.ready = True

            entry.op = rt.register_access(obj, AccessMode.READ, granted_direct, label="put")
            self._queue_entry(entry)
            return

        if hdr.inline_flag:
            self.stats.inline_sends += 1
            buf = rt.registry.pinned_pool.alloc(HEADER_SIZE + obj.total_size)
            entry.pinned = buf
            buf.array[:HEADER_SIZE] = np.frombuffer(hdr.encode(), dtype=np.uint8)
            tail = HostRegion(
                buf.array[HEADER_SIZE : HEADER_SIZE + obj.total_size],
                obj.total_size,
                offset=None,
                pooled=buf.pooled,
            )

            def granted_inline(r: Runtime, op: AccessOp) -> None:
                r._tick(obj)
                if obj.host_state is CopyState.VALID:
                    src: Union[HostRegion, DeviceAllocation] = obj.host_region
                elif obj.valid_devices():
                    src = obj.copies[obj.valid_devices()[0]].allocation
                    self.stats.staging_copies += 1
                else:
                    tail.array[:] = 0
                    entry.ready = True
                    return
                token = r.registry.enqueue_transfer(src, tail, obj.total_size)
                r._watch(token, lambda tok: setattr(entry, "ready", True))

            entry.frames = [(FT_HEADER, lambda b=buf: b.array.tobytes())]
            entry.op = rt.register_access(obj, AccessMode.READ, granted_inline, label="put")
            self._queue_entry(entry)
            return

        self.stats.split_sends += 1
        entry.frames = [
            (FT_HEADER, lambda: hdr.encode()),
            (
                FT_DATA,
                lambda: _CORR.pack(corr)
                + self.runtime._ensure_host_region(obj).array[: obj.total_size].tobytes(),
            ),
        ]

        def granted_staged(r: Runtime, op: AccessOp) -> None:
            r._tick(obj)
            if obj.host_state is CopyState.VALID:
                entry.ready = True
                return
            valid = obj.valid_devices()
            region = r._ensure_host_region(obj)
            if not valid:
                region.array[: obj.total_size] = 0
                obj.host_state = CopyState.VALID
                entry.ready = True
                return
            self.stats.staging_copies += 1
            token = r.registry.enqueue_transfer(
                obj.copies[valid[0]].allocation, region, obj.total_size
            )

            def staged(tok) -> None:
                obj.host_state = CopyState.VALID
                entry.ready = True

            r._watch(token, staged)

        entry.op = rt.register_access(obj, AccessMode.READ, granted_staged, label="put")
        self._queue_entry(entry)

    def hetero_get(
        self, gid: GlobalObjectId, destination: HeteroObject, completion_handler_id: int
    ) -> None:
        """Fetch a (possibly remote) object's newest bytes into a local one;
        the completion handler fires here once they land."""
        self._check_open()
        self._check_target(gid.owner_rank, completion_handler_id)
        destination.check_not_destroyed()
        self.stats.gets += 1
        corr = self._corr()
        self._pending_gets[corr] = (destination, completion_handler_id)
        hdr = MessageHeader(
            MsgKind.GET_REQ,
            handler_id=completion_handler_id,
            target_rank=gid.owner_rank,
            target_index=gid.object_id,
            payload_size=destination.total_size,
            inline_flag=False,
            correlation_id=corr,
        )
        entry = _Outgoing(gid.owner_rank, label="get_req")
        entry.frames = [(FT_HEADER, lambda: hdr.encode())]
        entry.ready = True
        self._queue_entry(entry)

    # ------------------------------------------------------------------
    # receive paths

    def _choose_device(self, mobile: Optional[MobileObject]) -> Optional[int]:
        if mobile is not None and mobile.device_hint is not None:
            return mobile.device_hint
        candidates = [
            d
            for d in self.runtime.registry.device_ids
            if self.runtime.registry.device(d).descriptor.device_type is not DeviceType.HOST
        ]
        if not candidates:
            return None
        device = candidates[self._recv_rr % len(candidates)]
        self._recv_rr += 1
        return device

    def _make_wrapper(self, hdr: MessageHeader) -> HeteroObject:
        dims = tuple(d for d in hdr.dims if d > 0)
        if not dims:
            dims = (max(1, hdr.payload_size // max(1, hdr.element_size)),)
        element_size = hdr.element_size if hdr.element_size > 0 else 1
        if self._wrapper_pool:
            obj = self._wrapper_pool.pop()
            obj.__init__(self.runtime.new_uid(), dims, element_size)
            self.stats.wrapper_reuses += 1
        else:
            obj = HeteroObject(self.runtime.new_uid(), dims, element_size)
        self._wrapper_uids.add(obj.object_id)
        self.runtime.adopt_object(obj)
        return obj

    def _recycle_wrapper(self, obj: HeteroObject) -> None:
        if obj.object_id in self._wrapper_uids:
            self._wrapper_uids.discard(obj.object_id)
            if len(self._wrapper_pool) < 64:
                self._wrapper_pool.append(obj)

    def _alloc_for_receive(
        self, device_id: int, nbytes: int
    ) -> tuple[Optional[DeviceAllocation], bool]:
        slab = self.recv_cache.acquire(device_id, nbytes)
        if slab is not None:
            self.stats.recv_cache_hits += 1
            return slab, True
        self.stats.recv_cache_misses += 1
        try:
            return self.runtime._alloc_with_evict(device_id, nbytes), False
        except Exception:
            return None, False  # fall back to host residence

    def _on_header(self, src: int, data: bytes) -> None:
        hdr = decode_header(data)
        inline_payload = (
            data[HEADER_SIZE : HEADER_SIZE + hdr.payload_size] if hdr.inline_flag else None
        )
        kind = hdr.msg_kind
        if kind is MsgKind.HANDLER:
            mobile = self._mobiles[hdr.target_index] if hdr.target_index != NONE_INDEX else None
            if hdr.inline_flag:
                self._enqueue_handler(src, hdr.handler_id, mobile, bytes(inline_payload))
            else:
                rec = _PendingIn("handler_data", hdr, src)
                rec.mobile = mobile
                self._pending[(src, hdr.correlation_id)] = rec
        elif kind is MsgKind.HANDLER_HETERO_META:
            self._on_hetero_meta(src, hdr, inline_payload)
        elif kind is MsgKind.PUT_META:
            self._on_put_meta(src, hdr, inline_payload)
        elif kind is MsgKind.GET_REQ:
            self._on_get_req(src, hdr)
        elif kind is MsgKind.ACK:
            self._acks.add(src)

    def _on_hetero_meta(self, src: int, hdr: MessageHeader, inline_payload: Optional[bytes]) -> None:
        mobile = self._mobiles[hdr.target_index] if hdr.target_index != NONE_INDEX else None
        wrapper = self._make_wrapper(hdr)
        rec = _PendingIn("hetero", hdr, src)
        rec.obj = wrapper
        rec.mobile = mobile
        direct = self.transport.device_aware
        device = self._choose_device(mobile)
        if direct and device is not None:
            alloc, from_cache = self._alloc_for_receive(device, wrapper.total_size)
            if alloc is not None:
                wrapper.copies[device] = CopyInfo(alloc, CopyState.ABSENT, cache_slab=from_cache)
                rec.device_id = device
                rec.cache_slab = from_cache
        elif not direct:
            rec.device_id = device  # upload target after the host receive

        def granted(r: Runtime, op: AccessOp) -> None:
            self._maybe_apply(rec)

        rec.op = self.runtime.register_access(wrapper, AccessMode.WRITE, granted, label="recv")
        self._pending[(src, hdr.correlation_id)] = rec
        if direct:
            # handler may run before the payload lands; tasks on the wrapper
            # stay ordered behind the receive op
            self._enqueue_handler(src, hdr.handler_id, mobile, wrapper)
        if inline_payload is not None:
            rec.data = bytes(inline_payload)
            self._maybe_apply(rec)

    def _on_put_meta(self, src: int, hdr: MessageHeader, inline_payload: Optional[bytes]) -> None:
        if hdr.target_index == NONE_INDEX:  # get response addressed by correlation id
            dest, handler_id = self._pending_gets.pop(hdr.correlation_id)
            rec = _PendingIn("get_resp", hdr, src)
            rec.obj = dest
        else:
            obj = self.runtime._objects.get(hdr.target_index)
            if obj is None:
                raise ProtocolError(f"put targets unknown object {hdr.target_index}")
            if hdr.payload_size != obj.total_size:
                raise ProtocolError(
                    f"put size mismatch: payload {hdr.payload_size} B vs object {obj.total_size} B"
                )
            rec = _PendingIn("put", hdr, src)
            rec.obj = obj

        def granted(r: Runtime, op: AccessOp) -> None:
            self._maybe_apply(rec)

        rec.op = self.runtime.register_access(rec.obj, AccessMode.WRITE, granted, label="put_recv")
        self._pending[(src, hdr.correlation_id)] = rec
        if inline_payload is not None:
            rec.data = bytes(inline_payload)
            self._maybe_apply(rec)

    def _on_get_req(self, src: int, hdr: MessageHeader) -> None:
        obj = self.runtime._objects.get(hdr.target_index)
        if obj is None:
            raise ProtocolError(f"get targets unknown object {hdr.target_index}")
        if hdr.payload_size != obj.total_size:
            raise ProtocolError(
                f"get size mismatch: destination {hdr.payload_size} B vs object {obj.total_size} B"
            )
        element_size, dims = self._object_meta(obj)
        resp = MessageHeader(
            MsgKind.PUT_META,
            handler_id=hdr.handler_id,
            target_rank=src,
            target_index=NONE_INDEX,
            payload_size=obj.total_size,
            inline_flag=(not self.transport.device_aware) and should_inline(obj.total_size),
            correlation_id=hdr.correlation_id,
            element_size=element_size,
            dims=dims,
        )
        self._ship_object_payload(resp, obj)

    def _on_data(self, src: int, data: bytes) -> None:
        (corr,) = _CORR.unpack(data[:8])
        key = (src, corr)
        rec = self._pending.get(key)
        if rec is None:
            raise ProtocolError(f"data message with unmatched correlation id {corr} from {src}")
        payload = data[8:]
        if len(payload) != rec.hdr.payload_size:
            raise ProtocolError(
                f"data size {len(payload)} does not match header {rec.hdr.payload_size}"
            )
        if rec.kind == "handler_data":
            del self._pending[key]
            self._enqueue_handler(src, rec.hdr.handler_id, rec.mobile, payload)
            return
        rec.data = payload
        self._maybe_apply(rec)

    def _maybe_apply(self, rec: _PendingIn) -> None:
        if rec.op is None or not rec.op.granted or rec.data is None:
            return
        key = (rec.src, rec.hdr.correlation_id)
        self._pending.pop(key, None)
        if rec.kind == "hetero":
            self._apply_hetero(rec)
        elif rec.kind in ("put", "get_resp"):
            self._apply_put(rec)

    def _apply_hetero(self, rec: _PendingIn) -> None:
        obj = rec.obj
        rt = self.runtime
        rt._tick(obj)
        if rec.device_id is not None and obj.copies.get(rec.device_id) is not None:
            # direct path: bytes land straight in device memory
            ci = obj.copies[rec.device_id]
            rt.registry.device(rec.device_id).backend.region(ci.allocation, obj.total_size)[
                :
            ] = np.frombuffer(rec.data, dtype=np.uint8)
            ci.state = CopyState.VALID
            obj.written = True
            rt.complete_access(rec.op)
            return
        region = rt._ensure_host_region(obj)
        region.array[: obj.total_size] = np.frombuffer(rec.data, dtype=np.uint8)
        obj.host_state = CopyState.VALID
        obj.written = True
        device = rec.device_id
        if device is not None:
            alloc, from_cache = self._alloc_for_receive(device, obj.total_size)
            if alloc is not None:
                ci = CopyInfo(alloc, CopyState.ABSENT, cache_slab=from_cache)
                obj.copies[device] = ci
                self.stats.staging_copies += 1
                token = rt.registry.enqueue_transfer(region, alloc, obj.total_size)

                def uploaded(tok, ci=ci, op=rec.op) -> None:
                    ci.state = CopyState.VALID
                    rt.complete_access(op)

                rt._watch(token, uploaded)
                self._enqueue_handler(rec.src, rec.hdr.handler_id, rec.mobile, obj)
                return
        rt.complete_access(rec.op)
        self._enqueue_handler(rec.src, rec.hdr.handler_id, rec.mobile, obj)

    def _apply_put(self, rec: _PendingIn) -> None:
        obj = rec.obj
        rt = self.runtime
        rt._tick(obj)
        payload = np.frombuffer(rec.data, dtype=np.uint8)
        target_device: Optional[int] = None
        if self.transport.device_aware:
            allocated = [d for d, ci in sorted(obj.copies.items()) if ci.allocation is not None]
            valid = [d for d in allocated if obj.copies[d].state is CopyState.VALID]
            if valid:
                target_device = valid[0]
            elif allocated:
                target_device = allocated[0]
        if target_device is not None:
            ci = obj.copies[target_device]
            rt.registry.device(target_device).backend.region(ci.allocation, obj.total_size)[
                :
            ] = payload
            for did, other in obj.copies.items():
                other.state = CopyState.VALID if did == target_device else CopyState.STALE
            if obj.host_region is not None:
                obj.host_state = CopyState.STALE
        else:
            region = rt._ensure_host_region(obj)
            region.array[: obj.total_size] = payload
            obj.host_state = CopyState.VALID
            for other in obj.copies.values():
                if other.state is CopyState.VALID:
                    other.state = CopyState.STALE
        obj.written = True
        rt.complete_access(rec.op)
        self._enqueue_handler(rec.src, rec.hdr.handler_id, None, obj)

    # ------------------------------------------------------------------
    # handler execution

    def _enqueue_handler(self, src: int, handler_id: int, mobile, arg) -> None:
        self._hq.setdefault(src, deque()).append((handler_id, mobile, arg))

    def _run_handlers(self) -> int:
        ran = 0
        sources = sorted(self._hq)
        if not sources:
            return 0
        start = self._rr_sources % len(sources)
        order = sources[start:] + sources[:start]
        budget = {s: len(self._hq[s]) for s in order}
        progressed = True
        while progressed:
            progressed = False
            for s in order:
                q = self._hq.get(s)
                if q and budget[s] > 0:
                    handler_id, mobile, arg = q.popleft()
                    budget[s] -= 1
                    self._handlers[handler_id](mobile, arg, HandlerContext(self, s, mobile, arg))
                    self.stats.handlers_run += 1
                    ran += 1
                    progressed = True
        self._rr_sources += 1
        for s in list(self._hq):
            if not self._hq[s]:
                del self._hq[s]
        return ran

    # ------------------------------------------------------------------
    # progress / lifecycle

    def network_progress(self) -> int:
        """Pump outgoing entries whose access futures completed, receive and
        dispatch incoming messages, and run pending handlers."""
        work = 0
        for dst in sorted(self._outgoing):
            q = self._outgoing[dst]
            while q and q[0].ready:
                entry = q.popleft()
                entry.receipts = [
                    self.transport.send(entry.dst, ftype, build()) for ftype, build in entry.frames
                ]
                self._awaiting_transmit.append(entry)
                work += 1
        work += self.transport.progress()
        for src, ftype, data in self.transport.poll():
            if ftype == FT_HEADER:
                self._on_header(src, data)
            else:
                self._on_data(src, data)
            work += 1
        if self._awaiting_transmit:
            still: list[_Outgoing] = []
            for entry in self._awaiting_transmit:
                if all(r.done for r in entry.receipts):
                    self.runtime.tracer.emit("transmit_complete", label=entry.label, dst=entry.dst)
                    if entry.op is not None:
                        self.runtime.complete_access(entry.op)
                    if entry.pinned is not None:
                        self.runtime.registry.pinned_pool.free(entry.pinned)
                    work += 1
                else:
                    still.append(entry)
            self._awaiting_transmit = still
        work += self._run_handlers()
        return work

    def progress(self, advance: bool = True) -> int:
        work = self.runtime.progress(advance=False)
        work += self.network_progress()
        if work == 0 and advance:
            if self.runtime.clock.advance_one() is not None:
                work += 1
        return work

    def _drive_until(self, predicate: Callable[[], bool], timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        while not predicate():
            if self.progress() == 0:
                if isinstance(self.runtime.clock, WallClock):
                    if time.monotonic() > deadline:
                        raise DeadlockError("timed out waiting for network condition")
                    time.sleep(0.0002)
                else:
                    raise DeadlockError("no progress possible while waiting on the network")

    def flush(self, timeout: float = 60.0) -> None:
        self._drive_until(
            lambda: not self._outgoing_pending() and self.transport.flushed(), timeout
        )

    def _outgoing_pending(self) -> bool:
        return any(q for q in self._outgoing.values()) or bool(self._awaiting_transmit)

    @property
    def quiescent(self) -> bool:
        return (
            not self._outgoing_pending()
            and self.transport.flushed()
            and not self._hq
            and not self._pending
        )

    def shutdown(self, barrier: Optional[bool] = None, timeout: float = 60.0) -> None:
        """Flush outgoing traffic and drain handlers, then close.

        With ``barrier`` (default for TCP), exchanges ACKs so no peer closes
        while others still expect traffic.
        """
        if self._closed:
            return
        self.flush(timeout)
        from .transport import LoopbackTransport

        if barrier is None:
            barrier = not isinstance(self.transport, LoopbackTransport)
        if barrier and self.world_size > 1:
            hdr = MessageHeader(MsgKind.ACK, target_rank=self.rank, correlation_id=self._corr())
            for r in range(self.world_size):
                if r != self.rank:
                    self.transport.send(r, FT_HEADER, hdr.encode())
            self._drive_until(
                lambda: self._acks >= (set(range(self.world_size)) - {self.rank}), timeout
            )
        self._closed = True
        self.transport.close()


def drive(comms: list[Comm], until: Callable[[], bool], timeout: float = 120.0) -> None:
    """Advance several in-process ranks together until a condition holds.

    Zero-time work on every rank runs before shared virtual time moves, so
    multi-rank virtual timings are deterministic.
    """
    clock = comms[0].runtime.clock
    wall = isinstance(clock, WallClock)
    deadline = time.monotonic() + timeout
    while not until():
        work = 0
        for c in comms:
            work += c.progress(advance=False)
        if work:
            continue
        if clock.advance_one() is not None:
            continue
        if wall:
            if time.monotonic() > deadline:
                raise DeadlockError("drive timed out")
            time.sleep(0.0002)
        else:
            raise DeadlockError("no progress possible across ranks")


def init_from_env(runtime: Runtime, recv_cache_bytes: Optional[int] = None) -> Comm:
    """Build this process' endpoint from HRT_* environment variables.

    ``HRT_TRANSPORT=tcp`` with ``HRT_RANK`` and ``HRT_PEERS`` (host:port,
    one per rank) joins a multi-process world; the default is a
    single-rank loopback. ``HRT_DEVICE_AWARE=1`` selects the direct-device
    protocol.
    """
    import os

    from .config import env_bool
    from .transport import LoopbackFabric, TcpTransport

    device_aware = env_bool("HRT_DEVICE_AWARE")
    kind = os.environ.get("HRT_TRANSPORT", "loopback")
    if kind == "tcp":
        rank = int(os.environ["HRT_RANK"])
        peers = [p.strip() for p in os.environ["HRT_PEERS"].split(",") if p.strip()]
        # connections come up lazily during network progress, so endpoints
        # may be created in any order (including within one process)
        transport = TcpTransport(rank, peers, device_aware=device_aware)
    else:
        ranks = int(os.environ.get("HRT_RANKS", "1"))
        if ranks != 1:
            raise HrtError(
                "in-process loopback worlds with several ranks are built explicitly "
                "from one LoopbackFabric; HRT_TRANSPORT=loopback supports one rank here"
            )
        transport = LoopbackFabric(1).endpoint(0, device_aware=device_aware)
    return Comm(transport, runtime, recv_cache_bytes=recv_cache_bytes)


def exchange_all(comms: list[Comm]) -> list[list[MobileRef]]:
    """Run the reference exchange across in-process ranks."""
    for c in comms:
        c.begin_exchange()
    drive(comms, until=lambda: all(c.exchange_complete() for c in comms))
    return comms[0].collect_refs()


def shutdown_all(comms: list[Comm], timeout: float = 60.0) -> None:
    drive(comms, until=lambda: all(c.quiescent for c in comms), timeout=timeout)
    for c in comms:
        c.shutdown(barrier=False, timeout=timeout)
