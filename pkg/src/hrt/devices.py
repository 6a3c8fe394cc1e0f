"""Uniform device layer: pooled memory, streams, and async completion tokens.

Two concrete backends are provided, a host CPU backend and a simulated
accelerator backend. Both execute kernel bodies as real host functions on
real bytes, so numerical results are always genuine; only timing and
queueing differ. Under a virtual clock every enqueue computes a
deterministic completion time (``max(stream_free, now) + duration``) and
polling drives a global event queue, which makes overlap and makespan
assertions exact and repeatable. Under a wall clock operations execute
synchronously at enqueue.
"""

from __future__ import annotations

import heapq
import time
from abc import ABC
from bisect import insort
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Union

import numpy as np

from .config import default_compute_streams, default_pinned_pool_bytes
from .errors import (
    DoubleFree,
    HrtError,
    InvalidLocation,
    OutOfDeviceMemory,
    UnknownToken,
)
from .trace import NullTracer, Tracer

ALIGNMENT = 256


class DeviceType(Enum):
    HOST = "host"
    GPU_SIM = "gpu_sim"


class ClockMode(Enum):
    WALL = "wall"
    VIRTUAL = "virtual"


class TokenKind(Enum):
    TRANSFER = "transfer"
    KERNEL = "kernel"


class TokenStatus(Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    FAILED = "failed"


@dataclass
class DeviceDescriptor:
    device_id: int
    device_type: DeviceType
    memory_capacity: int
    compute_stream_count: int = field(default_factory=default_compute_streams)
    transfer_stream_count: int = 2
    transfer_latency: float = 0.0
    transfer_bandwidth: float = float("inf")
    clock_mode: ClockMode = ClockMode.VIRTUAL

    def validate(self) -> None:
        if self.device_id < 0:
            raise HrtError(f"device_id must be >= 0, got {self.device_id}")
        if self.memory_capacity <= 0:
            raise HrtError("memory_capacity must be positive")
        if self.compute_stream_count < 1:
            raise HrtError("compute_stream_count must be >= 1")
        if self.transfer_stream_count != 2:
            raise HrtError("transfer_stream_count is fixed at 2 (one per direction)")


@dataclass(frozen=True)
class DeviceAllocation:
    device_id: int
    offset: int
    size: int
    alignment: int = ALIGNMENT


class FreeListAllocator:
    """First-fit allocator over an address-ordered free list with coalescing.

    Sizes are rounded up to the alignment so every granted offset stays
    aligned. Live plus free bytes always equal the capacity.
    """

    def __init__(self, capacity: int, alignment: int = ALIGNMENT):
        if capacity <= 0:
            raise HrtError("allocator capacity must be positive")
        self.capacity = capacity
        self.alignment = alignment
        self._free: list[list[int]] = [[0, capacity]]  # [offset, size], address order
        self._live: dict[int, int] = {}

    def _round(self, size: int) -> int:
        a = self.alignment
        return ((size + a - 1) // a) * a

    def alloc(self, size: int) -> tuple[int, int]:
        if size <= 0:
            raise HrtError(f"allocation size must be positive, got {size}")
        need = self._round(size)
        for block in self._free:
            off, avail = block
            if avail >= need:
                if avail == need:
                    self._free.remove(block)
                else:
                    block[0] = off + need
                    block[1] = avail - need
                self._live[off] = need
                return off, need
        raise OutOfDeviceMemory(f"no free block fits {need} bytes")

    def free(self, offset: int) -> int:
        size = self._live.pop(offset, None)
        if size is None:
            raise DoubleFree(f"offset {offset} is not a live allocation")
        insort(self._free, [offset, size])
        idx = self._free.index([offset, size])
        # merge with successor, then predecessor
        if idx + 1 < len(self._free) and offset + size == self._free[idx + 1][0]:
            self._free[idx][1] += self._free[idx + 1][1]
            del self._free[idx + 1]
        if idx > 0 and self._free[idx - 1][0] + self._free[idx - 1][1] == offset:
            self._free[idx - 1][1] += self._free[idx][1]
            del self._free[idx]
        return size

    @property
    def live_bytes(self) -> int:
        return sum(self._live.values())

    @property
    def free_bytes(self) -> int:
        return sum(s for _, s in self._free)

    def check(self) -> None:
        assert self.live_bytes + self.free_bytes == self.capacity
        spans = sorted(
            [(o, o + s) for o, s in self._live.items()]
            + [(o, o + s) for o, s in self._free]
        )
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert a1 <= b0, f"overlapping regions {(a0, a1)} and {(b0, b1)}"


@dataclass
class HostRegion:
    """A host-memory window; ``pooled`` means it came from the pinned pool."""

    array: np.ndarray
    nbytes: int
    offset: Optional[int] = None
    pooled: bool = False


class HostPinnedPool:
    """Staging pool standing in for page-locked host memory.

    Allocated once at construction. Exhaustion falls back to an ordinary
    host buffer and bumps the observable ``misses`` counter, as does any
    transfer whose host side is not pool-backed.
    """

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity if capacity is not None else default_pinned_pool_bytes()
        self.arena = np.zeros(self.capacity, dtype=np.uint8)
        self._alloc = FreeListAllocator(self.capacity)
        self.misses = 0

    def alloc(self, nbytes: int) -> HostRegion:
        try:
            off, _ = self._alloc.alloc(nbytes)
        except OutOfDeviceMemory:
            self.misses += 1
            return HostRegion(np.zeros(nbytes, dtype=np.uint8), nbytes, None, False)
        return HostRegion(self.arena[off : off + nbytes], nbytes, off, True)

    def free(self, region: HostRegion) -> None:
        if region.pooled and region.offset is not None:
            self._alloc.free(region.offset)
            region.offset = None
            region.pooled = False

    def note_unpinned_use(self) -> None:
        self.misses += 1


class CompletionToken:
    """Handle for one asynchronous device operation.

    Status moves PENDING -> {COMPLETE, FAILED} exactly once, at the
    operation's (virtual) end time.
    """

    __slots__ = ("token_id", "kind", "status", "end_time", "error", "device_id", "_final")

    def __init__(self, token_id: int, kind: TokenKind, device_id: int):
        self.token_id = token_id
        self.kind = kind
        self.device_id = device_id
        self.status = TokenStatus.PENDING
        self.end_time = 0.0
        self.error: Optional[BaseException] = None
        self._final = TokenStatus.COMPLETE

    def _fire(self) -> None:
        if self.status is TokenStatus.PENDING:
            self.status = self._final

    def __repr__(self) -> str:
        return f"<token {self.token_id} {self.kind.value} {self.status.value}>"


class VirtualClock:
    """Discrete-event time base shared by every device in a run.

    Events fire in nondecreasing time order; ties resolve in enqueue
    order. Time only moves when an event is consumed.
    """

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, CompletionToken]] = []
        self._seq = 0

    def schedule(self, token: CompletionToken, end_time: float) -> None:
        self._seq += 1
        token.end_time = end_time
        heapq.heappush(self._heap, (end_time, self._seq, token))

    def advance_one(self) -> Optional[CompletionToken]:
        if not self._heap:
            return None
        end_time, _, token = heapq.heappop(self._heap)
        self.now = max(self.now, end_time)
        token._fire()
        return token

    @property
    def pending_events(self) -> int:
        return len(self._heap)


class WallClock:
    """Wall-time stand-in with the same surface; operations complete eagerly."""

    def __init__(self) -> None:
        self._t0 = time.perf_counter()

    @property
    def now(self) -> float:
        return time.perf_counter() - self._t0

    def schedule(self, token: CompletionToken, end_time: float) -> None:
        token.end_time = end_time
        token._fire()

    def advance_one(self) -> Optional[CompletionToken]:
        return None

    @property
    def pending_events(self) -> int:
        return 0


class Stream:
    __slots__ = ("name", "free_time")

    def __init__(self, name: str):
        self.name = name
        self.free_time = 0.0


class DeviceBackend(ABC):
    """Storage and execution substrate for one device.

    Backends own the device arena bytes and run kernel bodies. Both
    concrete backends execute on the host so results are real; the
    accelerator backend differs only in which kernel entry point the
    registry resolves and in simulated transfer timing.
    """

    device_type: DeviceType

    def __init__(self) -> None:
        self.arena: Optional[np.ndarray] = None

    def attach(self, descriptor: DeviceDescriptor) -> None:
        self.arena = np.zeros(descriptor.memory_capacity, dtype=np.uint8)

    def region(self, alloc: DeviceAllocation, nbytes: Optional[int] = None) -> np.ndarray:
        assert self.arena is not None
        n = alloc.size if nbytes is None else nbytes
        return self.arena[alloc.offset : alloc.offset + n]

    def run_kernel(self, body: Callable, views: list, geometry, scratch) -> None:
        body(views, geometry, scratch)


class HostBackend(DeviceBackend):
    device_type = DeviceType.HOST


class GpuSimBackend(DeviceBackend):
    device_type = DeviceType.GPU_SIM


Location = Union[DeviceAllocation, HostRegion, np.ndarray]


class _Device:
    def __init__(self, descriptor: DeviceDescriptor, backend: DeviceBackend):
        self.descriptor = descriptor
        self.backend = backend
        self.allocator = FreeListAllocator(descriptor.memory_capacity)
        self.compute_streams = [Stream(f"c{i}") for i in range(descriptor.compute_stream_count)]
        self.h2d = Stream("h2d")
        self.d2h = Stream("d2h")

    @property
    def device_id(self) -> int:
        return self.descriptor.device_id


class DeviceRegistry:
    """Owner of all devices, the pinned pool, the clock, and the token table."""

    def __init__(
        self,
        clock_mode: ClockMode = ClockMode.VIRTUAL,
        pinned_pool_bytes: Optional[int] = None,
        shared_host_bus: bool = False,
        tracer: Optional[Tracer] = None,
        clock: Optional[Union[VirtualClock, WallClock]] = None,
    ):
        self.clock_mode = clock_mode
        if clock is not None:
            self.clock = clock
        else:
            self.clock = VirtualClock() if clock_mode is ClockMode.VIRTUAL else WallClock()
        self.pinned_pool = HostPinnedPool(pinned_pool_bytes)
        self.tracer = tracer if tracer is not None else NullTracer()
        self.shared_host_bus = shared_host_bus
        self._bus_h2d = Stream("bus_h2d")
        self._bus_d2h = Stream("bus_d2h")
        self._devices: dict[int, _Device] = {}
        self._tokens: dict[int, CompletionToken] = {}
        self._next_token = 0

    # ------------------------------------------------------------------
    # registration / lookup

    def register_device(
        self, descriptor: DeviceDescriptor, backend: Optional[DeviceBackend] = None
    ) -> int:
        descriptor.validate()
        if descriptor.device_id in self._devices:
            raise HrtError(f"device id {descriptor.device_id} already registered")
        if descriptor.clock_mode is not self.clock_mode:
            raise HrtError("device clock mode must match the registry clock mode")
        if backend is None:
            backend = (
                HostBackend() if descriptor.device_type is DeviceType.HOST else GpuSimBackend()
            )
        if backend.device_type is not descriptor.device_type:
            raise HrtError("backend type does not match descriptor type")
        backend.attach(descriptor)
        self._devices[descriptor.device_id] = _Device(descriptor, backend)
        return descriptor.device_id

    def device(self, device_id: int) -> _Device:
        dev = self._devices.get(device_id)
        if dev is None:
            raise HrtError(f"unknown device {device_id}")
        return dev

    @property
    def device_ids(self) -> list[int]:
        return list(self._devices)

    def devices_of_type(self, device_type: DeviceType) -> list[int]:
        return [d.device_id for d in self._devices.values() if d.descriptor.device_type is device_type]

    # ------------------------------------------------------------------
    # memory pool

    def pool_alloc(self, device_id: int, size: int) -> DeviceAllocation:
        dev = self.device(device_id)
        offset, granted = dev.allocator.alloc(size)
        return DeviceAllocation(device_id, offset, granted)

    def pool_free(self, alloc: DeviceAllocation) -> None:
        self.device(alloc.device_id).allocator.free(alloc.offset)

    def free_bytes(self, device_id: int) -> int:
        return self.device(device_id).allocator.free_bytes

    # ------------------------------------------------------------------
    # async operations

    def _new_token(self, kind: TokenKind, device_id: int) -> CompletionToken:
        self._next_token += 1
        token = CompletionToken(self._next_token, kind, device_id)
        self._tokens[token.token_id] = token
        return token

    def _resolve(self, loc: Location, nbytes: int) -> tuple[np.ndarray, Optional[int]]:
        """Return (uint8 view of nbytes, device_id or None for host)."""
        if isinstance(loc, DeviceAllocation):
            dev = self.device(loc.device_id)
            if nbytes > loc.size:
                raise InvalidLocation(f"transfer of {nbytes} B exceeds allocation of {loc.size} B")
            return dev.backend.region(loc, nbytes), loc.device_id
        if isinstance(loc, HostRegion):
            if nbytes > loc.nbytes:
                raise InvalidLocation("transfer exceeds host region")
            if not loc.pooled:
                self.pinned_pool.note_unpinned_use()
            return loc.array[:nbytes], None
        if isinstance(loc, np.ndarray):
            if not loc.flags["C_CONTIGUOUS"]:
                raise InvalidLocation("host array location must be C-contiguous")
            flat = loc.reshape(-1).view(np.uint8)
            if nbytes > flat.nbytes:
                raise InvalidLocation("transfer exceeds destination array")
            self.pinned_pool.note_unpinned_use()
            return flat[:nbytes], None
        raise InvalidLocation(f"unsupported location {type(loc).__name__}")

    def _transfer_streams(self, dev: _Device) -> tuple[Stream, Stream]:
        if self.shared_host_bus:
            return self._bus_h2d, self._bus_d2h
        return dev.h2d, dev.d2h

    def enqueue_transfer(self, src: Location, dst: Location, size: int) -> CompletionToken:
        """Copy ``size`` bytes asynchronously; FIFO within the direction's stream.

        Bytes are captured at enqueue so later writes to the source cannot
        corrupt the destination; the token completes at the modeled time.
        """
        if size < 0:
            raise InvalidLocation("negative transfer size")
        src_view, src_dev = self._resolve(src, size) if size else (None, self._loc_dev(src))
        dst_view, dst_dev = self._resolve(dst, size) if size else (None, self._loc_dev(dst))
        if src_dev is not None and dst_dev is not None and src_dev != dst_dev:
            raise InvalidLocation("device-to-device transfers must stage through the host")
        device_id = src_dev if src_dev is not None else dst_dev
        if size and dst_view is not None and src_view is not None:
            np.copyto(dst_view, src_view)

        if device_id is None:
            token = self._new_token(TokenKind.TRANSFER, -1)
            self.clock.schedule(token, self.clock.now)
            token._fire()
            return token

        dev = self.device(device_id)
        token = self._new_token(TokenKind.TRANSFER, device_id)
        if size == 0:
            token.end_time = self.clock.now
            token._fire()
            return token
        h2d, d2h = self._transfer_streams(dev)
        stream = h2d if dst_dev is not None else d2h
        if self.clock_mode is ClockMode.WALL:
            start = end = self.clock.now
            self.clock.schedule(token, end)
        else:
            desc = dev.descriptor
            duration = desc.transfer_latency + (
                size / desc.transfer_bandwidth if desc.transfer_bandwidth != float("inf") else 0.0
            )
            start = max(stream.free_time, self.clock.now)
            end = start + duration
            stream.free_time = end
            self.clock.schedule(token, end)
        self.tracer.emit(
            "transfer",
            device=device_id,
            stream=stream.name,
            start=start,
            end=end,
            size=size,
        )
        return token

    @staticmethod
    def _loc_dev(loc: Location) -> Optional[int]:
        return loc.device_id if isinstance(loc, DeviceAllocation) else None

    def enqueue_kernel(
        self,
        device_id: int,
        kernel_ref: Any,
        args: list[tuple[DeviceAllocation, np.ndarray]],
        thread_dims: Any,
        stream_index: int = 0,
        scratch: Optional[np.ndarray] = None,
        label: Optional[str] = None,
    ) -> CompletionToken:
        """Run a registered kernel body once with device-resident views.

        The body executes exactly once; kernels are FIFO within their
        stream and may overlap across streams in virtual time.
        """
        dev = self.device(device_id)
        body = kernel_ref.body_for(dev.descriptor.device_type)
        for alloc, _ in args:
            if alloc.device_id != device_id:
                raise InvalidLocation(
                    f"kernel argument lives on device {alloc.device_id}, not {device_id}"
                )
        if not 0 <= stream_index < len(dev.compute_streams):
            raise HrtError(f"stream index {stream_index} out of range")

        token = self._new_token(TokenKind.KERNEL, device_id)
        views = [v for _, v in args]
        t0 = time.perf_counter()
        try:
            dev.backend.run_kernel(body, views, thread_dims, scratch)
        except Exception as exc:  # recorded, surfaces on the task handle
            token._final = TokenStatus.FAILED
            token.error = exc
        measured = time.perf_counter() - t0

        if self.clock_mode is ClockMode.VIRTUAL:
            duration = kernel_ref.cost_seconds(thread_dims)
            if duration is None:
                duration = measured
            stream = dev.compute_streams[stream_index]
            start = max(stream.free_time, self.clock.now)
            end = start + duration
            stream.free_time = end
            self.clock.schedule(token, end)
        else:
            start = self.clock.now - measured
            end = self.clock.now
            self.clock.schedule(token, end)
        self.tracer.emit(
            "kernel",
            device=device_id,
            stream=dev.compute_streams[stream_index].name,
            start=start,
            end=end,
            label=label or kernel_ref.name,
        )
        return token

    def poll(self, token: Union[int, CompletionToken]) -> TokenStatus:
        """Non-blocking status check; drives the event queue one completion."""
        tok = self._tokens.get(token.token_id if isinstance(token, CompletionToken) else token)
        if tok is None:
            raise UnknownToken(f"unknown token {token}")
        if tok.status is TokenStatus.PENDING:
            self.clock.advance_one()
        return tok.status

    def advance(self) -> Optional[CompletionToken]:
        return self.clock.advance_one()

    @property
    def pinned_pool_misses(self) -> int:
        return self.pinned_pool.misses
