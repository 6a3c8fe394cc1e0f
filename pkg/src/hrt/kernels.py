"""Kernel registry and thread geometry.

A kernel is registered once under a name with one host-function entry
point per device type it supports. All entry points for a name must be
observationally equivalent; in practice most kernels register the same
callable for every type. Bodies receive ``(views, geometry, scratch)``
where ``views`` are numpy arrays over device-resident bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .devices import DeviceType
from .errors import HrtError

KernelBody = Callable[[list, "ThreadGeometry", Optional[object]], None]
CostModel = Union[float, Callable[["ThreadGeometry"], float], None]


@dataclass(frozen=True)
class ThreadGeometry:
    group_counts: tuple[int, int, int] = (1, 1, 1)
    local_sizes: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self) -> None:
        for v in (*self.group_counts, *self.local_sizes):
            if v < 1:
                raise HrtError("thread geometry components must be >= 1")

    @property
    def total_work_items(self) -> int:
        gx, gy, gz = self.group_counts
        lx, ly, lz = self.local_sizes
        return gx * gy * gz * lx * ly * lz

    def extent(self, axis: int) -> int:
        return self.group_counts[axis] * self.local_sizes[axis]


@dataclass
class KernelDefinition:
    name: str
    entries: dict[DeviceType, KernelBody]
    cost_model: CostModel = None


class KernelRef:
    """Resolved handle used by task submission and the device layer."""

    __slots__ = ("definition",)

    def __init__(self, definition: KernelDefinition):
        self.definition = definition

    @property
    def name(self) -> str:
        return self.definition.name

    def supports(self, device_type: DeviceType) -> bool:
        return device_type in self.definition.entries

    def body_for(self, device_type: DeviceType) -> KernelBody:
        body = self.definition.entries.get(device_type)
        if body is None:
            raise HrtError(f"kernel {self.name!r} has no entry point for {device_type.value}")
        return body

    def cost_seconds(self, geometry: ThreadGeometry) -> Optional[float]:
        cm = self.definition.cost_model
        if cm is None:
            return None
        if callable(cm):
            return float(cm(geometry))
        return float(cm)

    def __repr__(self) -> str:
        return f"<kernel {self.name}>"


class KernelRegistry:
    def __init__(self) -> None:
        self._kernels: dict[str, KernelRef] = {}

    def register(self, definition: KernelDefinition) -> KernelRef:
        if not definition.entries:
            raise HrtError("kernel definition needs at least one entry point")
        if definition.name in self._kernels:
            raise HrtError(f"kernel {definition.name!r} already registered")
        ref = KernelRef(definition)
        self._kernels[definition.name] = ref
        return ref

    def register_kernel(
        self,
        name: str,
        host: Optional[KernelBody] = None,
        gpu_sim: Optional[KernelBody] = None,
        body: Optional[KernelBody] = None,
        cost: CostModel = None,
    ) -> KernelRef:
        """Convenience wrapper; ``body`` registers one callable for all types."""
        entries: dict[DeviceType, KernelBody] = {}
        if body is not None:
            entries[DeviceType.HOST] = body
            entries[DeviceType.GPU_SIM] = body
        if host is not None:
            entries[DeviceType.HOST] = host
        if gpu_sim is not None:
            entries[DeviceType.GPU_SIM] = gpu_sim
        return self.register(KernelDefinition(name, entries, cost))

    def get(self, name: str) -> KernelRef:
        ref = self._kernels.get(name)
        if ref is None:
            raise HrtError(f"unknown kernel {name!r}")
        return ref

    def __contains__(self, name: str) -> bool:
        return name in self._kernels
