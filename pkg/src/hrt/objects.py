"""Location-transparent data objects and their per-device coherence state."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .devices import DeviceAllocation, HostRegion
from .errors import HrtError


class CopyState(Enum):
    VALID = "valid"
    STALE = "stale"
    ABSENT = "absent"


class AccessMode(Enum):
    READ = "read"
    WRITE = "write"
    READ_WRITE = "read_write"


def conflicts(a: AccessMode, b: AccessMode) -> bool:
    return not (a is AccessMode.READ and b is AccessMode.READ)


class HostLease(Enum):
    NONE = "none"
    READ = "read"
    WRITE = "write"


@dataclass
class CopyInfo:
    allocation: Optional[DeviceAllocation] = None
    state: CopyState = CopyState.ABSENT
    cache_slab: bool = False  # backed by the receive cache, returned there on free
    pending_fill: object = None  # in-flight transfer token filling this copy


def _normalize_dims(dims: Union[int, tuple]) -> tuple[int, ...]:
    if isinstance(dims, int):
        dims = (dims,)
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3:
        raise HrtError("objects support one to three extents")
    if any(d <= 0 for d in dims):
        raise HrtError("object extents must be positive")
    return dims


class HeteroObject:
    """A data container whose copies across devices stay coherent.

    The handle itself is what application code passes around; all state
    transitions happen inside the runtime. After the first write exactly
    the set of copies holding the newest bytes is VALID; an untouched
    object reads as zeros.
    """

    def __init__(
        self,
        object_id: int,
        dims: Union[int, tuple],
        element_size: Optional[int] = None,
        dtype: Optional[np.dtype] = None,
    ):
        self.object_id = object_id
        self.dims = _normalize_dims(dims)
        self.dtype = np.dtype(dtype) if dtype is not None else None
        if self.dtype is not None:
            element_size = self.dtype.itemsize
        if element_size is None or element_size <= 0:
            raise HrtError("element_size (or dtype) required and must be positive")
        self.element_size = int(element_size)
        self.total_size = self.element_size * math.prod(self.dims)

        self.copies: dict[int, CopyInfo] = {}
        self.host_region: Optional[HostRegion] = None
        self.host_state = CopyState.ABSENT
        self.host_pending_fill = None  # in-flight device-to-host transfer token
        self.access_registry: set[int] = set()
        self.lru_tick = 0
        self.ref_count = 0
        self.host_lease = HostLease.NONE
        self.lease_holders: list = []  # granted lease ops, FIFO
        self.written = False
        self.destroy_requested = False
        self.destroyed = False

    def valid_devices(self) -> list[int]:
        return [d for d, ci in self.copies.items() if ci.state is CopyState.VALID]

    def has_valid_copy(self) -> bool:
        return self.host_state is CopyState.VALID or bool(self.valid_devices())

    def check_not_destroyed(self) -> None:
        if self.destroyed:
            raise HrtError(f"object {self.object_id} has been destroyed")

    def __repr__(self) -> str:
        return f"<object {self.object_id} dims={self.dims} esize={self.element_size}>"


class Future:
    """Minimal future resolved by the progress engine.

    ``get`` drives the owning runtime until the value is available.
    """

    def __init__(self, runtime):
        self._runtime = runtime
        self._value = None
        self._done = False
        self._error: Optional[BaseException] = None

    def _resolve(self, value) -> None:
        self._value = value
        self._done = True

    def _fail(self, error: BaseException) -> None:
        self._error = error
        self._done = True

    @property
    def done(self) -> bool:
        return self._done

    def get(self):
        from .errors import DeadlockError

        while not self._done:
            if self._runtime.progress() == 0:
                raise DeadlockError("future cannot complete: no runtime progress possible")
        if self._error is not None:
            raise self._error
        return self._value
