"""Fluent task construction mirroring the library's programming model:

    task = rt.task()
    task.arg(m_a).read()
    task.arg(m_b).read()
    task.arg(m_c).write().dim_x()
    task.set_threads((32, 32, 1), (32, 32, 1))
    task.device(DeviceType.GPU_SIM)
    handle = task.submit(dgemm)

Setter order does not matter; a builder is consumed by ``submit``.
"""

from __future__ import annotations

from typing import Optional, Union

from .devices import DeviceType
from .errors import HrtError
from .kernels import KernelRef, ThreadGeometry
from .objects import AccessMode, HeteroObject
from .runtime import HeteroTask, Runtime


class _ArgBinder:
    def __init__(self, builder: "TaskBuilder", obj: HeteroObject):
        self._builder = builder
        self._obj = obj
        self._bound = False

    def _bind(self, mode: AccessMode) -> "_ArgBinder":
        if self._bound:
            raise HrtError("argument access mode already set")
        self._builder._args.append((self._obj, mode))
        self._bound = True
        return self

    def read(self) -> "_ArgBinder":
        return self._bind(AccessMode.READ)

    def write(self) -> "_ArgBinder":
        return self._bind(AccessMode.WRITE)

    def read_write(self) -> "_ArgBinder":
        return self._bind(AccessMode.READ_WRITE)

    def dim_x(self) -> "_ArgBinder":
        # accepted for interface compatibility; carries no semantics
        return self

    def dim_y(self) -> "_ArgBinder":
        return self

    def dim_z(self) -> "_ArgBinder":
        return self


class TaskBuilder:
    def __init__(self, runtime: Runtime):
        self._runtime = runtime
        self._args: list[tuple[HeteroObject, AccessMode]] = []
        self._geometry = ThreadGeometry()
        self._device_type: Optional[DeviceType] = None
        self._scratch = 0
        self._deps: list[HeteroTask] = []
        self._consumed = False

    def arg(self, obj: HeteroObject) -> _ArgBinder:
        self._check_open()
        return _ArgBinder(self, obj)

    def set_threads(self, group_counts, local_sizes) -> "TaskBuilder":
        self._check_open()
        self._geometry = ThreadGeometry(tuple(group_counts), tuple(local_sizes))
        return self

    def device(self, device_type: DeviceType) -> "TaskBuilder":
        self._check_open()
        self._device_type = device_type
        return self

    def scratch(self, nbytes: int) -> "TaskBuilder":
        self._check_open()
        if nbytes < 0:
            raise HrtError("scratch size must be non-negative")
        self._scratch = int(nbytes)
        return self

    def depends_on(self, *tasks: HeteroTask) -> "TaskBuilder":
        self._check_open()
        self._deps.extend(tasks)
        return self

    def submit(self, kernel: Union[KernelRef, str]) -> HeteroTask:
        self._check_open()
        if self._device_type is None:
            raise HrtError("task device type must be set before submit")
        self._consumed = True
        return self._runtime.submit_task(
            kernel,
            self._args,
            geometry=self._geometry,
            device_type=self._device_type,
            scratch_bytes=self._scratch,
            explicit_deps=self._deps,
        )

    def _check_open(self) -> None:
        if self._consumed:
            raise HrtError("task builder already submitted")


def task(runtime: Runtime) -> TaskBuilder:
    return TaskBuilder(runtime)
