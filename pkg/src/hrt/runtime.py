"""Core engine: coherent objects, task dependencies, scheduling, progress.

Tasks and data-access operations (host leases, region copies, network
sends and receives) share one dependency graph keyed by the objects they
touch, so "no conflicting work overlaps" holds uniformly whether the
conflict is task/task or task/message. The engine advances in passes:
drain submissions and infer dependencies, unblock resolved work, issue
runnable tasks (reserving device memory and enqueueing argument
transfers), launch kernels whose transfers finished, and retire completed
kernels. Under a virtual clock, time moves only when a pass finds nothing
else to do.
"""

from __future__ import annotations

import threading
from collections import deque
from enum import Enum
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .devices import (
    ClockMode,
    CompletionToken,
    DeviceAllocation,
    DeviceRegistry,
    DeviceType,
    HostRegion,
    TokenStatus,
)
from .errors import (
    DeadlockError,
    DependencyCycle,
    HrtError,
    LeaseConflict,
    OutOfDeviceMemory,
    SchedulerBusy,
    TaskFailed,
    UnsatisfiableEviction,
)
from .kernels import KernelRef, KernelRegistry, ThreadGeometry
from .objects import (
    AccessMode,
    CopyInfo,
    CopyState,
    Future,
    HeteroObject,
    HostLease,
    conflicts,
)
from .schedulers import LocalityScheduler, SchedulerInterface
from .trace import NullTracer, Tracer


class TaskState(Enum):
    SUBMITTED = "submitted"
    BLOCKED = "blocked"
    RUNNABLE = "runnable"
    ISSUED = "issued"
    RUNNING = "running"
    COMPLETE = "complete"


_STATE_ORDER = list(TaskState)


class _DepNode:
    """Common bookkeeping for tasks and access operations."""

    __slots__ = ("uid", "dependents", "unresolved", "done", "poisoned")

    def __init__(self, uid: int):
        self.uid = uid
        self.dependents: list[_DepNode] = []
        self.unresolved = 0
        self.done = False
        self.poisoned = False


class HeteroTask(_DepNode):
    """A device-agnostic compute request; the submit call returns it as the handle."""

    __slots__ = (
        "kernel_ref",
        "args",
        "geometry",
        "scratch_bytes",
        "device_type_pref",
        "explicit_deps",
        "state",
        "assigned_device",
        "error",
        "transfer_records",
        "pending_transfers",
        "kernel_token",
        "drained",
    )

    def __init__(
        self,
        uid: int,
        kernel_ref: KernelRef,
        args: list[tuple[HeteroObject, AccessMode]],
        geometry: ThreadGeometry,
        device_type_pref: DeviceType,
        scratch_bytes: int = 0,
        explicit_deps: Optional[set] = None,
    ):
        super().__init__(uid)
        self.kernel_ref = kernel_ref
        self.args = args
        self.geometry = geometry
        self.scratch_bytes = scratch_bytes
        self.device_type_pref = device_type_pref
        self.explicit_deps: set[HeteroTask] = set(explicit_deps or ())
        self.state = TaskState.SUBMITTED
        self.assigned_device: Optional[int] = None
        self.error: Optional[BaseException] = None
        self.transfer_records: list[dict] = []
        self.pending_transfers = 0
        self.kernel_token: Optional[CompletionToken] = None
        self.drained = False

    @property
    def task_id(self) -> int:
        return self.uid

    def __repr__(self) -> str:
        return f"<task {self.uid} {self.kernel_ref.name} {self.state.value}>"


class AccessOp(_DepNode):
    """A non-task participant in the dependency graph (lease, copy, message)."""

    __slots__ = ("obj", "mode", "on_granted", "granted", "token", "on_token", "label")

    def __init__(
        self,
        uid: int,
        obj: HeteroObject,
        mode: AccessMode,
        on_granted: Callable,
        label: str = "",
    ):
        super().__init__(uid)
        self.obj = obj
        self.mode = mode
        self.on_granted = on_granted
        self.granted = False
        self.token: Optional[CompletionToken] = None
        self.on_token: Optional[Callable] = None
        self.label = label

    def __repr__(self) -> str:
        return f"<op {self.uid} {self.label or self.mode.value} obj={self.obj.object_id}>"


class _ObjectTrack:
    __slots__ = ("last_writer", "readers")

    def __init__(self) -> None:
        self.last_writer: Optional[_DepNode] = None
        self.readers: list[_DepNode] = []


class DependencyTracker:
    """Derives the edges that reproduce sequential semantics per object."""

    def __init__(self) -> None:
        self._tracks: dict[int, _ObjectTrack] = {}

    def register(self, node: _DepNode, obj: HeteroObject, mode: AccessMode) -> set[_DepNode]:
        track = self._tracks.setdefault(obj.object_id, _ObjectTrack())
        prereqs: set[_DepNode] = set()
        if track.last_writer is not None and not track.last_writer.done:
            prereqs.add(track.last_writer)
        if mode is AccessMode.READ:
            track.readers.append(node)
        else:
            for reader in track.readers:
                if not reader.done and reader is not node:
                    prereqs.add(reader)
            track.last_writer = node
            track.readers = []
        prereqs.discard(node)
        return prereqs

    def forget(self, obj: HeteroObject) -> None:
        self._tracks.pop(obj.object_id, None)


class Runtime:
    """Single-process runtime instance owning objects, tasks, and devices."""

    def __init__(
        self,
        registry: DeviceRegistry,
        scheduler: Optional[SchedulerInterface] = None,
        kernels: Optional[KernelRegistry] = None,
        tracer: Optional[Tracer] = None,
        dedicated_threads: Optional[bool] = None,
    ):
        self.registry = registry
        self.kernels = kernels if kernels is not None else KernelRegistry()
        self.tracer = tracer if tracer is not None else registry.tracer
        self._scheduler = scheduler if scheduler is not None else LocalityScheduler()
        self._scheduler.bind(self)

        self._objects: dict[int, HeteroObject] = {}
        self._next_uid = 0
        self._tracker = DependencyTracker()
        self._submissions: deque = deque()
        self._submit_lock = threading.Lock()
        self._lock = threading.RLock()
        self._blocked: list[_DepNode] = []
        self._issued: list[HeteroTask] = []
        self._watchers: dict[int, list[Callable]] = {}
        self._watched_tokens: dict[int, CompletionToken] = {}
        self.device_load: dict[int, int] = {}
        self._stream_rr: dict[int, int] = {}
        self._lru_counter = 0
        self._outstanding = 0
        self._record_pool: list[dict] = []
        self.on_destroy: list[Callable] = []
        self._cache_release: Optional[Callable] = None
        self.stats = {
            "tasks_completed": 0,
            "evictions": 0,
            "records_recycled": 0,
            "staging_copies": 0,
        }
        self._progress_threads: list[threading.Thread] = []
        self._stop_threads = threading.Event()
        if dedicated_threads is None:
            from .config import env_bool

            dedicated_threads = env_bool("HRT_DEDICATED_THREADS")
        # dedicated threads only apply under the wall clock; virtual-time
        # progression stays single-threaded
        if dedicated_threads and registry.clock_mode is ClockMode.WALL:
            self.start_progress_threads()

    # ------------------------------------------------------------------
    # identity helpers

    def _uid(self) -> int:
        self._next_uid += 1
        return self._next_uid

    def _tick(self, obj: HeteroObject) -> None:
        self._lru_counter += 1
        obj.lru_tick = self._lru_counter

    @property
    def clock(self):
        return self.registry.clock

    # ------------------------------------------------------------------
    # kernels / builders

    def register_kernel(self, *args, **kwargs) -> KernelRef:
        return self.kernels.register_kernel(*args, **kwargs)

    def task(self):
        from .builder import TaskBuilder

        return TaskBuilder(self)

    # ------------------------------------------------------------------
    # objects

    def create_object(
        self,
        dims: Union[int, tuple],
        element_size: Optional[int] = None,
        dtype=None,
    ) -> HeteroObject:
        obj = HeteroObject(self._uid(), dims, element_size, dtype)
        self._objects[obj.object_id] = obj
        return obj

    def adopt_object(self, obj: HeteroObject) -> None:
        """Install an externally built object (receive-path wrappers)."""
        self._objects[obj.object_id] = obj

    def new_uid(self) -> int:
        return self._uid()

    def _ensure_host_region(self, obj: HeteroObject) -> HostRegion:
        if obj.host_region is None:
            obj.host_region = self.registry.pinned_pool.alloc(obj.total_size)
            obj.host_state = CopyState.ABSENT
        return obj.host_region

    def host_view(self, obj: HeteroObject) -> np.ndarray:
        region = self._ensure_host_region(obj)
        return self._typed(obj, region.array)

    def device_view(self, obj: HeteroObject, device_id: int) -> np.ndarray:
        ci = obj.copies[device_id]
        assert ci.allocation is not None
        raw = self.registry.device(device_id).backend.region(ci.allocation, obj.total_size)
        return self._typed(obj, raw)

    @staticmethod
    def _typed(obj: HeteroObject, raw: np.ndarray) -> np.ndarray:
        if obj.dtype is None:
            return raw
        return raw.view(obj.dtype).reshape(obj.dims)

    # ------------------------------------------------------------------
    # host access

    def request_data(self, obj: HeteroObject, read: bool = True, write: bool = False) -> Future:
        """Asynchronously make the newest bytes available on the host.

        Returns a future of a host array view. On grant the host copy is
        VALID; a write request marks every device copy STALE and blocks
        writer tasks until ``release``.
        """
        obj.check_not_destroyed()
        if not (read or write):
            raise HrtError("request_data needs read and/or write")
        mode = AccessMode.WRITE if write else AccessMode.READ
        if obj.host_lease is not HostLease.NONE:
            held = AccessMode.WRITE if obj.host_lease is HostLease.WRITE else AccessMode.READ
            if conflicts(held, mode):
                raise LeaseConflict(
                    f"object {obj.object_id} already holds a {obj.host_lease.value} lease"
                )
        future = Future(self)

        def granted(rt: "Runtime", op: AccessOp) -> None:
            rt._tick(obj)
            region = rt._ensure_host_region(obj)

            def finish(_rt: "Runtime", _op: AccessOp) -> None:
                obj.host_state = CopyState.VALID
                if mode is AccessMode.WRITE:
                    for ci in obj.copies.values():
                        if ci.state is CopyState.VALID:
                            ci.state = CopyState.STALE
                    obj.written = True
                obj.host_lease = HostLease.WRITE if write else HostLease.READ
                obj.lease_holders.append(op)
                future._resolve(rt.host_view(obj))

            if obj.host_state is not CopyState.VALID:
                valid = obj.valid_devices()
                if valid:
                    src = obj.copies[valid[0]].allocation
                    op.token = rt.registry.enqueue_transfer(src, region, obj.total_size)
                    op.on_token = finish
                    rt._watch(op.token, lambda tok: op.on_token(rt, op))
                    return
                region.array[: obj.total_size] = 0
            finish(rt, op)

        self._enqueue_op(AccessOp(self._uid(), obj, mode, granted, label="host_lease"))
        return future

    def release(self, obj: HeteroObject) -> None:
        if not obj.lease_holders:
            raise HrtError(f"object {obj.object_id} holds no host lease")
        op = obj.lease_holders.pop(0)
        if not obj.lease_holders:
            obj.host_lease = HostLease.NONE
        self.complete_access(op)

    def copy_to_region(self, obj: HeteroObject, destination: Union[np.ndarray, HostRegion]) -> Future:
        """Copy the newest bytes straight into a caller-owned host region."""
        obj.check_not_destroyed()
        if destination.nbytes < obj.total_size:
            raise HrtError("destination region smaller than object")
        future = Future(self)

        def granted(rt: "Runtime", op: AccessOp) -> None:
            rt._tick(obj)

            def finish(_rt, _op) -> None:
                rt.complete_access(op)
                future._resolve(destination)

            if obj.host_state is CopyState.VALID:
                src: Union[HostRegion, DeviceAllocation] = obj.host_region
            else:
                valid = obj.valid_devices()
                if valid:
                    src = obj.copies[valid[0]].allocation
                else:
                    dst = destination.array if isinstance(destination, HostRegion) else destination
                    dst.reshape(-1).view(np.uint8)[: obj.total_size] = 0
                    finish(rt, op)
                    return
            op.token = rt.registry.enqueue_transfer(src, destination, obj.total_size)
            op.on_token = finish
            rt._watch(op.token, lambda tok: op.on_token(rt, op))

        self._enqueue_op(AccessOp(self._uid(), obj, AccessMode.READ, granted, label="copy_out"))
        return future

    # ------------------------------------------------------------------
    # access-op plumbing (also used by the distributed layer)

    def _enqueue_op(self, op: AccessOp) -> AccessOp:
        # the reference is taken at enqueue so a destroy between submission
        # and the drain pass cannot reap the object out from under the op
        op.obj.ref_count += 1
        with self._submit_lock:
            self._submissions.append(op)
        return op

    def register_access(
        self,
        obj: HeteroObject,
        mode: AccessMode,
        on_granted: Callable,
        label: str = "",
    ) -> AccessOp:
        """Queue an access operation ordered against conflicting work."""
        obj.check_not_destroyed()
        return self._enqueue_op(AccessOp(self._uid(), obj, mode, on_granted, label=label))

    def complete_access(self, op: AccessOp) -> None:
        if op.done:
            return
        op.done = True
        obj = op.obj
        obj.access_registry.discard(op.uid)
        obj.ref_count -= 1
        self._notify_dependents(op)
        self._maybe_destroy(obj)

    def _watch(self, token: CompletionToken, callback: Callable) -> None:
        self._watchers.setdefault(token.token_id, []).append(callback)
        self._watched_tokens[token.token_id] = token

    # ------------------------------------------------------------------
    # tasks

    def submit_task(
        self,
        kernel: Union[KernelRef, str],
        args: Iterable[tuple[HeteroObject, AccessMode]],
        geometry: Optional[ThreadGeometry] = None,
        device_type: DeviceType = DeviceType.HOST,
        scratch_bytes: int = 0,
        explicit_deps: Optional[Iterable[HeteroTask]] = None,
    ) -> HeteroTask:
        kernel_ref = self.kernels.get(kernel) if isinstance(kernel, str) else kernel
        if not kernel_ref.supports(device_type):
            raise HrtError(
                f"kernel {kernel_ref.name!r} has no entry point for {device_type.value}"
            )
        if not self.registry.devices_of_type(device_type):
            raise HrtError(f"no device of type {device_type.value} registered")
        arg_list = list(args)
        for obj, mode in arg_list:
            obj.check_not_destroyed()
            if obj.object_id not in self._objects:
                raise HrtError(f"unknown object {obj.object_id}")
            if not isinstance(mode, AccessMode):
                raise HrtError(f"bad access mode {mode!r}")
        task = HeteroTask(
            self._uid(),
            kernel_ref,
            arg_list,
            geometry if geometry is not None else ThreadGeometry(),
            device_type,
            scratch_bytes,
            set(explicit_deps or ()),
        )
        self._check_cycles(task)
        for obj, _ in arg_list:
            obj.ref_count += 1
        self._outstanding += 1
        with self._submit_lock:
            self._submissions.append(task)
        self._trace_task(task)
        return task

    def add_dependency(self, task: HeteroTask, prerequisite: HeteroTask) -> None:
        if task is prerequisite:
            raise DependencyCycle("task cannot depend on itself")
        if task.drained:
            raise HrtError("dependencies are frozen once the task has been processed")
        task.explicit_deps.add(prerequisite)
        self._check_cycles(task)

    def _check_cycles(self, task: HeteroTask) -> None:
        seen: set[int] = set()
        stack = [task]
        while stack:
            node = stack.pop()
            for dep in node.explicit_deps:
                if dep is task:
                    raise DependencyCycle(f"explicit dependency cycle through task {task.uid}")
                if dep.uid not in seen and not dep.done:
                    seen.add(dep.uid)
                    stack.append(dep)

    def wait(self, task: HeteroTask) -> None:
        while task.state is not TaskState.COMPLETE:
            if self.progress() == 0:
                raise DeadlockError(f"no progress possible while waiting on {task!r}")
        if task.error is not None:
            raise TaskFailed(str(task.error)) from task.error

    def wait_all(self, tasks: Iterable[HeteroTask]) -> None:
        for t in tasks:
            self.wait(t)

    # ------------------------------------------------------------------
    # progress engine

    def progress(self, advance: bool = True) -> int:
        """One engine pass; returns the amount of work performed."""
        with self._lock:
            work = 0
            work += self._drain_submissions()
            work += self._drain_blocked()
            work += self._issue_from_scheduler()
            work += self._service_tokens()
            if work == 0 and advance:
                if self.clock.advance_one() is not None:
                    work += 1
            return work

    def _drain_submissions(self) -> int:
        # size check before taking the queue lock, to skip it when idle
        if not self._submissions:
            return 0
        with self._submit_lock:
            batch = list(self._submissions)
            self._submissions.clear()
        for node in batch:
            if isinstance(node, HeteroTask):
                self._drain_task(node)
            else:
                self._drain_op(node)
        return len(batch)

    def _drain_task(self, task: HeteroTask) -> None:
        prereqs: set[_DepNode] = set()
        for obj, mode in task.args:
            prereqs |= self._tracker.register(task, obj, mode)
            obj.access_registry.add(task.uid)
        for dep in task.explicit_deps:
            if not dep.done:
                prereqs.add(dep)
            elif getattr(dep, "error", None) is not None:
                task.poisoned = True
        task.drained = True
        task.unresolved = len(prereqs)
        for p in prereqs:
            p.dependents.append(task)
        if task.unresolved == 0:
            self._make_runnable(task)
        else:
            task.state = TaskState.BLOCKED
            self._blocked.append(task)
            self._trace_task(task)

    def _drain_op(self, op: AccessOp) -> None:
        prereqs = self._tracker.register(op, op.obj, op.mode)
        op.obj.access_registry.add(op.uid)
        op.unresolved = len(prereqs)
        for p in prereqs:
            p.dependents.append(op)
        if op.unresolved == 0:
            self._grant(op)
        else:
            self._blocked.append(op)

    def _grant(self, op: AccessOp) -> None:
        op.granted = True
        op.on_granted(self, op)

    def _make_runnable(self, task: HeteroTask) -> None:
        if task.poisoned:
            self._finish_task(task, error=TaskFailed("a prerequisite task failed"))
            return
        task.state = TaskState.RUNNABLE
        self._trace_task(task)
        self._scheduler.push(task)

    def _drain_blocked(self) -> int:
        if not self._blocked:
            return 0
        ready = [n for n in self._blocked if n.unresolved == 0]
        if not ready:
            return 0
        self._blocked = [n for n in self._blocked if n.unresolved > 0]
        for node in ready:
            if isinstance(node, HeteroTask):
                self._make_runnable(node)
            else:
                self._grant(node)
        return len(ready)

    def _issue_from_scheduler(self) -> int:
        issued = 0
        deferred: list[HeteroTask] = []
        while True:
            popped = self._scheduler.pop()
            if popped is None:
                break
            task, device_id = popped
            dev = self.registry.device(device_id)
            if dev.descriptor.device_type is not task.device_type_pref:
                raise HrtError(
                    f"scheduler returned device {device_id} of type "
                    f"{dev.descriptor.device_type.value} for a task preferring "
                    f"{task.device_type_pref.value}"
                )
            try:
                self._issue(task, device_id)
                issued += 1
            except (OutOfDeviceMemory, UnsatisfiableEviction):
                deferred.append(task)
        for task in deferred:
            task.state = TaskState.RUNNABLE
            self._scheduler.push(task)
        return issued

    def _alloc_with_evict(self, device_id: int, size: int) -> DeviceAllocation:
        try:
            return self.registry.pool_alloc(device_id, size)
        except OutOfDeviceMemory:
            self.evict_lru(device_id, size)
            return self.registry.pool_alloc(device_id, size)

    def _issue(self, task: HeteroTask, device_id: int) -> None:
        new_allocs: list[tuple[HeteroObject, CopyInfo]] = []
        plans: list[tuple[HeteroObject, CopyInfo, str]] = []
        try:
            for obj, mode in task.args:
                ci = obj.copies.get(device_id)
                if ci is None or ci.allocation is None:
                    alloc = self._alloc_with_evict(device_id, obj.total_size)
                    ci = CopyInfo(alloc, CopyState.ABSENT)
                    obj.copies[device_id] = ci
                    new_allocs.append((obj, ci))
                needs_bytes = mode in (AccessMode.READ, AccessMode.READ_WRITE)
                if needs_bytes and ci.state is not CopyState.VALID:
                    if obj.host_state is CopyState.VALID:
                        plans.append((obj, ci, "h2d"))
                    elif obj.valid_devices():
                        plans.append((obj, ci, "stage"))
                    else:
                        # untouched object: canonical zero content
                        self.registry.device(device_id).backend.region(
                            ci.allocation, obj.total_size
                        )[:] = 0
                        ci.state = CopyState.VALID
        except (OutOfDeviceMemory, UnsatisfiableEviction):
            for obj, ci in new_allocs:
                self.registry.pool_free(ci.allocation)
                obj.copies.pop(device_id, None)
            raise

        task.assigned_device = device_id
        task.state = TaskState.ISSUED
        self.device_load[device_id] = self.device_load.get(device_id, 0) + 1
        for obj, _ in task.args:
            self._tick(obj)
        self._trace_task(task)

        task.pending_transfers = 0
        for obj, ci, kind in plans:
            record = self._record_pool.pop() if self._record_pool else {}
            record.clear()
            task.transfer_records.append(record)
            task.pending_transfers += 1
            if kind == "h2d":
                self._start_h2d(task, obj, ci, record)
            else:
                self._start_stage(task, obj, ci, record)
        if task.pending_transfers == 0:
            self._launch_kernel(task)

    def _start_h2d(self, task: HeteroTask, obj: HeteroObject, ci: CopyInfo, record: dict) -> None:
        # piggyback on an upload another task already started for this copy
        token = ci.pending_fill
        if token is None or token.status is not TokenStatus.PENDING:
            token = self.registry.enqueue_transfer(obj.host_region, ci.allocation, obj.total_size)
            ci.pending_fill = token
        record["token"] = token

        def done(tok: CompletionToken) -> None:
            ci.state = CopyState.VALID
            if ci.pending_fill is tok:
                ci.pending_fill = None
            self._transfer_done(task)

        self._watch(token, done)

    def _start_stage(self, task: HeteroTask, obj: HeteroObject, ci: CopyInfo, record: dict) -> None:
        token = obj.host_pending_fill
        if token is None or token.status is not TokenStatus.PENDING:
            src_dev = obj.valid_devices()[0]
            region = self._ensure_host_region(obj)
            token = self.registry.enqueue_transfer(
                obj.copies[src_dev].allocation, region, obj.total_size
            )
            obj.host_pending_fill = token
        record["token"] = token

        def staged(tok: CompletionToken) -> None:
            obj.host_state = CopyState.VALID
            if obj.host_pending_fill is tok:
                obj.host_pending_fill = None
            self._start_h2d(task, obj, ci, record)

        self._watch(token, staged)

    def _transfer_done(self, task: HeteroTask) -> None:
        task.pending_transfers -= 1
        if task.pending_transfers == 0 and task.state is TaskState.ISSUED:
            self._launch_kernel(task)

    def _launch_kernel(self, task: HeteroTask) -> None:
        device_id = task.assigned_device
        dev = self.registry.device(device_id)
        pairs = []
        for obj, _ in task.args:
            ci = obj.copies[device_id]
            pairs.append((ci.allocation, self.device_view(obj, device_id)))
        scratch = np.zeros(task.scratch_bytes, dtype=np.uint8) if task.scratch_bytes else None
        stream = self._stream_rr.get(device_id, 0)
        self._stream_rr[device_id] = stream + 1
        stream_index = stream % len(dev.compute_streams)
        token = self.registry.enqueue_kernel(
            device_id,
            task.kernel_ref,
            pairs,
            task.geometry,
            stream_index,
            scratch,
            label=f"t{task.uid}:{task.kernel_ref.name}",
        )
        task.kernel_token = token
        task.state = TaskState.RUNNING
        self._trace_task(task)
        self._watch(token, lambda tok: self._retire(task, tok))

    def _retire(self, task: HeteroTask, token: CompletionToken) -> None:
        device_id = task.assigned_device
        if token.status is TokenStatus.FAILED:
            # written copies may hold partial output; drop them back to STALE
            for obj, mode in task.args:
                if mode is not AccessMode.READ:
                    ci = obj.copies.get(device_id)
                    if ci is not None:
                        ci.state = CopyState.STALE
            self._finish_task(task, error=token.error)
            return
        for obj, mode in task.args:
            if mode in (AccessMode.WRITE, AccessMode.READ_WRITE):
                for did, ci in obj.copies.items():
                    ci.state = CopyState.VALID if did == device_id else CopyState.STALE
                if obj.host_region is not None:
                    obj.host_state = CopyState.STALE
                obj.written = True
            else:
                obj.copies[device_id].state = CopyState.VALID
        self._finish_task(task, error=None)

    def _finish_task(self, task: HeteroTask, error: Optional[BaseException]) -> None:
        task.error = error
        if task.assigned_device is not None:
            self.device_load[task.assigned_device] -= 1
        task.state = TaskState.COMPLETE
        task.done = True
        self._outstanding -= 1
        self.stats["tasks_completed"] += 1
        for record in task.transfer_records:
            record.clear()
            self._record_pool.append(record)
            self.stats["records_recycled"] += 1
        task.transfer_records = []
        seen: set[int] = set()
        for obj, _ in task.args:
            obj.ref_count -= 1
            if obj.object_id not in seen:
                seen.add(obj.object_id)
                obj.access_registry.discard(task.uid)
        self._notify_dependents(task)
        self._trace_task(task)
        for obj, _ in task.args:
            self._maybe_destroy(obj)

    def _notify_dependents(self, node: _DepNode) -> None:
        failed = getattr(node, "error", None) is not None
        for dep in node.dependents:
            if failed and isinstance(dep, HeteroTask):
                dep.poisoned = True
            dep.unresolved -= 1
        node.dependents = []

    def _service_tokens(self) -> int:
        if not self._watched_tokens:
            return 0
        fired = 0
        for token_id in list(self._watched_tokens):
            token = self._watched_tokens.get(token_id)
            if token is None or token.status is TokenStatus.PENDING:
                continue
            callbacks = self._watchers.pop(token_id, [])
            del self._watched_tokens[token_id]
            for cb in callbacks:
                cb(token)
                fired += 1
        return fired

    # ------------------------------------------------------------------
    # eviction / destruction

    def evict_lru(self, device_id: int, needed: int) -> int:
        """Offload least-recently-used idle objects until ``needed`` bytes free."""
        freed = 0
        candidates = [
            obj
            for obj in self._objects.values()
            if not obj.access_registry
            and obj.copies.get(device_id) is not None
            and obj.copies[device_id].allocation is not None
        ]
        candidates.sort(key=lambda o: o.lru_tick)
        for obj in candidates:
            if freed >= needed:
                break
            freed += self._evict_copy(obj, device_id)
        if freed < needed:
            raise UnsatisfiableEviction(
                f"could free only {freed} of {needed} bytes on device {device_id}"
            )
        return freed

    def _evict_copy(self, obj: HeteroObject, device_id: int) -> int:
        ci = obj.copies[device_id]
        assert ci.allocation is not None
        sole_valid = (
            ci.state is CopyState.VALID
            and obj.host_state is not CopyState.VALID
            and obj.valid_devices() == [device_id]
        )
        if sole_valid:
            region = self._ensure_host_region(obj)
            self.registry.enqueue_transfer(ci.allocation, region, obj.total_size)
            obj.host_state = CopyState.VALID
        size = ci.allocation.size
        self._release_allocation(obj, device_id, ci)
        self.stats["evictions"] += 1
        self.tracer.emit(
            "evict", object=obj.object_id, device=device_id, virtual_time=self.clock.now
        )
        return size

    def _release_allocation(self, obj: HeteroObject, device_id: int, ci: CopyInfo) -> None:
        if ci.cache_slab and self._cache_release is not None:
            self._cache_release(ci.allocation)
        else:
            self.registry.pool_free(ci.allocation)
        obj.copies[device_id] = CopyInfo(None, CopyState.ABSENT)

    def destroy_object(self, obj: HeteroObject) -> None:
        """Deferred destruction; a no-op once destroyed (idempotent)."""
        if obj.destroyed:
            return
        obj.destroy_requested = True
        self._maybe_destroy(obj)

    def _maybe_destroy(self, obj: HeteroObject) -> None:
        if not obj.destroy_requested or obj.destroyed:
            return
        if obj.ref_count > 0 or obj.access_registry:
            return
        for device_id, ci in list(obj.copies.items()):
            if ci.allocation is not None:
                self._release_allocation(obj, device_id, ci)
        obj.copies.clear()
        if obj.host_region is not None:
            self.registry.pinned_pool.free(obj.host_region)
            obj.host_region = None
        obj.host_state = CopyState.ABSENT
        obj.destroyed = True
        self._tracker.forget(obj)
        self._objects.pop(obj.object_id, None)
        for cb in self.on_destroy:
            cb(obj)
        self.tracer.emit("object_destroyed", object=obj.object_id, virtual_time=self.clock.now)

    # ------------------------------------------------------------------
    # scheduler management

    def set_scheduler(self, scheduler: SchedulerInterface) -> None:
        if self._outstanding > 0:
            raise SchedulerBusy("cannot replace the scheduler while tasks are in flight")
        scheduler.bind(self)
        self._scheduler = scheduler

    # ------------------------------------------------------------------
    # dedicated progress threads (wall clock only)

    def start_progress_threads(self, count: Optional[int] = None) -> None:
        if self.registry.clock_mode is ClockMode.VIRTUAL:
            raise HrtError("dedicated progress threads require the wall clock")
        if self._progress_threads:
            return
        n = count if count is not None else max(1, len(self.registry.device_ids))
        self._stop_threads.clear()

        def loop() -> None:
            while not self._stop_threads.is_set():
                if self.progress() == 0:
                    self._stop_threads.wait(0.0005)

        for _ in range(n):
            t = threading.Thread(target=loop, daemon=True)
            t.start()
            self._progress_threads.append(t)

    def stop_progress_threads(self) -> None:
        self._stop_threads.set()
        for t in self._progress_threads:
            t.join()
        self._progress_threads = []

    # ------------------------------------------------------------------

    def _trace_task(self, task: HeteroTask) -> None:
        self.tracer.emit(
            "task",
            task_id=task.uid,
            state=task.state.value,
            device=task.assigned_device,
            virtual_time=self.clock.now,
        )
