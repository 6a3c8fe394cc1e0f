"""Pluggable task schedulers.

A scheduler's contract is two operations: ``push`` adds a runnable task to
the work pool; ``pop`` returns the next ``(task, device_id)`` pair, where
the device's type always matches the task's device-type preference. Every
pushed task is popped exactly once.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections import deque
from typing import Optional

from .errors import HrtError
from .objects import CopyState


class SchedulerInterface(ABC):
    def bind(self, runtime) -> None:
        self.runtime = runtime

    @abstractmethod
    def push(self, task) -> None: ...

    @abstractmethod
    def pop(self) -> Optional[tuple]: ...

    def _candidates(self, task) -> list[int]:
        devices = self.runtime.registry.devices_of_type(task.device_type_pref)
        if not devices:
            raise HrtError(f"no device of type {task.device_type_pref.value} registered")
        return devices


class FifoScheduler(SchedulerInterface):
    """Submission order, round-robin across matching devices."""

    def __init__(self) -> None:
        self._queue: deque = deque()
        self._rr: dict = {}

    def push(self, task) -> None:
        self._queue.append(task)

    def pop(self) -> Optional[tuple]:
        if not self._queue:
            return None
        task = self._queue.popleft()
        devices = self._candidates(task)
        idx = self._rr.get(task.device_type_pref, 0)
        self._rr[task.device_type_pref] = idx + 1
        return task, devices[idx % len(devices)]


class LeastLoadedScheduler(SchedulerInterface):
    """Pick the matching device with the fewest outstanding tasks."""

    def __init__(self) -> None:
        self._queue: deque = deque()

    def push(self, task) -> None:
        self._queue.append(task)

    def pop(self) -> Optional[tuple]:
        if not self._queue:
            return None
        task = self._queue.popleft()
        load = self.runtime.device_load
        device_id = min(self._candidates(task), key=lambda d: (load.get(d, 0), d))
        return task, device_id


class LocalityScheduler(SchedulerInterface):
    """Prefer the device already holding the most valid argument bytes.

    Ties break toward the least-loaded device, then the lowest id. This is
    the default policy.
    """

    def __init__(self) -> None:
        self._queue: deque = deque()

    def push(self, task) -> None:
        self._queue.append(task)

    def _score(self, task, device_id: int) -> int:
        resident = 0
        for obj, _ in task.args:
            ci = obj.copies.get(device_id)
            if ci is not None and ci.state is CopyState.VALID:
                resident += obj.total_size
        return resident

    def pop(self) -> Optional[tuple]:
        if not self._queue:
            return None
        task = self._queue.popleft()
        load = self.runtime.device_load
        device_id = min(
            self._candidates(task),
            key=lambda d: (-self._score(task, d), load.get(d, 0), d),
        )
        return task, device_id


def make_scheduler(name: str) -> SchedulerInterface:
    try:
        return {
            "fifo": FifoScheduler,
            "locality": LocalityScheduler,
            "least-loaded": LeastLoadedScheduler,
        }[name]()
    except KeyError:
        raise HrtError(f"unknown scheduler {name!r}") from None
