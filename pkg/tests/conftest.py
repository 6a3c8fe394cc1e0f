"""Shared fixtures and the randomized task-stream machinery."""

from __future__ import annotations

import random

import numpy as np
import pytest

from hrt import (
    AccessMode,
    ClockMode,
    DeviceDescriptor,
    DeviceRegistry,
    DeviceType,
    Runtime,
)
from hrt.objects import CopyState
from hrt.trace import Tracer

GPU_LATENCY = 1e-5
GPU_BANDWIDTH = 1e9


def make_registry(
    clock_mode=ClockMode.VIRTUAL,
    gpus=2,
    capacity=1 << 20,
    host_capacity=1 << 20,
    tracer=None,
    streams=5,
    shared_host_bus=False,
):
    reg = DeviceRegistry(clock_mode=clock_mode, tracer=tracer, shared_host_bus=shared_host_bus)
    reg.register_device(
        DeviceDescriptor(
            0, DeviceType.HOST, host_capacity, compute_stream_count=streams, clock_mode=clock_mode
        )
    )
    for i in range(gpus):
        reg.register_device(
            DeviceDescriptor(
                i + 1,
                DeviceType.GPU_SIM,
                capacity,
                compute_stream_count=streams,
                transfer_latency=GPU_LATENCY,
                transfer_bandwidth=GPU_BANDWIDTH,
                clock_mode=clock_mode,
            )
        )
    return reg


def make_runtime(**kwargs) -> Runtime:
    return Runtime(make_registry(**kwargs))


@pytest.fixture
def rt() -> Runtime:
    return make_runtime()


def peek_bytes(rt: Runtime, obj) -> np.ndarray:
    """Newest bytes of an object without disturbing coherence state."""
    if obj.host_state is CopyState.VALID:
        return np.array(rt.host_view(obj).reshape(-1).view(np.uint8))
    valid = obj.valid_devices()
    if valid:
        return np.array(rt.device_view(obj, valid[0]).reshape(-1).view(np.uint8))
    return np.zeros(obj.total_size, dtype=np.uint8)


# ----------------------------------------------------------------------
# randomized task streams checked against a serial-order interpreter


def make_mix_body(modes: tuple[AccessMode, ...], salt: int):
    def body(views, geom, scratch) -> None:
        acc = np.uint64(salt)
        for v, m in zip(views, modes):
            if m in (AccessMode.READ, AccessMode.READ_WRITE):
                acc = acc + np.sum(v, dtype=np.uint64)
        for v, m in zip(views, modes):
            if m is AccessMode.WRITE:
                idx = np.arange(v.size, dtype=np.uint64)
                v[:] = ((idx * np.uint64(31) + acc) % np.uint64(256)).astype(np.uint8)
            elif m is AccessMode.READ_WRITE:
                v[:] = ((v.astype(np.uint64) * np.uint64(3) + acc + np.uint64(1)) % np.uint64(256)).astype(
                    np.uint8
                )

    return body


class RandomCase:
    """One generated stream of tasks over shared objects, plus its oracle."""

    def __init__(self, seed: int, tracer: Tracer | None = None, kernel_cost: float = 1e-4):
        rnd = random.Random(seed)
        self.rt = make_runtime(tracer=tracer)
        self.rt.tracer = tracer if tracer is not None else self.rt.tracer
        n_objects = rnd.randint(1, 8)
        self.objects = []
        self.shadows = []
        for _ in range(n_objects):
            size = rnd.choice([16, 32, 64, 128, 256])
            self.objects.append(self.rt.create_object((size,), dtype=np.uint8))
            self.shadows.append(np.zeros(size, dtype=np.uint8))
        self._kernels: dict = {}
        self.tasks = []
        self.task_args: dict[int, list[tuple[int, AccessMode]]] = {}
        n_tasks = rnd.randint(1, 64)
        for t_idx in range(n_tasks):
            argc = rnd.randint(1, min(3, n_objects))
            obj_ids = rnd.sample(range(n_objects), argc)
            modes = tuple(
                rnd.choice([AccessMode.READ, AccessMode.WRITE, AccessMode.READ_WRITE])
                for _ in range(argc)
            )
            salt = rnd.randint(0, 1 << 30)
            kref, body = self._kernel_for(modes, salt, kernel_cost)
            pref = rnd.choice([DeviceType.HOST, DeviceType.GPU_SIM])
            task = self.rt.submit_task(
                kref,
                [(self.objects[i], m) for i, m in zip(obj_ids, modes)],
                device_type=pref,
            )
            self.tasks.append(task)
            self.task_args[task.uid] = [(i, m) for i, m in zip(obj_ids, modes)]
            body([self.shadows[i] for i in obj_ids], None, None)  # serial oracle

    def _kernel_for(self, modes, salt, cost):
        key = (modes, salt)
        if key not in self._kernels:
            body = make_mix_body(modes, salt)
            kref = self.rt.register_kernel(f"mix_{len(self._kernels)}_{salt}", body=body, cost=cost)
            self._kernels[key] = (kref, body)
        return self._kernels[key]

    def run(self) -> None:
        self.rt.wait_all(self.tasks)

    def check_serial_equivalence(self) -> None:
        for obj, shadow in zip(self.objects, self.shadows):
            got = peek_bytes(self.rt, obj)
            assert np.array_equal(got, shadow), "final bytes differ from serial order"

    def conflicting_pairs(self):
        for a in self.tasks:
            for b in self.tasks:
                if a.uid >= b.uid:
                    continue
                amap = dict(self.task_args[a.uid])
                for obj_idx, mode_b in self.task_args[b.uid]:
                    mode_a = amap.get(obj_idx)
                    if mode_a is None:
                        continue
                    if not (mode_a is AccessMode.READ and mode_b is AccessMode.READ):
                        yield a.uid, b.uid
                        break
