import numpy as np
import pytest

from hrt import (
    AccessMode,
    DependencyCycle,
    DeviceType,
    HrtError,
    TaskFailed,
    TaskState,
)
from hrt.trace import Tracer

from conftest import RandomCase, make_runtime, peek_bytes


def order_kernel(rt, log, tag, cost=1e-5):
    def body(views, g, s):
        log.append(tag)

    return rt.register_kernel(f"log_{tag}", body=body, cost=cost)


def test_raw_dependency_orders_writer_before_reader():
    rt = make_runtime()
    obj = rt.create_object((32,), dtype=np.uint8)
    log = []
    kw = order_kernel(rt, log, "w")
    kr = order_kernel(rt, log, "r")
    t1 = rt.submit_task(kw, [(obj, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    t2 = rt.submit_task(kr, [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    rt.wait_all([t1, t2])
    assert log == ["w", "r"]


def test_rar_tasks_have_no_edge_and_may_overlap():
    rt = make_runtime(tracer=Tracer())
    tracer = rt.registry.tracer = rt.tracer
    obj = rt.create_object((32,), dtype=np.uint8)
    k = rt.register_kernel("ro", body=lambda v, g, s: None, cost=1e-4)
    t1 = rt.submit_task(k, [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    t2 = rt.submit_task(k, [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    rt.wait_all([t1, t2])
    kernels = [e for e in rt.tracer.events if e["kind"] == "kernel"]
    (a, b) = kernels
    assert a["start"] < b["end"] and b["start"] < a["end"]  # overlapped


def test_explicit_chain_runs_in_order():
    rt = make_runtime()
    log = []
    objs = [rt.create_object((8,), dtype=np.uint8) for _ in range(3)]
    tasks = []
    for i, obj in enumerate(objs):
        k = order_kernel(rt, log, str(i))
        t = rt.task().device(DeviceType.GPU_SIM)
        t.arg(obj).write()
        if tasks:
            t.depends_on(tasks[-1])
        tasks.append(t.submit(k))
    rt.wait_all(tasks)
    assert log == ["0", "1", "2"]


def test_diamond_dependency_runs_d_last():
    rt = make_runtime()
    log = []
    objs = [rt.create_object((8,), dtype=np.uint8) for _ in range(4)]
    ka = order_kernel(rt, log, "a")
    kb = order_kernel(rt, log, "b")
    kc = order_kernel(rt, log, "c")
    kd = order_kernel(rt, log, "d")
    a = rt.submit_task(ka, [(objs[0], AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    b = rt.submit_task(kb, [(objs[1], AccessMode.WRITE)], device_type=DeviceType.GPU_SIM,
                       explicit_deps=[a])
    c = rt.submit_task(kc, [(objs[2], AccessMode.WRITE)], device_type=DeviceType.GPU_SIM,
                       explicit_deps=[a])
    d = rt.submit_task(kd, [(objs[3], AccessMode.WRITE)], device_type=DeviceType.GPU_SIM,
                       explicit_deps=[b, c])
    rt.wait(d)
    assert log[0] == "a" and log[-1] == "d"


def test_cycle_detected_at_submit():
    rt = make_runtime()
    obj = rt.create_object((8,), dtype=np.uint8)
    k = rt.register_kernel("noop", body=lambda v, g, s: None, cost=1e-6)
    t1 = rt.submit_task(k, [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    with pytest.raises(DependencyCycle):
        rt.add_dependency(t1, t1)


def test_cross_cycle_detected():
    rt = make_runtime()
    k = rt.register_kernel("noop", body=lambda v, g, s: None, cost=1e-6)
    o1 = rt.create_object((8,), dtype=np.uint8)
    o2 = rt.create_object((8,), dtype=np.uint8)
    a = rt.submit_task(k, [(o1, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    b = rt.submit_task(k, [(o2, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    with pytest.raises(DependencyCycle):
        rt.add_dependency(a, b)
        rt.add_dependency(b, a)


def test_unknown_kernel_and_missing_entry_rejected():
    rt = make_runtime()
    obj = rt.create_object((8,), dtype=np.uint8)
    with pytest.raises(HrtError):
        rt.submit_task("nope", [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    rt.kernels.register_kernel("host_only", host=lambda v, g, s: None)
    with pytest.raises(HrtError):
        rt.submit_task("host_only", [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)


def test_progress_empty_system_zero_work():
    rt = make_runtime()
    assert rt.progress() == 0


def test_progress_moves_task_through_lifecycle():
    rt = make_runtime(tracer=Tracer())
    rt.tracer = rt.registry.tracer
    obj = rt.create_object((64,), dtype=np.uint8)
    view = rt.request_data(obj, write=True).get()
    view[:] = 1
    rt.release(obj)
    k = rt.register_kernel("t", body=lambda v, g, s: None, cost=1e-5)
    task = rt.submit_task(k, [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    rt.wait(task)
    states = [e["state"] for e in rt.tracer.events if e["kind"] == "task" and e["task_id"] == task.uid]
    assert states == ["submitted", "runnable", "issued", "running", "complete"]


def test_two_independent_tasks_issue_to_distinct_devices():
    rt = make_runtime(gpus=2)
    k = rt.register_kernel("k", body=lambda v, g, s: None, cost=1e-4)
    o1 = rt.create_object((32,), dtype=np.uint8)
    o2 = rt.create_object((32,), dtype=np.uint8)
    t1 = rt.submit_task(k, [(o1, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    t2 = rt.submit_task(k, [(o2, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    rt.wait_all([t1, t2])
    assert {t1.assigned_device, t2.assigned_device} == {1, 2}


def test_wait_on_complete_task_returns_immediately():
    rt = make_runtime()
    obj = rt.create_object((8,), dtype=np.uint8)
    k = rt.register_kernel("k", body=lambda v, g, s: None, cost=1e-6)
    t = rt.submit_task(k, [(obj, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    rt.wait(t)
    rt.wait(t)
    assert t.state is TaskState.COMPLETE


def test_failed_kernel_propagates_on_wait():
    rt = make_runtime()
    obj = rt.create_object((8,), dtype=np.uint8)

    def boom(views, g, s):
        raise ValueError("kernel exploded")

    k = rt.register_kernel("boom", body=boom, cost=1e-6)
    t = rt.submit_task(k, [(obj, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    with pytest.raises(TaskFailed):
        rt.wait(t)


def test_failure_poisons_dependents():
    rt = make_runtime()
    obj = rt.create_object((8,), dtype=np.uint8)

    def boom(views, g, s):
        raise ValueError("nope")

    kb = rt.register_kernel("boom", body=boom, cost=1e-6)
    kg = rt.register_kernel("good", body=lambda v, g, s: None, cost=1e-6)
    t1 = rt.submit_task(kb, [(obj, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    t2 = rt.submit_task(kg, [(obj, AccessMode.READ)], device_type=DeviceType.GPU_SIM)
    with pytest.raises(TaskFailed):
        rt.wait(t2)


def test_progress_liveness_bounded_passes():
    rt = make_runtime()
    obj = rt.create_object((64,), dtype=np.uint8)
    k = rt.register_kernel("k", body=lambda v, g, s: None, cost=1e-5)
    task = rt.submit_task(k, [(obj, AccessMode.WRITE)], device_type=DeviceType.GPU_SIM)
    for _ in range(50):
        rt.progress()
        if task.state is TaskState.COMPLETE:
            break
    assert task.state is TaskState.COMPLETE


def test_serial_equivalence_small_randomized():
    for seed in range(25):
        case = RandomCase(seed)
        case.run()
        case.check_serial_equivalence()


def test_scratch_region_zero_initialized():
    rt = make_runtime()
    obj = rt.create_object((8,), dtype=np.uint8)
    seen = {}

    def body(views, g, scratch):
        seen["scratch"] = scratch.copy()
        scratch[:] = 1

    k = rt.register_kernel("scr", body=body, cost=1e-6)
    t = rt.task().device(DeviceType.GPU_SIM)
    t.arg(obj).write()
    t.scratch(64)
    rt.wait(t.submit(k))
    assert seen["scratch"].shape == (64,)
    assert not seen["scratch"].any()
