import numpy as np
import pytest

from hrt import AccessMode, DeviceType, HrtError, LeaseConflict, UnsatisfiableEviction
from hrt.objects import CopyState, HostLease

from conftest import make_runtime, peek_bytes


def touch_kernel(rt):
    return rt.register_kernel("touch", body=lambda v, g, s: None, cost=1e-5)


def write_kernel(rt, value=5):
    name = f"write{value}"
    if name in rt.kernels:
        return rt.kernels.get(name)

    def body(views, g, s):
        views[0][:] = value

    return rt.register_kernel(name, body=body, cost=1e-5)


def run_write_task(rt, obj, value=5, device=DeviceType.GPU_SIM):
    k = write_kernel(rt, value)
    t = rt.task().device(device)
    t.arg(obj).write()
    h = t.submit(k)
    rt.wait(h)
    return h


def test_create_object_sizes():
    rt = make_runtime()
    obj = rt.create_object((1024, 1024), dtype=np.float64)
    assert obj.total_size == 8 << 20
    one = rt.create_object((1,), element_size=1)
    assert one.total_size == 1
    with pytest.raises(HrtError):
        rt.create_object((0,), element_size=1)


def test_object_starts_with_no_allocations():
    rt = make_runtime()
    obj = rt.create_object((64,), dtype=np.uint8)
    assert obj.copies == {}
    assert obj.host_region is None


def test_request_data_read_pulls_from_device_and_keeps_copies():
    rt = make_runtime(capacity=1 << 20)
    obj = rt.create_object((128,), dtype=np.uint8)
    run_write_task(rt, obj, value=9)
    device = obj.valid_devices()[0]
    view = rt.request_data(obj).get()
    assert np.all(view == 9)
    assert obj.host_state is CopyState.VALID
    assert obj.copies[device].state is CopyState.VALID  # read keeps device copy


def test_request_write_invalidates_device_copies():
    rt = make_runtime()
    obj = rt.create_object((128,), dtype=np.uint8)
    run_write_task(rt, obj, value=9)
    device = obj.valid_devices()[0]
    view = rt.request_data(obj, write=True).get()
    view[:] = 1
    assert obj.copies[device].state is CopyState.STALE
    rt.release(obj)
    assert obj.host_state is CopyState.VALID
    assert obj.valid_devices() == []  # host is the sole valid copy


def test_conflicting_lease_rejected():
    rt = make_runtime()
    obj = rt.create_object((16,), dtype=np.uint8)
    rt.request_data(obj, write=True).get()
    with pytest.raises(LeaseConflict):
        rt.request_data(obj)
    rt.release(obj)
    rt.request_data(obj).get()
    rt.request_data(obj).get()  # two readers fine
    with pytest.raises(LeaseConflict):
        rt.request_data(obj, write=True)


def test_release_without_lease_errors():
    rt = make_runtime()
    obj = rt.create_object((16,), dtype=np.uint8)
    with pytest.raises(HrtError):
        rt.release(obj)
    rt.request_data(obj).get()
    rt.release(obj)
    with pytest.raises(HrtError):
        rt.release(obj)


def test_write_lease_blocks_writer_tasks_until_release():
    rt = make_runtime()
    obj = rt.create_object((16,), dtype=np.uint8)
    view = rt.request_data(obj, write=True).get()
    view[:] = 3
    k = write_kernel(rt, 8)
    t = rt.task().device(DeviceType.GPU_SIM)
    t.arg(obj).write()
    handle = t.submit(k)
    for _ in range(20):
        rt.progress()
    assert handle.state.value in ("submitted", "blocked")
    rt.release(obj)
    rt.wait(handle)
    assert np.all(peek_bytes(rt, obj) == 8)


def test_copy_to_region_matches_request_data():
    rt = make_runtime()
    obj = rt.create_object((256,), dtype=np.uint8)
    run_write_task(rt, obj, value=11)
    dest = np.zeros(256, dtype=np.uint8)
    rt.copy_to_region(obj, dest).get()
    via_lease = rt.request_data(obj).get().copy()
    rt.release(obj)
    assert np.array_equal(dest, via_lease)


def test_copy_to_region_undersized_errors():
    rt = make_runtime()
    obj = rt.create_object((256,), dtype=np.uint8)
    with pytest.raises(HrtError):
        rt.copy_to_region(obj, np.zeros(16, dtype=np.uint8))


def test_copy_to_region_host_valid_plain_copy():
    rt = make_runtime()
    obj = rt.create_object((64,), dtype=np.uint8)
    v = rt.request_data(obj, write=True).get()
    v[:] = 42
    rt.release(obj)
    dest = np.zeros(64, dtype=np.uint8)
    rt.copy_to_region(obj, dest).get()
    assert np.all(dest == 42)


def test_lru_eviction_order():
    rt = make_runtime(capacity=1 << 20)
    a = rt.create_object((256,), dtype=np.uint8)
    b = rt.create_object((256,), dtype=np.uint8)
    run_write_task(rt, a)  # a gets the earlier lru tick
    run_write_task(rt, b)
    device = a.valid_devices()[0]
    freed = rt.evict_lru(device, 256)
    assert freed >= 256
    assert a.copies[device].allocation is None
    assert b.copies[device].allocation is not None


def test_eviction_preserves_sole_valid_bytes():
    rt = make_runtime()
    obj = rt.create_object((512,), dtype=np.uint8)
    run_write_task(rt, obj, value=7)
    device = obj.valid_devices()[0]
    assert obj.host_state is not CopyState.VALID
    rt.evict_lru(device, 512)
    assert obj.host_state is CopyState.VALID
    assert np.all(peek_bytes(rt, obj) == 7)


def test_eviction_unsatisfiable_when_all_objects_busy():
    rt = make_runtime()
    obj = rt.create_object((256,), dtype=np.uint8)
    k = rt.register_kernel("slow", body=lambda v, g, s: None, cost=1.0)
    t = rt.task().device(DeviceType.GPU_SIM)
    t.arg(obj).write()
    handle = t.submit(k)
    for _ in range(10):
        rt.progress(advance=False)
    device = handle.assigned_device
    with pytest.raises(UnsatisfiableEviction):
        rt.evict_lru(device, 1 << 30)


def test_oom_triggers_eviction_automatically():
    rt = make_runtime(capacity=2048)
    objs = [rt.create_object((1024,), dtype=np.uint8) for _ in range(4)]
    for i, obj in enumerate(objs):
        run_write_task(rt, obj, value=i + 1)
    for i, obj in enumerate(objs):
        assert np.all(peek_bytes(rt, obj) == i + 1)


def test_destroy_unused_frees_immediately():
    rt = make_runtime()
    obj = rt.create_object((128,), dtype=np.uint8)
    run_write_task(rt, obj)
    device = obj.valid_devices()[0]
    rt.destroy_object(obj)
    assert obj.destroyed
    assert obj.copies == {}
    assert rt.registry.device(device).allocator.live_bytes == 0


def test_destroy_deferred_while_task_pending():
    rt = make_runtime()
    obj = rt.create_object((128,), dtype=np.uint8)
    k = write_kernel(rt, 4)
    t = rt.task().device(DeviceType.GPU_SIM)
    t.arg(obj).write()
    handle = t.submit(k)
    rt.destroy_object(obj)
    assert not obj.destroyed
    rt.wait(handle)
    assert obj.destroyed


def test_double_destroy_is_noop():
    rt = make_runtime()
    obj = rt.create_object((16,), dtype=np.uint8)
    rt.destroy_object(obj)
    rt.destroy_object(obj)
    assert obj.destroyed
