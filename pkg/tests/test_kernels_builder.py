import itertools

import numpy as np
import pytest

from hrt import DeviceType, HrtError, ThreadGeometry
from hrt.kernels import KernelDefinition, KernelRegistry

from conftest import make_runtime, peek_bytes


def dgemm_body(views, geometry, scratch):
    a, b, c = views
    n = a.shape[0]
    rows = min(geometry.extent(1), n)
    cols = min(geometry.extent(0), n)
    c[:rows, :cols] = a[:rows, :] @ b[:, :cols]


def triple_loop_matmul(a, b):
    n, m = a.shape[0], b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_register_kernel_duplicate_and_empty():
    reg = KernelRegistry()
    reg.register_kernel("dgemm", body=dgemm_body)
    with pytest.raises(HrtError):
        reg.register_kernel("dgemm", body=dgemm_body)
    with pytest.raises(HrtError):
        reg.register(KernelDefinition("empty", {}))


def test_geometry_validation_and_work_items():
    g = ThreadGeometry((32, 32, 1), (32, 32, 1))
    assert g.total_work_items == 32 * 32 * 32 * 32
    with pytest.raises(HrtError):
        ThreadGeometry((0, 1, 1), (1, 1, 1))


def run_dgemm(rt, n, device_type, seed=0):
    rng = np.random.default_rng(seed)
    a_host = rng.random((n, n))
    b_host = rng.random((n, n))
    a = rt.create_object((n, n), dtype=np.float64)
    b = rt.create_object((n, n), dtype=np.float64)
    c = rt.create_object((n, n), dtype=np.float64)
    for obj, src in ((a, a_host), (b, b_host)):
        view = rt.request_data(obj, write=True).get()
        np.copyto(view, src)
        rt.release(obj)
    groups = (max(1, n // 8), max(1, n // 8), 1)
    t = rt.task()
    t.arg(a).read()
    t.arg(b).read()
    t.arg(c).write().dim_x()
    t.set_threads(groups, (8, 8, 1))
    t.device(device_type)
    rt.wait(t.submit("dgemm"))
    out = rt.request_data(c).get().copy()
    rt.release(c)
    return a_host, b_host, out


def test_dgemm_matches_triple_loop_oracle():
    rt = make_runtime(capacity=16 << 20)
    rt.register_kernel("dgemm", body=dgemm_body)
    a, b, out = run_dgemm(rt, 24, DeviceType.GPU_SIM)
    assert np.allclose(out, triple_loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_write_only_kernel_zeroing():
    rt = make_runtime()

    def zero(views, g, s):
        views[0][:] = 0.0

    rt.register_kernel("zero", body=zero)
    c = rt.create_object((16, 16), dtype=np.float64)
    t = rt.task().device(DeviceType.GPU_SIM)
    t.arg(c).write()
    rt.wait(t.submit("zero"))
    assert not peek_bytes(rt, c).any()


def test_host_and_sim_give_identical_results():
    outs = {}
    for device_type in (DeviceType.GPU_SIM, DeviceType.HOST):
        rt = make_runtime(capacity=16 << 20)
        rt.register_kernel("dgemm", body=dgemm_body)
        _, _, out = run_dgemm(rt, 16, device_type, seed=42)
        outs[device_type] = out
    assert np.array_equal(outs[DeviceType.HOST], outs[DeviceType.GPU_SIM])  # bitwise


def test_backend_equivalence_random_kernels():
    rng = np.random.default_rng(9)

    def fold(views, g, s):
        views[1][:] = (views[0].astype(np.uint64) * 7 + 13).astype(np.uint8)

    results = {}
    for device_type in (DeviceType.HOST, DeviceType.GPU_SIM):
        rt = make_runtime()
        rt.register_kernel("fold", body=fold)
        src = rt.create_object((256,), dtype=np.uint8)
        dst = rt.create_object((256,), dtype=np.uint8)
        view = rt.request_data(src, write=True).get()
        view[:] = rng.integers(0, 255, 256, dtype=np.uint8) if device_type is DeviceType.HOST else results["input"]
        if device_type is DeviceType.HOST:
            results["input"] = view.copy()
        rt.release(src)
        t = rt.task().device(device_type)
        t.arg(src).read()
        t.arg(dst).write()
        rt.wait(t.submit("fold"))
        results[device_type] = peek_bytes(rt, dst)
    assert np.array_equal(results[DeviceType.HOST], results[DeviceType.GPU_SIM])


def test_builder_setter_order_insensitive():
    seen = []

    def probe(views, g, s):
        seen.append((len(views), g.group_counts, g.local_sizes, s.shape if s is not None else None))

    setups = []

    def build(rt, obj, order):
        t = rt.task()
        steps = {
            "arg": lambda: t.arg(obj).read_write(),
            "threads": lambda: t.set_threads((2, 2, 1), (4, 1, 1)),
            "device": lambda: t.device(DeviceType.GPU_SIM),
            "scratch": lambda: t.scratch(32),
        }
        for name in order:
            steps[name]()
        return t.submit("probe")

    for order in itertools.permutations(["arg", "threads", "device", "scratch"]):
        rt = make_runtime()
        rt.register_kernel("probe", body=probe)
        obj = rt.create_object((8,), dtype=np.uint8)
        rt.wait(build(rt, obj, order))
    assert len(set(seen)) == 1  # every permutation produced the same task shape


def test_builder_requires_device_and_is_consumed():
    rt = make_runtime()
    rt.register_kernel("k", body=lambda v, g, s: None)
    obj = rt.create_object((8,), dtype=np.uint8)
    t = rt.task()
    t.arg(obj).read()
    with pytest.raises(HrtError):
        t.submit("k")
    t.device(DeviceType.GPU_SIM)
    t.submit("k")
    with pytest.raises(HrtError):
        t.submit("k")


def test_dim_x_accepted_and_ignored():
    rt = make_runtime()
    rt.register_kernel("k", body=lambda v, g, s: None)
    obj = rt.create_object((8,), dtype=np.uint8)
    t = rt.task().device(DeviceType.GPU_SIM)
    t.arg(obj).write().dim_x().dim_y().dim_z()
    rt.wait(t.submit("k"))
