"""Matrix-multiply throughput benchmark.

Per iteration the three matrices are allocated on the device, the two
inputs are transferred, and the multiply kernel runs; results are not read
back. All iterations are independent, so with several compute streams the
input transfers of later iterations pipeline under earlier kernels, and
with several devices iterations fan out across them. The last iteration's
output is checked against an independently computed product.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..devices import ClockMode, DeviceType
from ..errors import HrtError
from ..kernels import ThreadGeometry
from ..objects import AccessMode
from ..runtime import Runtime
from ..trace import Tracer
from .reporting import BenchReport
from .worlds import WorldConfig, build_rank_runtime, make_clock


def dgemm_body(views: list, geometry: ThreadGeometry, scratch) -> None:
    a, b, c = views
    n = a.shape[0]
    rows = min(geometry.extent(1), n)
    cols = min(geometry.extent(0), n)
    c[:rows, :cols] = a[:rows, :] @ b[:, :cols]


def transfer_seconds(n: int, latency: float, bandwidth: float) -> float:
    nbytes = n * n * 8
    return latency + (nbytes / bandwidth if bandwidth != float("inf") else 0.0)


def expected_makespan(
    n: int, iterations: int, devices: int, streams: int, latency: float, bandwidth: float,
    kernel_cost: float,
) -> float:
    """Pipeline model of the virtual-clock makespan for one matrix size.

    Tasks round-robin over devices; each task enqueues two input transfers
    on its device's host-to-device stream and its kernel on the next
    compute stream once both transfers finish.
    """
    t_t = transfer_seconds(n, latency, bandwidth)
    h2d_free = [0.0] * devices
    stream_free = [[0.0] * streams for _ in range(devices)]
    rr = [0] * devices
    makespan = 0.0
    for k in range(iterations):
        d = min(range(devices), key=lambda i: (rr[i], i))
        start_a = h2d_free[d]
        end_a = start_a + t_t
        end_b = end_a + t_t
        h2d_free[d] = end_b
        s = rr[d] % streams
        rr[d] += 1
        k_start = max(end_b, stream_free[d][s])
        k_end = k_start + kernel_cost
        stream_free[d][s] = k_end
        makespan = max(makespan, k_end)
    return makespan


def run_dgemm_bench(
    sizes: list[int],
    iterations: int = 100,
    devices: int = 1,
    streams: int = 5,
    clock: ClockMode = ClockMode.VIRTUAL,
    latency: float = 1e-5,
    bandwidth: float = 1e9,
    kernel_cost: Optional[float] = None,
    kernel_cost_factor: float = 4.0,
    capacity: int = 256 << 20,
    shared_host_bus: bool = False,
    tracer: Optional[Tracer] = None,
    seed: int = 2024,
) -> BenchReport:
    report = BenchReport(
        "dgemm",
        columns=["n", "iters", "devices", "streams", "makespan_s", "model_makespan_s"],
        meta={"latency": latency, "bandwidth": bandwidth},
    )
    rng = np.random.default_rng(seed)
    for n in sizes:
        cfg = WorldConfig(
            ranks=1,
            devices_per_rank=devices,
            clock=clock,
            capacity=capacity,
            latency=latency,
            bandwidth=bandwidth,
            streams=streams,
            shared_host_bus=shared_host_bus,
            with_host_device=False,
        )
        clk = make_clock(cfg)
        rt = build_rank_runtime(cfg, 0, clk, tracer)
        cost = kernel_cost
        if cost is None:
            cost = kernel_cost_factor * transfer_seconds(n, latency, bandwidth)
        kref = rt.register_kernel("dgemm", body=dgemm_body, cost=cost)

        a_host = rng.random((n, n))
        b_host = rng.random((n, n))
        groups = (math.ceil(n / 32), math.ceil(n / 32), 1)
        geometry = ThreadGeometry(groups, (32, 32, 1))

        triples = []
        for _ in range(iterations):
            a = rt.create_object((n, n), dtype=np.float64)
            b = rt.create_object((n, n), dtype=np.float64)
            c = rt.create_object((n, n), dtype=np.float64)
            for obj, src in ((a, a_host), (b, b_host)):
                view = rt.request_data(obj, write=True).get()
                np.copyto(view, src)
                rt.release(obj)
            triples.append((a, b, c))

        t0 = clk.now
        tasks = []
        for a, b, c in triples:
            t = rt.task().device(DeviceType.GPU_SIM)
            t.arg(a).read()
            t.arg(b).read()
            t.arg(c).write().dim_x()
            t.set_threads(groups, (32, 32, 1))
            tasks.append(t.submit(kref))
        rt.wait_all(tasks)
        makespan = clk.now - t0

        c_last = rt.request_data(triples[-1][2]).get()
        oracle = np.einsum("ik,kj->ij", a_host, b_host)
        if not np.allclose(c_last, oracle, rtol=1e-10, atol=1e-12):
            raise HrtError(f"dgemm result mismatch at n={n}")
        rt.release(triples[-1][2])
        for a, b, c in triples:
            rt.destroy_object(a)
            rt.destroy_object(b)
            rt.destroy_object(c)

        model = (
            expected_makespan(n, iterations, devices, streams, latency, bandwidth, cost)
            if clock is ClockMode.VIRTUAL
            else float("nan")
        )
        report.add(
            n=n,
            iters=iterations,
            devices=devices,
            streams=streams,
            makespan_s=makespan,
            model_makespan_s=model,
        )
    return report
