"""Two-rank ping-pong latency/bandwidth benchmark.

Each iteration round-trips a device-resident payload through ``mp_send``
in both directions and verifies byte identity. The echo handler forwards
the received object straight back and destroys its local handle, so the
lifetime machinery (destruction deferred past transmit completion) is on
the hot path. Under the virtual clock, latency is simulated transfer
time; under the wall clock it is measured.
"""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from ..comm import Comm, MobileRef, drive, exchange_all, shutdown_all
from ..devices import ClockMode, DeviceType
from ..errors import HrtError
from ..trace import Tracer
from .reporting import BenchReport
from .worlds import WorldConfig, make_inprocess_tcp_world, make_loopback_world


def _peek_bytes(rt, obj) -> np.ndarray:
    """Read the newest bytes without touching coherence or the clock."""
    from ..objects import CopyState

    if obj.host_state is CopyState.VALID:
        return rt.host_view(obj).copy()
    return rt.device_view(obj, obj.valid_devices()[0]).copy()


def parse_sizes(spec: str) -> list[int]:
    """Parse ``8..8388608`` (powers of two, inclusive) or ``8,64,512``."""
    if ".." in spec:
        lo, hi = (int(x) for x in spec.split("..", 1))
        sizes = []
        s = lo
        while s <= hi:
            sizes.append(s)
            s *= 2
        return sizes
    return [int(x) for x in spec.split(",")]


def run_pingpong(
    sizes: list[int],
    iterations: int = 100,
    path: str = "staging",
    transport: str = "loopback",
    clock: ClockMode = ClockMode.VIRTUAL,
    latency: float = 1e-5,
    bandwidth: float = 1e9,
    recv_cache_bytes: Optional[int] = None,
    tracer: Optional[Tracer] = None,
    verify: bool = True,
    seed: int = 99,
) -> BenchReport:
    if path not in ("staging", "direct"):
        raise HrtError(f"unknown path {path!r}")
    if transport == "tcp" and clock is ClockMode.VIRTUAL:
        raise HrtError("tcp transport requires the wall clock")
    cfg = WorldConfig(
        ranks=2,
        devices_per_rank=1,
        clock=clock,
        latency=latency,
        bandwidth=bandwidth,
        device_aware=(path == "direct"),
        recv_cache_bytes=recv_cache_bytes,
        with_host_device=False,
        capacity=max(64 << 20, 4 * max(sizes) + (32 << 20)),
    )
    comms = (
        make_loopback_world(cfg, tracer)
        if transport == "loopback"
        else make_inprocess_tcp_world(cfg, tracer)
    )
    rt0, rt1 = comms[0].runtime, comms[1].runtime

    arrived: list = []

    def h_pong(mobile, arg, ctx) -> None:
        # echo side: forward the received object and drop our handle
        ctx.comm.mp_send(MobileRef(0, 0), h_ping_id, arg)
        ctx.comm.runtime.destroy_object(arg)

    def h_ping(mobile, arg, ctx) -> None:
        arrived.append(arg)

    ids = [(c.register_handler(h_pong), c.register_handler(h_ping)) for c in comms]
    h_pong_id, h_ping_id = ids[0]
    for c in comms:
        c.create_mobile_object(b"pingpong")
    exchange_all(comms)

    def fill_kernel(views, geom, scratch) -> None:
        views[0][:] = views[0]

    for c in comms:
        c.runtime.register_kernel("touch", body=fill_kernel, cost=1e-6)

    virtual = clock is ClockMode.VIRTUAL
    shared_clock = rt0.clock
    rng = np.random.default_rng(seed)
    report = BenchReport(
        "pingpong",
        columns=["size_bytes", "iters", "mean_latency_s", "bandwidth_Bps"],
        meta={"path": path, "transport": transport},
    )

    for size in sizes:
        payload = rng.integers(0, 256, size=size, dtype=np.uint8)
        obj = rt0.create_object((size,), dtype=np.uint8)
        view = rt0.request_data(obj, write=True).get()
        np.copyto(view, payload)
        rt0.release(obj)
        # park the newest copy on the device so sends exercise device paths
        t = rt0.task().device(DeviceType.GPU_SIM)
        t.arg(obj).read_write()
        rt0.wait(t.submit("touch"))

        arrived.clear()
        elapsed = 0.0
        for it in range(iterations):
            t_a = shared_clock.now if virtual else time.perf_counter()
            comms[0].mp_send(MobileRef(1, 0), h_pong_id, obj)
            want = it + 1
            drive(comms, until=lambda: len(arrived) == want)
            wrapper = arrived[-1]
            drive(comms, until=lambda: wrapper.written)
            elapsed += (shared_clock.now if virtual else time.perf_counter()) - t_a
            if verify:
                got = _peek_bytes(rt0, wrapper)
                if not np.array_equal(got, payload):
                    raise HrtError(f"ping-pong payload mismatch at size {size}")
            rt0.destroy_object(wrapper)
        mean_rt = elapsed / iterations
        mean_latency = mean_rt / 2.0
        report.add(
            size_bytes=size,
            iters=iterations,
            mean_latency_s=mean_latency,
            bandwidth_Bps=(size / mean_latency) if mean_latency > 0 else float("inf"),
        )
        rt0.destroy_object(obj)
    report.meta["stats"] = [vars(c.stats).copy() for c in comms]
    report.meta["staging_copies"] = sum(c.stats.staging_copies for c in comms)
    shutdown_all(comms)
    return report
