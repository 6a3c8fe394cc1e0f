"""``hrt-bench``: benchmark drivers for the runtime.

    hrt-bench pingpong --sizes 8..8388608 --iters 100 --path staging
    hrt-bench dgemm --n 64,128,256,512,768,1024 --devices 4 --streams 5
    hrt-bench jacobi3d --domain 64,64,64 --ranks 2 --devices 2 --od 2 --check
"""

from __future__ import annotations

import json
import os
import sys

import click

from ..config import env_bool, env_int
from ..devices import ClockMode
from ..trace import Tracer
from .dgemm import run_dgemm_bench
from .jacobi import run_jacobi3d
from .pingpong import parse_sizes, run_pingpong
from .reporting import BenchReport
from .timeline import emit_timeline


def _clock(name: str) -> ClockMode:
    return ClockMode.VIRTUAL if name == "virtual" else ClockMode.WALL


def _ints(spec: str) -> list[int]:
    return [int(x) for x in spec.split(",") if x]


@click.group()
def main() -> None:
    """Benchmarks for the heterogeneous tasking runtime."""


@main.command()
@click.option("--sizes", default="8..8388608", show_default=True, help="bytes, lo..hi powers of two or comma list")
@click.option("--iters", default=100, show_default=True)
@click.option("--path", type=click.Choice(["staging", "direct"]), default="staging", show_default=True)
@click.option("--transport", default=lambda: os.environ.get("HRT_TRANSPORT", "loopback"),
              type=click.Choice(["loopback", "tcp"]))
@click.option("--clock", default="virtual", type=click.Choice(["virtual", "wall"]), show_default=True)
@click.option("--latency", default=1e-5, show_default=True, help="simulated link latency (s)")
@click.option("--bandwidth", default=1e9, show_default=True, help="simulated link bandwidth (B/s)")
@click.option("--report", "report_path", default=None, help="CSV/JSON output path")
@click.option("--trace", "trace_path", default=None, help="JSONL trace output path")
def pingpong(sizes, iters, path, transport, clock, latency, bandwidth, report_path, trace_path):
    """Round-trip latency/bandwidth across two ranks."""
    clock_mode = _clock(clock)
    if transport == "tcp" and clock_mode is ClockMode.VIRTUAL:
        clock_mode = ClockMode.WALL
    tracer = Tracer(trace_path) if trace_path else None
    rep = run_pingpong(
        parse_sizes(sizes), iters, path=path, transport=transport,
        clock=clock_mode, latency=latency, bandwidth=bandwidth, tracer=tracer,
    )
    click.echo(rep.csv_text(), nl=False)
    if report_path:
        rep.write(report_path)
    if tracer:
        tracer.close()


@main.command()
@click.option("--n", "sizes", default="64,128,256,512,768,1024", show_default=True)
@click.option("--iters", default=100, show_default=True)
@click.option("--devices", default=1, show_default=True)
@click.option("--streams", type=int, default=lambda: env_int("HRT_STREAMS", 5))
@click.option("--clock", default="virtual", type=click.Choice(["virtual", "wall"]), show_default=True)
@click.option("--latency", default=1e-5, show_default=True)
@click.option("--bandwidth", default=1e9, show_default=True)
@click.option("--kernel-cost", default=None, type=float, help="virtual kernel seconds (default 4x transfer)")
@click.option("--capacity-mb", default=256, show_default=True)
@click.option("--report", "report_path", default=None)
@click.option("--trace", "trace_path", default=None)
def dgemm(sizes, iters, devices, streams, clock, latency, bandwidth, kernel_cost,
          capacity_mb, report_path, trace_path):
    """Matrix-multiply throughput over simulated devices."""
    tracer = Tracer(trace_path) if trace_path else None
    rep = run_dgemm_bench(
        _ints(sizes), iterations=iters, devices=devices, streams=streams,
        clock=_clock(clock), latency=latency, bandwidth=bandwidth,
        kernel_cost=kernel_cost, capacity=capacity_mb << 20, tracer=tracer,
    )
    click.echo(rep.csv_text(), nl=False)
    if report_path:
        rep.write(report_path)
    if tracer:
        tracer.close()


@main.command()
@click.option("--domain", default="64,64,64", show_default=True)
@click.option("--ranks", default=1, show_default=True)
@click.option("--devices", default=1, show_default=True, help="devices per rank")
@click.option("--od", default=1, show_default=True, help="over-decomposition level")
@click.option("--grid", default=None, help="explicit chunk grid cx,cy,cz")
@click.option("--steps", default=10, show_default=True)
@click.option("--check", is_flag=True, help="verify against the single-array reference")
@click.option("--clock", default="virtual", type=click.Choice(["virtual", "wall"]), show_default=True)
@click.option("--latency", default=1e-5, show_default=True)
@click.option("--bandwidth", default=1e9, show_default=True)
@click.option("--streams", type=int, default=lambda: env_int("HRT_STREAMS", 5))
@click.option("--update-cost", default=4e-8, show_default=True, help="virtual seconds per interior cell")
@click.option("--face-cost", default=1e-9, show_default=True, help="virtual seconds per face cell")
@click.option("--device-aware", default=lambda: env_bool("HRT_DEVICE_AWARE"), is_flag=True)
@click.option("--report", "report_path", default=None)
@click.option("--trace", "trace_path", default=None)
@click.option("--timeline", "timeline_path", default=None, help="write the device timeline JSON")
def jacobi3d(domain, ranks, devices, od, grid, steps, check, clock, latency, bandwidth,
             streams, update_cost, face_cost, device_aware, report_path, trace_path,
             timeline_path):
    """Halo-exchange Jacobi solver over chunked mobile objects."""
    tracer = Tracer(trace_path) if (trace_path or timeline_path) else None
    rep, checksum, _ = run_jacobi3d(
        tuple(_ints(domain)), ranks=ranks, devices_per_rank=devices, od=od,
        grid=tuple(_ints(grid)) if grid else None, steps=steps,
        clock=_clock(clock), latency=latency, bandwidth=bandwidth, streams=streams,
        update_cost_per_cell=update_cost, face_cost_per_cell=face_cost,
        device_aware=device_aware, check=check, tracer=tracer,
    )
    click.echo(rep.csv_text(), nl=False)
    click.echo(f"checksum={checksum!r}")
    click.echo(f"makespan_s={rep.meta['makespan_s']!r}")
    if check:
        click.echo("check=ok")
    if report_path:
        rep.write(report_path)
    if timeline_path and tracer:
        emit_timeline(tracer.events, timeline_path)
    if tracer:
        tracer.close()


if __name__ == "__main__":
    sys.exit(main())
