"""Construction helpers for single- and multi-rank benchmark setups."""

from __future__ import annotations

import socket
from dataclasses import dataclass
from typing import Optional

from ..comm import Comm
from ..devices import (
    ClockMode,
    DeviceDescriptor,
    DeviceRegistry,
    DeviceType,
    VirtualClock,
    WallClock,
)
from ..runtime import Runtime
from ..trace import NullTracer, Tracer
from ..transport import LoopbackFabric, TcpTransport


@dataclass
class WorldConfig:
    ranks: int = 1
    devices_per_rank: int = 1
    clock: ClockMode = ClockMode.VIRTUAL
    capacity: int = 256 << 20
    latency: float = 1e-5
    bandwidth: float = 1e9
    streams: int = 5
    device_aware: bool = False
    recv_cache_bytes: Optional[int] = None
    shared_host_bus: bool = False
    with_host_device: bool = True
    host_capacity: int = 64 << 20


def device_id_for(rank: int, local_index: int) -> int:
    # device ids are unique across the whole world so trace lanes never collide
    return rank * 100 + local_index


def build_rank_runtime(
    cfg: WorldConfig, rank: int, clock, tracer: Optional[Tracer] = None
) -> Runtime:
    registry = DeviceRegistry(
        clock_mode=cfg.clock,
        shared_host_bus=cfg.shared_host_bus,
        tracer=tracer,
        clock=clock,
    )
    for j in range(cfg.devices_per_rank):
        registry.register_device(
            DeviceDescriptor(
                device_id=device_id_for(rank, j),
                device_type=DeviceType.GPU_SIM,
                memory_capacity=cfg.capacity,
                compute_stream_count=cfg.streams,
                transfer_latency=cfg.latency,
                transfer_bandwidth=cfg.bandwidth,
                clock_mode=cfg.clock,
            )
        )
    if cfg.with_host_device:
        registry.register_device(
            DeviceDescriptor(
                device_id=device_id_for(rank, 99),
                device_type=DeviceType.HOST,
                memory_capacity=cfg.host_capacity,
                compute_stream_count=cfg.streams,
                clock_mode=cfg.clock,
            )
        )
    return Runtime(registry)


def make_clock(cfg: WorldConfig):
    return VirtualClock() if cfg.clock is ClockMode.VIRTUAL else WallClock()


def make_loopback_world(cfg: WorldConfig, tracer: Optional[Tracer] = None) -> list[Comm]:
    clock = make_clock(cfg)
    fabric = LoopbackFabric(cfg.ranks)
    comms = []
    for r in range(cfg.ranks):
        runtime = build_rank_runtime(cfg, r, clock, tracer)
        comms.append(
            Comm(
                fabric.endpoint(r, device_aware=cfg.device_aware),
                runtime,
                recv_cache_bytes=cfg.recv_cache_bytes,
            )
        )
    return comms


def free_ports(count: int) -> list[int]:
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def make_inprocess_tcp_world(cfg: WorldConfig, tracer: Optional[Tracer] = None) -> list[Comm]:
    """All ranks in one process over localhost sockets (wall clock)."""
    ports = free_ports(cfg.ranks)
    peers = [f"127.0.0.1:{p}" for p in ports]
    transports = [TcpTransport(r, peers, device_aware=cfg.device_aware) for r in range(cfg.ranks)]
    while not all(t.ready for t in transports):
        for t in transports:
            t.establish()
    comms = []
    for r in range(cfg.ranks):
        clock = make_clock(cfg)
        runtime = build_rank_runtime(cfg, r, clock, tracer)
        comms.append(Comm(transports[r], runtime, recv_cache_bytes=cfg.recv_cache_bytes))
    return comms
