import numpy as np
import pytest

from hrt.errors import HrtError, TransportClosed
from hrt.transport import FT_DATA, FT_HEADER, LoopbackFabric, TcpTransport
from hrt.bench.worlds import free_ports


def test_loopback_ordered_per_pair():
    fabric = LoopbackFabric(2)
    a = fabric.endpoint(0)
    b = fabric.endpoint(1)
    for i in range(10):
        a.send(1, FT_HEADER, bytes([i]))
    got = [data[0] for src, ftype, data in b.poll()]
    assert got == list(range(10))


def test_loopback_self_send():
    fabric = LoopbackFabric(1)
    a = fabric.endpoint(0)
    a.send(0, FT_DATA, b"self")
    assert a.poll() == [(0, FT_DATA, b"self")]


def test_loopback_unknown_rank():
    fabric = LoopbackFabric(2)
    a = fabric.endpoint(0)
    with pytest.raises(HrtError):
        a.send(5, FT_HEADER, b"x")


def test_loopback_closed_send_errors():
    fabric = LoopbackFabric(2)
    a = fabric.endpoint(0)
    a.close()
    with pytest.raises(TransportClosed):
        a.send(1, FT_HEADER, b"x")


def make_tcp_pair():
    ports = free_ports(2)
    peers = [f"127.0.0.1:{p}" for p in ports]
    t0 = TcpTransport(0, peers)
    t1 = TcpTransport(1, peers)
    while not (t0.ready and t1.ready):
        t0.establish()
        t1.establish()
    return t0, t1


def drain(transport, count, budget=20000):
    out = []
    for _ in range(budget):
        out.extend(transport.poll())
        if len(out) >= count:
            return out
    raise AssertionError(f"only {len(out)} of {count} frames arrived")


def test_tcp_pair_round_trip():
    t0, t1 = make_tcp_pair()
    try:
        t0.send(1, FT_HEADER, b"hello")
        t0.send(1, FT_DATA, b"world")
        frames = drain(t1, 2)
        assert frames == [(0, FT_HEADER, b"hello"), (0, FT_DATA, b"world")]
        t1.send(0, FT_HEADER, b"back")
        assert drain(t0, 1) == [(1, FT_HEADER, b"back")]
    finally:
        t0.close()
        t1.close()


def test_tcp_large_frame_chunked_delivery():
    t0, t1 = make_tcp_pair()
    try:
        rng = np.random.default_rng(0)
        payload = rng.integers(0, 256, 8 << 20, dtype=np.uint8).tobytes()
        receipt = t0.send(1, FT_DATA, payload)
        frames = []
        for _ in range(200000):
            t0.progress()
            frames.extend(t1.poll())
            if frames:
                break
        assert receipt.done
        assert frames[0][2] == payload
    finally:
        t0.close()
        t1.close()


def test_tcp_self_send_shortcut():
    ports = free_ports(1)
    t = TcpTransport(0, [f"127.0.0.1:{ports[0]}"])
    try:
        t.send(0, FT_HEADER, b"me")
        assert t.poll() == [(0, FT_HEADER, b"me")]
    finally:
        t.close()


def test_tcp_ordering_many_frames():
    t0, t1 = make_tcp_pair()
    try:
        for i in range(50):
            t0.send(1, FT_DATA, i.to_bytes(4, "little"))
        frames = drain(t1, 50)
        values = [int.from_bytes(d, "little") for _, _, d in frames]
        assert values == list(range(50))
    finally:
        t0.close()
        t1.close()
