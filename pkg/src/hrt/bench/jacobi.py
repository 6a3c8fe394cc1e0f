"""Distributed Jacobi3D proxy application.

The global domain is split into cuboid chunks, each wrapped in a mobile
object pinned to a device. Per step every chunk packs its boundary planes
into halo objects (device kernels), ships them to its neighbors with
``mp_send``, unpacks arrived halos into its ghost shell, then applies the
7-point update

    u'[i,j,k] = (u[i-1,j,k] + u[i+1,j,k] + u[i,j-1,k] + u[i,j+1,k]
                 + u[i,j,k-1] + u[i,j,k+1]) / 6

with Dirichlet boundary faces held at 1.0 and the interior starting at
0.0. Two ghosted buffers alternate per step; all ordering falls out of
the runtime's implicit dependencies. Results are bitwise independent of
the chunk grid, over-decomposition level, and rank count, because each
cell update performs the identical float operations in the identical
order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..comm import Comm, MobileRef, drive, exchange_all, shutdown_all
from ..devices import ClockMode, DeviceType
from ..errors import HrtError
from ..kernels import ThreadGeometry
from ..objects import HeteroObject
from ..runtime import Runtime
from ..trace import Tracer
from .reporting import BenchReport
from .worlds import WorldConfig, device_id_for, make_loopback_world

BOUNDARY = 1.0

# face f = (axis, side): side 0 is the low face, 1 the high face
FACES = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]


def opposite(face: int) -> int:
    axis, side = FACES[face]
    return axis * 2 + (1 - side)


def jacobi_reference(domain: tuple[int, int, int], steps: int) -> np.ndarray:
    """Single-array solver used as the independent result oracle."""
    x, y, z = domain
    u = np.zeros((x + 2, y + 2, z + 2), dtype=np.float64)
    u[0, :, :] = u[-1, :, :] = BOUNDARY
    u[:, 0, :] = u[:, -1, :] = BOUNDARY
    u[:, :, 0] = u[:, :, -1] = BOUNDARY
    for _ in range(steps):
        nxt = u.copy()
        nxt[1:-1, 1:-1, 1:-1] = (
            u[:-2, 1:-1, 1:-1]
            + u[2:, 1:-1, 1:-1]
            + u[1:-1, :-2, 1:-1]
            + u[1:-1, 2:, 1:-1]
            + u[1:-1, 1:-1, :-2]
            + u[1:-1, 1:-1, 2:]
        ) / 6.0
        u = nxt
    return u[1:-1, 1:-1, 1:-1]


def _update_body(views, geom, scratch) -> None:
    u, nxt = views
    nxt[1:-1, 1:-1, 1:-1] = (
        u[:-2, 1:-1, 1:-1]
        + u[2:, 1:-1, 1:-1]
        + u[1:-1, :-2, 1:-1]
        + u[1:-1, 2:, 1:-1]
        + u[1:-1, 1:-1, :-2]
        + u[1:-1, 1:-1, 2:]
    ) / 6.0
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = 0
        hi[axis] = -1
        nxt[tuple(lo)] = u[tuple(lo)]
        nxt[tuple(hi)] = u[tuple(hi)]


def _plane(ghosted_shape_axis: int, side: int, interior: bool) -> int:
    # ghosted index of the boundary-adjacent interior plane or the ghost plane
    if interior:
        return 1 if side == 0 else ghosted_shape_axis - 2
    return 0 if side == 0 else ghosted_shape_axis - 1


def _face_slices(axis: int, index: int) -> tuple:
    sl = [slice(1, -1)] * 3
    sl[axis] = index
    return tuple(sl)


def _make_pack_body(face: int):
    axis, side = FACES[face]

    def body(views, geom, scratch) -> None:
        u, halo = views
        idx = _plane(u.shape[axis], side, interior=True)
        halo[:, :] = u[_face_slices(axis, idx)]

    return body


def _make_unpack_body(face: int):
    axis, side = FACES[face]

    def body(views, geom, scratch) -> None:
        halo, u = views
        idx = _plane(u.shape[axis], side, interior=False)
        target = u[_face_slices(axis, idx)]
        if halo.dtype != np.float64:  # received wrappers arrive as raw bytes
            halo = halo.reshape(-1).view(np.float64).reshape(target.shape)
        target[...] = halo

    return body


@dataclass
class _Chunk:
    lin: int
    coord: tuple[int, int, int]
    extents: tuple[int, int, int]
    offsets: tuple[int, int, int]
    device_id: int
    bufs: list[HeteroObject] = field(default_factory=list)
    neighbors: dict[int, int] = field(default_factory=dict)  # face -> neighbor lin
    step: int = 0
    sent_step: int = -1
    recv_count: dict[int, int] = field(default_factory=dict)
    inbox: dict[int, dict[int, HeteroObject]] = field(default_factory=dict)
    done: bool = False


class _RankDriver:
    """Per-rank protocol state machine; handlers delegate here."""

    def __init__(
        self,
        comm: Comm,
        steps: int,
        update_cost_per_cell: float,
        face_cost_per_cell: float,
    ):
        self.comm = comm
        self.rt: Runtime = comm.runtime
        self.steps = steps
        self.chunks: dict[int, _Chunk] = {}
        self.refs: Optional[list[list[MobileRef]]] = None
        self.ref_of: dict[int, MobileRef] = {}
        self.completed = 0
        self.gathered: dict[int, HeteroObject] = {}
        self._gather_meta: dict[int, list[int]] = {}

        rt = self.rt
        upd = update_cost_per_cell
        fc = face_cost_per_cell
        self.k_update = rt.register_kernel(
            "jacobi_update",
            body=_update_body,
            cost=lambda g, u=upd: u * g.total_work_items,
        )
        self.k_pack = [
            rt.register_kernel(
                f"halo_pack_{f}", body=_make_pack_body(f), cost=lambda g, c=fc: c * g.total_work_items
            )
            for f in range(6)
        ]
        self.k_unpack = [
            rt.register_kernel(
                f"halo_unpack_{f}",
                body=_make_unpack_body(f),
                cost=lambda g, c=fc: c * g.total_work_items,
            )
            for f in range(6)
        ]
        self.h_halo = [
            comm.register_handler(self._make_halo_handler(f)) for f in range(6)
        ]
        self.h_gather_meta = comm.register_handler(self._on_gather_meta)
        self.h_gather_obj = comm.register_handler(self._on_gather_obj)

    # ---------------- handlers ----------------

    def _make_halo_handler(self, face: int):
        def handler(mobile, arg, ctx) -> None:
            chunk = self.chunks[struct.unpack("<I", bytes(mobile.state[:4]))[0]]
            step = chunk.recv_count.get(face, 0)
            chunk.recv_count[face] = step + 1
            chunk.inbox.setdefault(step, {})[face] = arg
            self._try_finish_step(chunk)

        return handler

    def _on_gather_meta(self, mobile, arg, ctx) -> None:
        (lin,) = struct.unpack("<I", arg)
        self._gather_meta.setdefault(ctx.src_rank, []).append(lin)

    def _on_gather_obj(self, mobile, arg, ctx) -> None:
        lin = self._gather_meta[ctx.src_rank].pop(0)
        self.gathered[lin] = arg

    # ---------------- protocol ----------------

    def cur(self, chunk: _Chunk, step: int) -> HeteroObject:
        return chunk.bufs[step % 2]

    def nxt(self, chunk: _Chunk, step: int) -> HeteroObject:
        return chunk.bufs[(step + 1) % 2]

    def start_step(self, chunk: _Chunk) -> None:
        s = chunk.step
        if chunk.sent_step >= s or chunk.done:
            return
        chunk.sent_step = s
        u = self.cur(chunk, s)
        nx, ny, nz = chunk.extents
        face_cells = {0: ny * nz, 1: ny * nz, 2: nx * nz, 3: nx * nz, 4: nx * ny, 5: nx * ny}
        for face, nbr in sorted(chunk.neighbors.items()):
            axis, _ = FACES[face]
            shape = [nx, ny, nz]
            del shape[axis]
            halo = self.rt.create_object(tuple(shape), dtype=np.float64)
            t = self.rt.task().device(DeviceType.GPU_SIM)
            t.arg(u).read()
            t.arg(halo).write()
            t.set_threads((face_cells[face], 1, 1), (1, 1, 1))
            t.submit(self.k_pack[face])
            self.comm.mp_send(self.ref_of[nbr], self.h_halo[opposite(face)], halo)
            self.rt.destroy_object(halo)
        self._try_finish_step(chunk)

    def _try_finish_step(self, chunk: _Chunk) -> None:
        s = chunk.step
        if chunk.done or chunk.sent_step < s:
            return
        expected = set(chunk.neighbors)
        have = set(chunk.inbox.get(s, {}))
        if not expected <= have:
            return
        u = self.cur(chunk, s)
        nxt = self.nxt(chunk, s)
        nx, ny, nz = chunk.extents
        face_cells = {0: ny * nz, 1: ny * nz, 2: nx * nz, 3: nx * nz, 4: nx * ny, 5: nx * ny}
        for face in sorted(chunk.inbox.get(s, {})):
            wrapper = chunk.inbox[s][face]
            t = self.rt.task().device(DeviceType.GPU_SIM)
            t.arg(wrapper).read()
            t.arg(u).write()
            t.set_threads((face_cells[face], 1, 1), (1, 1, 1))
            t.submit(self.k_unpack[face])
            self.rt.destroy_object(wrapper)
        chunk.inbox.pop(s, None)
        t = self.rt.task().device(DeviceType.GPU_SIM)
        t.arg(u).read()
        t.arg(nxt).write()
        t.set_threads((nx * ny * nz, 1, 1), (1, 1, 1))
        t.submit(self.k_update)
        chunk.step = s + 1
        if chunk.step >= self.steps:
            chunk.done = True
            self.completed += 1
            self._send_gather(chunk)
        else:
            self.start_step(chunk)

    def _send_gather(self, chunk: _Chunk) -> None:
        collector = self._collector_ref
        self.comm.mp_send(collector, self.h_gather_meta, struct.pack("<I", chunk.lin))
        self.comm.mp_send(collector, self.h_gather_obj, self.cur(chunk, self.steps))


def run_jacobi3d(
    domain: tuple[int, int, int],
    ranks: int = 1,
    devices_per_rank: int = 1,
    od: int = 1,
    steps: int = 10,
    grid: Optional[tuple[int, int, int]] = None,
    clock: ClockMode = ClockMode.VIRTUAL,
    latency: float = 1e-5,
    bandwidth: float = 2e8,
    streams: int = 5,
    update_cost_per_cell: float = 2e-8,
    face_cost_per_cell: float = 1e-9,
    device_aware: bool = False,
    capacity: int = 256 << 20,
    check: bool = False,
    tracer: Optional[Tracer] = None,
) -> tuple[BenchReport, float, np.ndarray]:
    """Run the proxy app; returns (report, checksum, assembled interior)."""
    if grid is None:
        grid = (1, 1, ranks * devices_per_rank * od)
    cx, cy, cz = grid
    X, Y, Z = domain
    if X % cx or Y % cy or Z % cz:
        raise HrtError(f"domain {domain} not divisible by chunk grid {grid}")
    nchunks = cx * cy * cz
    ex, ey, ez = X // cx, Y // cy, Z // cz

    cfg = WorldConfig(
        ranks=ranks,
        devices_per_rank=devices_per_rank,
        clock=clock,
        capacity=capacity,
        latency=latency,
        bandwidth=bandwidth,
        streams=streams,
        device_aware=device_aware,
        with_host_device=False,
    )
    comms = make_loopback_world(cfg, tracer)
    drivers = [
        _RankDriver(c, steps, update_cost_per_cell, face_cost_per_cell) for c in comms
    ]

    def rank_of(lin: int) -> int:
        return lin * ranks // nchunks

    def coord(lin: int) -> tuple[int, int, int]:
        ix = lin % cx
        iy = (lin // cx) % cy
        iz = lin // (cx * cy)
        return ix, iy, iz

    def lin_of(ix: int, iy: int, iz: int) -> int:
        return ix + cx * (iy + cy * iz)

    per_rank: dict[int, list[int]] = {r: [] for r in range(ranks)}
    for lin in range(nchunks):
        per_rank[rank_of(lin)].append(lin)

    # chunk mobile objects (state carries the chunk id), then one collector
    # on rank 0; creation order fixes the mobile indices on every rank
    for r in range(ranks):
        comm = comms[r]
        locals_ = per_rank[r]
        for pos, lin in enumerate(locals_):
            device_local = pos * devices_per_rank // max(1, len(locals_))
            device = device_id_for(r, device_local)
            comm.create_mobile_object(struct.pack("<I", lin), device_hint=device)
    collector_ref_local = comms[0].create_mobile_object(b"collector")
    exchange_all(comms)

    ref_table: dict[int, MobileRef] = {}
    for r in range(ranks):
        for pos, lin in enumerate(per_rank[r]):
            ref_table[lin] = MobileRef(r, pos)
    collector_ref = MobileRef(0, len(per_rank[0]))

    for r in range(ranks):
        driver = drivers[r]
        driver.refs = [[ref_table[l] for l in per_rank[rr]] for rr in range(ranks)]
        driver.ref_of = ref_table
        driver._collector_ref = collector_ref
        comm = comms[r]
        for pos, lin in enumerate(per_rank[r]):
            ix, iy, iz = coord(lin)
            device_local = pos * devices_per_rank // max(1, len(per_rank[r]))
            chunk = _Chunk(
                lin=lin,
                coord=(ix, iy, iz),
                extents=(ex, ey, ez),
                offsets=(ix * ex, iy * ey, iz * ez),
                device_id=device_id_for(r, device_local),
            )
            for f, (axis, side) in enumerate(FACES):
                delta = [0, 0, 0]
                delta[axis] = -1 if side == 0 else 1
                nbc = (ix + delta[0], iy + delta[1], iz + delta[2])
                if 0 <= nbc[0] < cx and 0 <= nbc[1] < cy and 0 <= nbc[2] < cz:
                    chunk.neighbors[f] = lin_of(*nbc)
            rt = comm.runtime
            for b in range(2):
                obj = rt.create_object((ex + 2, ey + 2, ez + 2), dtype=np.float64)
                view = rt.request_data(obj, write=True).get()
                view[:] = 0.0
                if b == 0:
                    # domain-boundary ghost planes carry the Dirichlet value
                    for f, (axis, side) in enumerate(FACES):
                        if f not in chunk.neighbors:
                            idx = _plane(view.shape[axis], side, interior=False)
                            sl = [slice(None)] * 3
                            sl[axis] = idx
                            view[tuple(sl)] = BOUNDARY
                rt.release(obj)
                chunk.bufs.append(obj)
            driver.chunks[chunk.lin] = chunk

    # kick off step 0 on every chunk, then drive the world to completion
    for driver in drivers:
        for chunk in driver.chunks.values():
            driver.start_step(chunk)

    step_times: dict[int, float] = {}
    shared_clock = comms[0].runtime.clock
    t0 = shared_clock.now

    def completed_steps() -> int:
        return min(
            (min((c.step for c in d.chunks.values()), default=steps) for d in drivers if d.chunks),
            default=steps,
        )

    def sample_steps() -> None:
        if clock is ClockMode.VIRTUAL:
            done = completed_steps()
            for s in range(1, done + 1):
                step_times.setdefault(s, shared_clock.now - t0)

    def all_gathered() -> bool:
        sample_steps()
        return len(drivers[0].gathered) == nchunks

    drive(comms, until=all_gathered, timeout=600.0)

    # assemble on rank 0 and wait for every gathered buffer's bytes
    rt0 = comms[0].runtime
    assembled = np.empty(domain, dtype=np.float64)
    for lin in range(nchunks):
        wrapper = drivers[0].gathered[lin]
        drive(comms, until=lambda w=wrapper: w.written, timeout=120.0)
        raw = _peek_array(rt0, wrapper).view(np.float64).reshape(ex + 2, ey + 2, ez + 2)
        ix, iy, iz = coord(lin)
        assembled[
            ix * ex : (ix + 1) * ex, iy * ey : (iy + 1) * ey, iz * ez : (iz + 1) * ez
        ] = raw[1:-1, 1:-1, 1:-1]
    checksum = float(np.sum(assembled))

    makespan = shared_clock.now - t0
    report = BenchReport(
        "jacobi3d",
        columns=["step", "virtual_makespan_s"],
        meta={
            "domain": list(domain),
            "grid": list(grid),
            "ranks": ranks,
            "devices_per_rank": devices_per_rank,
            "od": od,
            "steps": steps,
            "checksum": checksum,
            "makespan_s": makespan,
        },
    )
    for s in range(1, steps + 1):
        report.add(step=s, virtual_makespan_s=step_times.get(s, makespan))

    if check:
        reference = jacobi_reference(domain, steps)
        if not np.array_equal(assembled, reference):
            raise HrtError("jacobi3d result differs from the single-array reference")

    shutdown_all(comms)
    return report, checksum, assembled


def _peek_array(rt: Runtime, obj: HeteroObject) -> np.ndarray:
    from ..objects import CopyState

    if obj.host_state is CopyState.VALID:
        return rt.host_view(obj).copy()
    return rt.device_view(obj, obj.valid_devices()[0]).copy()
