"""hrt: a device-agnostic tasking runtime with coherent data objects,
simulated accelerator backends, and a distributed mobile-object layer."""

from .builder import TaskBuilder, task
from .comm import (
    Comm,
    GlobalObjectId,
    HandlerContext,
    MobileObject,
    MobileRef,
    drive,
    shutdown_all,
)
from .devices import (
    ClockMode,
    CompletionToken,
    DeviceAllocation,
    DeviceDescriptor,
    DeviceRegistry,
    DeviceType,
    GpuSimBackend,
    HostBackend,
    HostPinnedPool,
    TokenKind,
    TokenStatus,
    VirtualClock,
)
from .errors import (
    DeadlockError,
    DependencyCycle,
    DoubleFree,
    HrtError,
    LeaseConflict,
    NotOwner,
    OutOfDeviceMemory,
    ProtocolError,
    SchedulerBusy,
    TaskFailed,
    UnsatisfiableEviction,
)
from .kernels import KernelDefinition, KernelRegistry, KernelRef, ThreadGeometry
from .objects import AccessMode, CopyState, HeteroObject, HostLease
from .runtime import HeteroTask, Runtime, TaskState
from .schedulers import (
    FifoScheduler,
    LeastLoadedScheduler,
    LocalityScheduler,
    SchedulerInterface,
    make_scheduler,
)
from .trace import Tracer
from .transport import LoopbackFabric, LoopbackTransport, TcpTransport, Transport
from .wire import HEADER_SIZE, INLINE_LIMIT, MessageHeader, MsgKind, decode_header

__version__ = "0.1.0"
