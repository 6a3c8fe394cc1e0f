"""Exception types raised across the runtime."""


class HrtError(Exception):
    """Base class for all runtime errors."""


class OutOfDeviceMemory(HrtError):
    """No free block in a device pool can satisfy an allocation request."""


class UnsatisfiableEviction(HrtError):
    """Eviction cannot free enough device memory (everything is in use)."""


class DoubleFree(HrtError):
    pass


class InvalidLocation(HrtError):
    pass


class UnknownToken(HrtError):
    pass


class KernelError(HrtError):
    """A kernel body raised; carried to the task handle and re-raised on wait."""


class TaskFailed(HrtError):
    pass


class DependencyCycle(HrtError):
    pass


class LeaseConflict(HrtError):
    pass


class ObjectDestroyed(HrtError):
    pass


class DeadlockError(HrtError):
    """Progress can make no headway and the awaited work cannot complete."""


class SchedulerBusy(HrtError):
    """Scheduler replacement attempted while tasks are in flight."""


class ProtocolError(HrtError):
    """Malformed or unexpected wire traffic."""


class NotOwner(HrtError):
    """A mobile reference or global object id was resolved on a non-owner rank."""


class TransportClosed(HrtError):
    pass
