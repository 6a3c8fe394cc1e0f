from .reporting import BenchReport
from .timeline import emit_timeline, kernel_transfer_overlaps
