"""Wire format for handler invocations and remote data movement.

Every message starts with a fixed 64-byte little-endian header:

    offset  size  field
    0       4     magic "HRTM"
    4       1     version (1)
    5       1     msg_kind (1=HANDLER, 2=HANDLER_HETERO_META, 3=PUT_META,
                  4=GET_REQ, 5=ACK)
    6       1     inline_flag (0/1)
    7       1     source_device_type (0=host, 1=gpu_sim, 255=n/a)
    8       4     handler_id (u32)
    12      4     target_rank (u32)
    16      8     target_index (u64)
    24      8     payload_size (u64)
    32      8     correlation_id (u64)
    40      4     element_size (u32; 0 when not a data-object payload)
    44      4     dim0 (u32)
    48      4     dim1 (u32)
    52      4     dim2 (u32)
    56      8     reserved, must be zero

``inline_flag`` is set exactly when header + payload fits in 512 bytes, in
which case the payload bytes follow the header in the same message.
Otherwise the header message is followed by one data message carrying the
same correlation id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import ProtocolError

MAGIC = b"HRTM"
VERSION = 1
HEADER_SIZE = 64
INLINE_LIMIT = 512  # header + payload
MAX_INLINE_PAYLOAD = INLINE_LIMIT - HEADER_SIZE
NO_DEVICE = 0xFF

_STRUCT = struct.Struct("<4sBBBBIIQQQIIII8s")
assert _STRUCT.size == HEADER_SIZE


class MsgKind(IntEnum):
    HANDLER = 1
    HANDLER_HETERO_META = 2
    PUT_META = 3
    GET_REQ = 4
    ACK = 5


@dataclass
class MessageHeader:
    msg_kind: MsgKind
    handler_id: int = 0
    target_rank: int = 0
    target_index: int = 0
    payload_size: int = 0
    inline_flag: bool = False
    correlation_id: int = 0
    element_size: int = 0
    dims: tuple[int, int, int] = (0, 0, 0)
    source_device_type: int = NO_DEVICE
    version: int = VERSION

    def encode(self) -> bytes:
        return _STRUCT.pack(
            MAGIC,
            self.version,
            int(self.msg_kind),
            1 if self.inline_flag else 0,
            self.source_device_type,
            self.handler_id,
            self.target_rank,
            self.target_index,
            self.payload_size,
            self.correlation_id,
            self.element_size,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            b"\x00" * 8,
        )


def decode_header(data: bytes) -> MessageHeader:
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"header truncated: {len(data)} bytes")
    (
        magic,
        version,
        kind,
        inline_flag,
        source_device_type,
        handler_id,
        target_rank,
        target_index,
        payload_size,
        correlation_id,
        element_size,
        d0,
        d1,
        d2,
        reserved,
    ) = _STRUCT.unpack(data[:HEADER_SIZE])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        msg_kind = MsgKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    if inline_flag not in (0, 1):
        raise ProtocolError(f"bad inline flag {inline_flag}")
    if reserved != b"\x00" * 8:
        raise ProtocolError("reserved header bytes must be zero")
    return MessageHeader(
        msg_kind=msg_kind,
        handler_id=handler_id,
        target_rank=target_rank,
        target_index=target_index,
        payload_size=payload_size,
        inline_flag=bool(inline_flag),
        correlation_id=correlation_id,
        element_size=element_size,
        dims=(d0, d1, d2),
        source_device_type=source_device_type,
        version=version,
    )


def should_inline(payload_size: int) -> bool:
    return HEADER_SIZE + payload_size <= INLINE_LIMIT
