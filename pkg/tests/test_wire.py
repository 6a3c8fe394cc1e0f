import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrt.errors import ProtocolError
from hrt.wire import (
    HEADER_SIZE,
    INLINE_LIMIT,
    MAX_INLINE_PAYLOAD,
    NO_DEVICE,
    MessageHeader,
    MsgKind,
    decode_header,
    should_inline,
)


def random_header(rnd: random.Random) -> MessageHeader:
    return MessageHeader(
        msg_kind=rnd.choice(list(MsgKind)),
        handler_id=rnd.getrandbits(32),
        target_rank=rnd.getrandbits(32),
        target_index=rnd.getrandbits(64),
        payload_size=rnd.getrandbits(64),
        inline_flag=rnd.random() < 0.5,
        correlation_id=rnd.getrandbits(64),
        element_size=rnd.getrandbits(32),
        dims=(rnd.getrandbits(32), rnd.getrandbits(32), rnd.getrandbits(32)),
        source_device_type=rnd.choice([0, 1, NO_DEVICE]),
    )


def test_header_is_64_bytes():
    assert HEADER_SIZE == 64
    assert len(MessageHeader(MsgKind.HANDLER).encode()) == 64


def test_round_trip_small_fuzz():
    rnd = random.Random(1)
    for _ in range(2000):
        hdr = random_header(rnd)
        blob = hdr.encode()
        back = decode_header(blob)
        assert back == hdr
        assert back.encode() == blob


@settings(max_examples=200)
@given(
    kind=st.sampled_from(list(MsgKind)),
    handler_id=st.integers(0, 2**32 - 1),
    rank=st.integers(0, 2**32 - 1),
    index=st.integers(0, 2**64 - 1),
    payload=st.integers(0, 2**64 - 1),
    inline=st.booleans(),
    corr=st.integers(0, 2**64 - 1),
    esize=st.integers(0, 2**32 - 1),
    dims=st.tuples(
        st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1)
    ),
    sdt=st.sampled_from([0, 1, NO_DEVICE]),
)
def test_round_trip_property(kind, handler_id, rank, index, payload, inline, corr, esize, dims, sdt):
    hdr = MessageHeader(
        msg_kind=kind,
        handler_id=handler_id,
        target_rank=rank,
        target_index=index,
        payload_size=payload,
        inline_flag=inline,
        correlation_id=corr,
        element_size=esize,
        dims=dims,
        source_device_type=sdt,
    )
    assert decode_header(hdr.encode()) == hdr


def test_inline_threshold_rule():
    assert INLINE_LIMIT == 512
    assert MAX_INLINE_PAYLOAD == 448
    assert should_inline(448)
    assert not should_inline(449)
    assert should_inline(0)


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + bytes([9]) + b[5:], "version"),
        (lambda b: b[:5] + bytes([99]) + b[6:], "kind"),
        (lambda b: b[:6] + bytes([7]) + b[7:], "inline flag"),
        (lambda b: b[:56] + b"\x01" + b[57:], "reserved"),
        (lambda b: b[:32], "truncated"),
    ],
)
def test_malformed_headers_rejected(mutate, message):
    blob = MessageHeader(MsgKind.HANDLER).encode()
    with pytest.raises(ProtocolError):
        decode_header(mutate(blob))
