import json
import os
import random

import pytest
from hypothesis import given, strategies as st

from dpufam import protocol as P
from dpufam.errors import (AllocationError, CoherenceError, DecodeError, EncodeError,
                           ProtectionFault, RemoteError, UnknownRegion)

from conftest import FIXTURES
from oracles import read_request_bytes, write_request_bytes

U16, U32, U48, U64 = (1 << 16) - 1, (1 << 32) - 1, (1 << 48) - 1, (1 << 64) - 1

with open(os.path.join(FIXTURES, "protocol_golden.json")) as fh:
    GOLDEN = json.load(fh)

reads = st.builds(P.ReadRequest, st.integers(0, U16), st.integers(0, U48),
                  st.integers(0, U64), st.integers(0, U32), st.integers(0, U32))
writes = st.binary(min_size=1, max_size=300).flatmap(
    lambda d: st.builds(P.WriteRequest, st.integers(0, U16), st.integers(0, U48),
                        st.just(len(d)), st.just(d)))


@pytest.mark.parametrize("name", [k for k in GOLDEN if k.startswith("read")])
def test_read_golden(name):
    fields, raw = GOLDEN[name]["fields"], bytes.fromhex(GOLDEN[name]["hex"])
    req = P.ReadRequest(*fields)
    assert P.encode_read(req) == raw
    assert P.decode_read(raw) == req


@pytest.mark.parametrize("name", [k for k in GOLDEN if k.startswith("write")])
def test_write_golden(name):
    rid, off, data = GOLDEN[name]["fields"]
    data = bytes.fromhex(data)
    raw = bytes.fromhex(GOLDEN[name]["hex"])
    req = P.WriteRequest(rid, off, len(data), data)
    assert P.encode_write(req) == raw
    assert P.decode_write(raw) == req


def test_all_zero_read_is_24_zero_bytes():
    assert P.encode_read(P.ReadRequest(0, 0, 0, 0, 0)) == bytes(24)


def test_write_abc_is_15_bytes():
    assert len(P.encode_write(P.WriteRequest(0, 0, 3, b"abc"))) == 15


@given(reads)
def test_read_matches_bit_packer(req):
    raw = P.encode_read(req)
    assert len(raw) == P.READ_REQUEST_BYTES == 24
    assert raw == read_request_bytes(req.region_id, req.page_offset, req.dest_addr,
                                     req.size, req.dest_rkey)
    assert P.decode_read(raw) == req


@given(writes)
def test_write_matches_bit_packer(req):
    raw = P.encode_write(req)
    assert len(raw) == 12 + req.size
    assert raw == write_request_bytes(req.region_id, req.page_offset, req.data)
    assert P.decode_write(raw) == req


def test_ten_thousand_random_round_trips():
    rng = random.Random(7)
    for _ in range(10_000):
        if rng.random() < 0.5:
            r = P.ReadRequest(rng.randint(0, U16), rng.randint(0, U48), rng.randint(0, U64),
                              rng.randint(0, U32), rng.randint(0, U32))
            assert P.decode_read(P.encode_read(r)) == r
        else:
            d = rng.randbytes(rng.randint(1, 64))
            w = P.WriteRequest(rng.randint(0, U16), rng.randint(0, U48), len(d), d)
            assert P.decode_write(P.encode_write(w)) == w


@pytest.mark.parametrize("field,value", [
    ("region_id", U16 + 1), ("page_offset", U48 + 1), ("dest_addr", U64 + 1),
    ("size", U32 + 1), ("dest_rkey", U32 + 1), ("region_id", -1), ("page_offset", -1),
])
def test_read_field_ranges_enforced(field, value):
    kw = dict(region_id=0, page_offset=0, dest_addr=0, size=1, dest_rkey=0)
    kw[field] = value
    with pytest.raises(EncodeError):
        P.encode_read(P.ReadRequest(**kw))


def test_page_offset_two_to_48_rejected():
    with pytest.raises(EncodeError):
        P.pack_word0(1, 1 << 48)


@pytest.mark.parametrize("n", [0, 23, 25])
def test_read_wrong_length(n):
    with pytest.raises(DecodeError):
        P.decode_read(bytes(n))


def test_write_validation():
    with pytest.raises(EncodeError):
        P.encode_write(P.WriteRequest(0, 0, 0, b""))
    with pytest.raises(EncodeError):
        P.encode_write(P.WriteRequest(0, 0, 4, b"abc"))
    with pytest.raises(EncodeError):
        P.encode_write(P.WriteRequest(1 << 16, 0, 1, b"a"))
    raw = P.encode_write(P.WriteRequest(0, 0, 3, b"abc"))
    with pytest.raises(DecodeError):
        P.decode_write(raw[:-1])
    with pytest.raises(DecodeError):
        P.decode_write(raw[:11])
    with pytest.raises(DecodeError):
        P.decode_write(write_request_bytes(0, 0, b"")[:12])


def test_immediates():
    assert (P.Imm.READ, P.Imm.WRITE, P.Imm.ERROR) == (1, 2, 3)
    assert P.request_kind(1) is P.Imm.READ
    assert P.request_kind(2) is P.Imm.WRITE
    with pytest.raises(DecodeError):
        P.request_kind(77)


@given(st.integers(0, U64), st.binary(max_size=100))
def test_read_response_round_trip(addr, data):
    assert P.decode_read_response(P.encode_read_response(addr, data)) == (addr, data)


@given(st.integers(0, U16), st.integers(0, U48), st.integers(0, U32))
def test_write_ack_round_trip(rid, off, size):
    assert P.decode_write_ack(P.encode_write_ack(rid, off, size)) == (rid, off, size)


@pytest.mark.parametrize("exc", [AllocationError("a"), ProtectionFault("b"),
                                 CoherenceError("c"), UnknownRegion("d")])
def test_error_round_trip_keeps_type(exc):
    kind, key, back = P.decode_error(P.encode_error(P.Imm.READ, 42, exc))
    assert kind is P.Imm.READ and key == 42
    assert type(back) is type(exc) and str(back) == str(exc)


def test_unknown_error_becomes_remote_error():
    _, _, back = P.decode_error(P.encode_error(P.Imm.WRITE, 1, KeyError("x")))
    assert isinstance(back, RemoteError)


names = st.text(max_size=20)
controls = st.one_of(
    st.builds(P.Setup, names),
    st.just(P.SetupAck()),
    st.builds(P.AllocRegion, st.integers(0, U64), names, st.booleans(),
              st.one_of(st.none(), names)),
    st.builds(P.MapRegion, st.integers(0, U16), names, st.booleans()),
    st.builds(P.AllocAck, st.integers(0, U16), st.integers(0, U32), st.integers(0, U64), names),
    st.builds(P.FreeRegion, st.integers(0, U16), names),
    st.builds(P.FreeAck, st.integers(0, U16)),
    st.builds(P.StaticLoad, st.integers(0, U16), st.integers(0, U64), st.integers(0, U64),
              st.integers(0, U32)),
    st.builds(P.StaticAck, st.integers(0, U16), st.integers(0, U64), st.integers(0, U64)),
    st.builds(P.ErrorReply, st.integers(0, U16), names),
)


@given(controls)
def test_control_round_trip(msg):
    assert P.decode_control(P.encode_control(msg)) == msg


def test_control_decode_errors():
    with pytest.raises(DecodeError):
        P.decode_control(b"")
    with pytest.raises(DecodeError):
        P.decode_control(b"\xee")
    raw = P.encode_control(P.AllocAck(1, 2, 3, "mem0"))
    with pytest.raises(DecodeError):
        P.decode_control(raw[:-1])
    with pytest.raises(DecodeError):
        P.decode_control(raw + b"x")
    with pytest.raises(EncodeError):
        P.encode_control(P.FreeAck(1 << 16))
