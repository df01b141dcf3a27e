"""Wire formats for the two-sided data plane and the control-plane RPCs.

Data-plane requests (little-endian throughout)::

    ReadRequest  (24 bytes)
        0..8    word0: region_id << 48 | page_offset
        8..16   dest_addr
        16..20  size
        20..24  dest_rkey

    WriteRequest (12 + size bytes)
        0..8    word0: region_id << 48 | page_offset
        8..12   size
        12..    data

``page_offset`` is a chunk index, the byte offset is ``page_offset * chunk_size``.
The request kind travels in the 32-bit immediate, see :class:`Imm`.

Responses, sent by whoever served the request:

    READ   dest_addr (8) + data
    WRITE  word0 (8) + size (4)
    ERROR  kind (1) + key (8) + code (2) + utf-8 message
           key is dest_addr for reads, word0 for writes
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Union

from .errors import (
    AllocationError,
    CoherenceError,
    DecodeError,
    EncodeError,
    FamError,
    ProtectionFault,
    RemoteError,
    UnknownRegion,
)

READ_REQUEST_BYTES = 24
WRITE_HEADER_BYTES = 12

_U16 = (1 << 16) - 1
_U32 = (1 << 32) - 1
_U48 = (1 << 48) - 1
_U64 = (1 << 64) - 1

_READ = struct.Struct("<QQII")
_WRITE_HDR = struct.Struct("<QI")
_ACK = struct.Struct("<QI")
_ERR = struct.Struct("<BQH")


class Imm(IntEnum):
    """Immediate tags carried by every two-sided message."""

    READ = 1
    WRITE = 2
    ERROR = 3
    CONTROL = 4


def request_kind(imm: int) -> Imm:
    try:
        return Imm(imm)
    except ValueError:
        raise DecodeError(f"unknown immediate tag {imm:#x}") from None


def _check(name: str, value: int, limit: int) -> None:
    if not isinstance(value, int) or value < 0 or value > limit:
        raise EncodeError(f"{name}={value!r} out of range [0, {limit}]")


def pack_word0(region_id: int, page_offset: int) -> int:
    _check("region_id", region_id, _U16)
    _check("page_offset", page_offset, _U48)
    return (region_id << 48) | page_offset


def unpack_word0(word: int) -> tuple[int, int]:
    return word >> 48, word & _U48


@dataclass(frozen=True)
class ReadRequest:
    region_id: int
    page_offset: int
    dest_addr: int
    size: int
    dest_rkey: int


@dataclass(frozen=True)
class WriteRequest:
    region_id: int
    page_offset: int
    size: int
    data: bytes


def encode_read(req: ReadRequest) -> bytes:
    word0 = pack_word0(req.region_id, req.page_offset)
    _check("dest_addr", req.dest_addr, _U64)
    _check("size", req.size, _U32)
    _check("dest_rkey", req.dest_rkey, _U32)
    return _READ.pack(word0, req.dest_addr, req.size, req.dest_rkey)


def decode_read(buf) -> ReadRequest:
    if len(buf) != READ_REQUEST_BYTES:
        raise DecodeError(f"read request must be {READ_REQUEST_BYTES} bytes, got {len(buf)}")
    word0, dest_addr, size, rkey = _READ.unpack(buf)
    rid, off = unpack_word0(word0)
    return ReadRequest(rid, off, dest_addr, size, rkey)


def encode_write(req: WriteRequest) -> bytes:
    if req.size <= 0:
        raise EncodeError("write size must be positive")
    if len(req.data) != req.size:
        raise EncodeError(f"declared size {req.size} != data length {len(req.data)}")
    word0 = pack_word0(req.region_id, req.page_offset)
    _check("size", req.size, _U32)
    return _WRITE_HDR.pack(word0, req.size) + bytes(req.data)


def decode_write(buf) -> WriteRequest:
    if len(buf) < WRITE_HEADER_BYTES:
        raise DecodeError("write request shorter than its header")
    word0, size = _WRITE_HDR.unpack_from(buf)
    if size == 0:
        raise DecodeError("zero-size write")
    if len(buf) - WRITE_HEADER_BYTES != size:
        raise DecodeError(f"declared size {size} != payload {len(buf) - WRITE_HEADER_BYTES}")
    rid, off = unpack_word0(word0)
    return WriteRequest(rid, off, size, bytes(buf[WRITE_HEADER_BYTES:]))


# -- responses ---------------------------------------------------------------

def encode_read_response(dest_addr: int, data) -> bytes:
    return dest_addr.to_bytes(8, "little") + bytes(data)


def decode_read_response(buf) -> tuple[int, bytes]:
    if len(buf) < 8:
        raise DecodeError("short read response")
    return int.from_bytes(buf[:8], "little"), bytes(buf[8:])


def encode_write_ack(region_id: int, page_offset: int, size: int) -> bytes:
    return _ACK.pack(pack_word0(region_id, page_offset), size)


def decode_write_ack(buf) -> tuple[int, int, int]:
    if len(buf) != _ACK.size:
        raise DecodeError("bad write ack length")
    word0, size = _ACK.unpack(buf)
    rid, off = unpack_word0(word0)
    return rid, off, size


# Error codes map exception types across the wire.
_ERROR_CODES: dict[type, int] = {
    AllocationError: 1,
    ProtectionFault: 2,
    CoherenceError: 3,
    UnknownRegion: 4,
}
_CODE_ERRORS = {v: k for k, v in _ERROR_CODES.items()}


def error_code(exc: BaseException) -> int:
    for cls, code in _ERROR_CODES.items():
        if isinstance(exc, cls):
            return code
    return 99


def error_from_code(code: int, message: str) -> FamError:
    return _CODE_ERRORS.get(code, RemoteError)(message)


def encode_error(kind: Imm, key: int, exc: BaseException) -> bytes:
    return _ERR.pack(int(kind), key, error_code(exc)) + str(exc).encode()


def decode_error(buf) -> tuple[Imm, int, FamError]:
    if len(buf) < _ERR.size:
        raise DecodeError("short error response")
    kind, key, code = _ERR.unpack_from(buf)
    msg = bytes(buf[_ERR.size:]).decode(errors="replace")
    return request_kind(kind), key, error_from_code(code, msg)


# -- control plane -----------------------------------------------------------

@dataclass(frozen=True)
class Setup:
    client: str


@dataclass(frozen=True)
class SetupAck:
    pass


@dataclass(frozen=True)
class AllocRegion:
    length: int
    client: str
    writable: bool = True
    file: Optional[str] = None


@dataclass(frozen=True)
class MapRegion:
    region_id: int
    client: str
    writable: bool = False


@dataclass(frozen=True)
class AllocAck:
    region_id: int
    rkey: int
    length: int
    memory: str


@dataclass(frozen=True)
class FreeRegion:
    region_id: int
    client: str


@dataclass(frozen=True)
class FreeAck:
    region_id: int


@dataclass(frozen=True)
class StaticLoad:
    region_id: int
    first_chunk: int
    n_chunks: int
    chunk_size: int


@dataclass(frozen=True)
class StaticAck:
    region_id: int
    first_chunk: int
    n_chunks: int


@dataclass(frozen=True)
class ErrorReply:
    code: int
    message: str

    def exception(self) -> FamError:
        return error_from_code(self.code, self.message)

    @classmethod
    def from_exception(cls, exc: BaseException) -> "ErrorReply":
        return cls(error_code(exc), str(exc))


ControlMessage = Union[
    Setup, SetupAck, AllocRegion, MapRegion, AllocAck, FreeRegion, FreeAck,
    StaticLoad, StaticAck, ErrorReply,
]

# (tag, class, field formats); "s" is a u16-length-prefixed utf-8 string,
# "o" an optional string (length 0xFFFF encodes None), "?" a bool byte.
_CONTROL_LAYOUT: list[tuple[int, type, str]] = [
    (1, Setup, "s"),
    (2, SetupAck, ""),
    (3, AllocRegion, "Qs?o"),
    (4, MapRegion, "Hs?"),
    (5, AllocAck, "HIQs"),
    (6, FreeRegion, "Hs"),
    (7, FreeAck, "H"),
    (8, StaticLoad, "HQQI"),
    (9, StaticAck, "HQQ"),
    (10, ErrorReply, "Hs"),
]
_BY_TAG = {tag: (cls, fmt) for tag, cls, fmt in _CONTROL_LAYOUT}
_BY_CLASS = {cls: (tag, fmt) for tag, cls, fmt in _CONTROL_LAYOUT}
_INT_LIMITS = {"H": _U16, "I": _U32, "Q": _U64}


def encode_control(msg: ControlMessage) -> bytes:
    try:
        tag, fmt = _BY_CLASS[type(msg)]
    except KeyError:
        raise EncodeError(f"not a control message: {msg!r}") from None
    out = bytearray([tag])
    values = [getattr(msg, f) for f in msg.__dataclass_fields__]
    for code, value in zip(fmt, values):
        if code in _INT_LIMITS:
            _check(code, value, _INT_LIMITS[code])
            out += struct.pack("<" + code, value)
        elif code == "?":
            out.append(1 if value else 0)
        else:
            if value is None:
                if code != "o":
                    raise EncodeError("string field may not be None")
                out += struct.pack("<H", _U16)
                continue
            raw = value.encode()
            if len(raw) >= _U16:
                raise EncodeError("string field too long")
            out += struct.pack("<H", len(raw)) + raw
    return bytes(out)


def decode_control(buf) -> ControlMessage:
    buf = bytes(buf)
    if not buf:
        raise DecodeError("empty control message")
    try:
        cls, fmt = _BY_TAG[buf[0]]
    except KeyError:
        raise DecodeError(f"unknown control tag {buf[0]}") from None
    pos = 1
    values = []
    try:
        for code in fmt:
            if code in _INT_LIMITS:
                (v,) = struct.unpack_from("<" + code, buf, pos)
                pos += struct.calcsize(code)
            elif code == "?":
                v = bool(buf[pos])
                pos += 1
            else:
                (n,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                if n == _U16 and code == "o":
                    v = None
                else:
                    if pos + n > len(buf):
                        raise DecodeError("truncated string field")
                    v = buf[pos:pos + n].decode()
                    pos += n
            values.append(v)
    except (struct.error, IndexError) as exc:
        raise DecodeError(f"truncated control message: {exc}") from None
    if pos != len(buf):
        raise DecodeError("trailing bytes in control message")
    return cls(*values)
