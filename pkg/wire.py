#!/usr/bin/env python3
"""
Framed binary protocol spoken between audit clients and the storage server.

Every message is one frame::

    magic "DSCS" | version (1B) | msg_type (1B) | fid_len (2B) | fid
    | payload_len (4B) | payload

All integers are big-endian. Replies reuse the request's ``msg_type``;
failures come back as ``ERROR`` frames whose payload is a 2-byte error code
followed by a UTF-8 message.
"""

from __future__ import annotations

import logging
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple

from auth_skiplist import SkipListProof
from crypto_core import (
    decode_blob,
    decode_blob_vec,
    decode_int,
    encode_blob,
    encode_blob_vec,
    encode_int,
    read_be_uint,
)
from errors import ConfigError, MalformedMessage, TransportError

# Configure module logger
logger = logging.getLogger(__name__)

MAGIC = b"DSCS"
WIRE_VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024
MAX_FID_BYTES = 0xFFFF

_HEADER = struct.Struct(">4sBBH")
_LENGTH = struct.Struct(">I")
_UPLOAD_HEAD = struct.Struct(">BH")
_UPDATE_HEAD = struct.Struct(">BQB")
_ERROR_HEAD = struct.Struct(">H")

_HAS_H = 0x01
_HAS_BLOCK = 0x02
_HAS_TAG = 0x04


class MessageType(IntEnum):
    UPLOAD = 0x01
    READ = 0x02
    UPDATE = 0x03
    CHALLENGE = 0x04
    ERROR = 0x7F


class Protocol(IntEnum):
    DSCS1 = 1
    DSCS2 = 2

    @classmethod
    def from_name(cls, name: str) -> "Protocol":
        try:
            return cls[name.upper()]
        except KeyError as exc:
            raise ConfigError(f"Unknown protocol '{name}' (expected dscs1 or dscs2)") from exc

    @property
    def label(self) -> str:
        return self.name.lower()


class UpdateKind(IntEnum):
    """Update codes on the wire; 1-3 mirror UpdateType, 4 is a DSCS II append."""

    INSERT = 1
    MODIFY = 2
    DELETE = 3
    APPEND = 4


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    fid: bytes = b""
    payload: bytes = b""
    version: int = WIRE_VERSION

    @property
    def is_error(self) -> bool:
        return self.msg_type == MessageType.ERROR

    def to_bytes(self) -> bytes:
        if len(self.fid) > MAX_FID_BYTES:
            raise MalformedMessage(f"fid of {len(self.fid)} bytes does not fit the frame")
        if len(self.payload) > MAX_PAYLOAD:
            raise MalformedMessage(f"Payload of {len(self.payload)} bytes is too large")
        return b"".join([
            _HEADER.pack(MAGIC, self.version, self.msg_type, len(self.fid)),
            bytes(self.fid),
            _LENGTH.pack(len(self.payload)),
            bytes(self.payload),
        ])

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["WireMessage", int]:
        if offset + _HEADER.size > len(data):
            raise MalformedMessage("Truncated frame header")
        magic, version, msg_type, fid_len = _HEADER.unpack_from(data, offset)
        _check_header(magic, version)
        offset += _HEADER.size
        fid = bytes(data[offset:offset + fid_len])
        if len(fid) != fid_len:
            raise MalformedMessage("Truncated fid")
        offset += fid_len
        payload_len = read_be_uint(data, offset, 4)
        if payload_len > MAX_PAYLOAD:
            raise MalformedMessage(f"Payload of {payload_len} bytes is too large")
        offset += 4
        payload = bytes(data[offset:offset + payload_len])
        if len(payload) != payload_len:
            raise MalformedMessage("payload_len does not match the body")
        return cls(msg_type=msg_type, fid=fid, payload=payload, version=version), offset + payload_len

    @classmethod
    def parse(cls, data: bytes) -> "WireMessage":
        message, end = cls.from_bytes(data)
        if end != len(data):
            raise MalformedMessage(f"{len(data) - end} trailing bytes after frame")
        return message


def _check_header(magic: bytes, version: int) -> None:
    if magic != MAGIC:
        raise MalformedMessage(f"Bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise MalformedMessage(f"Unsupported wire version {version}")


def _expect_end(data: bytes, offset: int, what: str) -> None:
    if offset != len(data):
        raise MalformedMessage(f"{len(data) - offset} trailing bytes after {what}")


# ---------------------------------------------------------------------------
# Socket helpers
# ---------------------------------------------------------------------------


def recv_exact(sock: socket.socket, length: int, allow_eof: bool = False) -> Optional[bytes]:
    """Read exactly ``length`` bytes; None on EOF before the first byte if allowed."""
    chunks: List[bytes] = []
    got = 0
    while got < length:
        try:
            chunk = sock.recv(length - got)
        except socket.timeout:
            # An idle connection between frames is not an error.
            if got == 0 and allow_eof:
                raise
            raise TransportError(f"Timed out after {got} of {length} bytes")
        except OSError as exc:
            raise TransportError(f"Receive failed: {exc}") from exc
        if not chunk:
            if got == 0 and allow_eof:
                return None
            raise TransportError(f"Connection closed after {got} of {length} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> Optional[WireMessage]:
    """Next frame from ``sock`` or None when the peer closed between frames."""
    header = recv_exact(sock, _HEADER.size, allow_eof=True)
    if header is None:
        return None
    magic, version, msg_type, fid_len = _HEADER.unpack(header)
    _check_header(magic, version)
    fid = recv_exact(sock, fid_len) if fid_len else b""
    (payload_len,) = _LENGTH.unpack(recv_exact(sock, _LENGTH.size))
    if payload_len > MAX_PAYLOAD:
        raise MalformedMessage(f"Payload of {payload_len} bytes is too large")
    payload = recv_exact(sock, payload_len) if payload_len else b""
    return WireMessage(msg_type=msg_type, fid=fid, payload=payload, version=version)


def send_message(sock: socket.socket, message: WireMessage) -> None:
    try:
        sock.sendall(message.to_bytes())
    except OSError as exc:
        raise TransportError(f"Send failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Payloads
# ---------------------------------------------------------------------------


@dataclass
class UploadRequest:
    """Outsourced file: raw blocks, serialized tags and, for DSCS I, the skip list."""

    protocol: Protocol
    segment_bytes: int
    public_key: bytes
    blocks: List[bytes]
    tags: List[bytes]
    skiplist: bytes = b""

    def to_bytes(self) -> bytes:
        return b"".join([
            _UPLOAD_HEAD.pack(self.protocol, self.segment_bytes),
            encode_blob(self.public_key),
            encode_blob_vec(self.blocks),
            encode_blob_vec(self.tags),
            encode_blob(self.skiplist),
        ])

    @classmethod
    def parse(cls, data: bytes) -> "UploadRequest":
        if len(data) < _UPLOAD_HEAD.size:
            raise MalformedMessage("Truncated upload header")
        protocol, segment_bytes = _UPLOAD_HEAD.unpack_from(data)
        try:
            protocol = Protocol(protocol)
        except ValueError as exc:
            raise MalformedMessage(f"Unknown protocol code {protocol}") from exc
        if segment_bytes < 1:
            raise MalformedMessage("Segment width must be positive")
        public_key, offset = decode_blob(data, _UPLOAD_HEAD.size)
        blocks, offset = decode_blob_vec(data, offset)
        tags, offset = decode_blob_vec(data, offset)
        skiplist, offset = decode_blob(data, offset)
        _expect_end(data, offset, "upload")
        return cls(protocol, segment_bytes, public_key, blocks, tags, skiplist)


def encode_count(m: int) -> bytes:
    return struct.pack(">Q", m)


def decode_count(data: bytes) -> int:
    m = read_be_uint(data, 0, 8)
    _expect_end(data, 8, "count")
    return m


def encode_read(index: int) -> bytes:
    return struct.pack(">Q", index)


def decode_read(data: bytes) -> int:
    return decode_count(data)


@dataclass
class ReadReply:
    block: bytes
    tag: bytes
    proof: Optional[SkipListProof] = None

    def to_bytes(self) -> bytes:
        parts = [encode_blob(self.block), encode_blob(self.tag)]
        parts.append(b"\x00" if self.proof is None else b"\x01" + self.proof.to_bytes())
        return b"".join(parts)

    @classmethod
    def parse(cls, data: bytes) -> "ReadReply":
        block, offset = decode_blob(data)
        tag, offset = decode_blob(data, offset)
        has_proof = read_be_uint(data, offset, 1)
        offset += 1
        proof = None
        if has_proof:
            proof, offset = SkipListProof.from_bytes(data, offset)
        _expect_end(data, offset, "read reply")
        return cls(block=block, tag=tag, proof=proof)


@dataclass
class UpdateRequest:
    kind: UpdateKind
    index: int
    h: Optional[int] = None
    block: Optional[bytes] = None
    tag: Optional[bytes] = None

    def to_bytes(self) -> bytes:
        flags = (
            (_HAS_H if self.h is not None else 0)
            | (_HAS_BLOCK if self.block is not None else 0)
            | (_HAS_TAG if self.tag is not None else 0)
        )
        parts = [_UPDATE_HEAD.pack(self.kind, self.index, flags)]
        if self.h is not None:
            parts.append(encode_int(self.h))
        if self.block is not None:
            parts.append(encode_blob(self.block))
        if self.tag is not None:
            parts.append(encode_blob(self.tag))
        return b"".join(parts)

    @classmethod
    def parse(cls, data: bytes) -> "UpdateRequest":
        if len(data) < _UPDATE_HEAD.size:
            raise MalformedMessage("Truncated update header")
        kind, index, flags = _UPDATE_HEAD.unpack_from(data)
        try:
            kind = UpdateKind(kind)
        except ValueError as exc:
            raise MalformedMessage(f"Unknown update code {kind}") from exc
        offset = _UPDATE_HEAD.size
        request = cls(kind=kind, index=index)
        if flags & _HAS_H:
            request.h, offset = decode_int(data, offset)
        if flags & _HAS_BLOCK:
            request.block, offset = decode_blob(data, offset)
        if flags & _HAS_TAG:
            request.tag, offset = decode_blob(data, offset)
        _expect_end(data, offset, "update")
        return request


@dataclass
class UpdateReply:
    """New file size plus, for DSCS I, the skip-list proof of the update."""

    m: int
    proof: Optional[SkipListProof] = None

    def to_bytes(self) -> bytes:
        tail = b"\x00" if self.proof is None else b"\x01" + self.proof.to_bytes()
        return encode_count(self.m) + tail

    @classmethod
    def parse(cls, data: bytes) -> "UpdateReply":
        m = read_be_uint(data, 0, 8)
        has_proof = read_be_uint(data, 8, 1)
        offset = 9
        proof = None
        if has_proof:
            proof, offset = SkipListProof.from_bytes(data, offset)
        _expect_end(data, offset, "update reply")
        return cls(m=m, proof=proof)


@dataclass
class ErrorReply:
    code: int
    message: str = ""

    def to_bytes(self) -> bytes:
        return _ERROR_HEAD.pack(self.code) + self.message.encode("utf-8")

    @classmethod
    def parse(cls, data: bytes) -> "ErrorReply":
        code = read_be_uint(data, 0, 2)
        try:
            text = data[2:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessage("Error text is not UTF-8") from exc
        return cls(code=code, message=text)
