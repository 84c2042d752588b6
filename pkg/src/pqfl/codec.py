"""Canonical binary serialization for parameter vectors and envelopes.

Signatures are computed over byte strings, so every encoder here is a pure
function with one fixed layout (little-endian, row-major), independent of
host platform:

    parameter payload   u32 rank | u64 dim * rank | f32 values (row-major)
    envelope            header | payload | u32 signature_len | signature
    header (23 bytes)   "PQFL" | u8 version=1 | u8 msg_type | u8 scheme |
                        u32 round | u32 sender_id | u64 payload_len

The signature covers exactly header || payload, which binds message type,
round, and sender identity: re-labelling an envelope invalidates its
signature. NaN/Inf values are rejected in both directions so a poisoned
payload cannot corrupt aggregation silently.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from pqfl.errors import MalformedEnvelope, MalformedPayload, NonFiniteValue, UnsupportedScheme
from pqfl.sig import SchemeId, SignatureBytes

MAGIC = b"PQFL"
VERSION = 1
HEADER_LEN = 23
_HEADER_FMT = "<4sBBBIIQ"
_MAX_RANK = 64


class MsgType(enum.IntEnum):
    MODEL_DISTRIBUTION = 1
    UPDATE_SUBMISSION = 2
    PUBLIC_KEY_ANNOUNCE = 3


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat float32 parameter storage with shape metadata.

    `values` is the row-major flattening of a tensor of the given shape;
    all values must be finite. Equality is bit-exact.
    """

    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        shape = tuple(int(d) for d in self.shape)
        if len(shape) == 0 or any(d <= 0 for d in shape):
            raise MalformedPayload(f"invalid shape {shape}")
        count = 1
        for d in shape:
            count *= d
        if count != arr.size:
            raise MalformedPayload(f"shape {shape} does not match {arr.size} values")
        if not np.isfinite(arr).all():
            raise NonFiniteValue("parameter vector contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ParameterVector":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(values=arr.reshape(-1), shape=arr.shape if arr.ndim else (1,))

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.shape == other.shape and self.values.tobytes() == other.values.tobytes()

    def __repr__(self) -> str:
        return f"ParameterVector(shape={self.shape}, size={self.size})"


def encode_params(p: ParameterVector) -> bytes:
    """Serialize a parameter vector to its canonical byte layout."""
    if not np.isfinite(p.values).all():
        raise NonFiniteValue("parameter vector contains NaN or Inf")
    out = bytearray(struct.pack("<I", len(p.shape)))
    for d in p.shape:
        out += struct.pack("<Q", d)
    out += p.values.astype("<f4", copy=False).tobytes()
    return bytes(out)


def decode_params(b: bytes) -> ParameterVector:
    """Inverse of :func:`encode_params`; rejects malformed or non-finite data."""
    if len(b) < 4:
        raise MalformedPayload("payload shorter than rank field")
    (rank,) = struct.unpack_from("<I", b, 0)
    if rank == 0 or rank > _MAX_RANK:
        raise MalformedPayload(f"rank {rank} out of range 1..{_MAX_RANK}")
    if len(b) < 4 + 8 * rank:
        raise MalformedPayload("payload truncated inside shape fields")
    shape = struct.unpack_from(f"<{rank}Q", b, 4)
    count = 1
    for d in shape:
        if d == 0:
            raise MalformedPayload("zero dimension")
        count *= d
        if count > (1 << 40):
            raise MalformedPayload("dimension product overflow")
    expected = 4 + 8 * rank + 4 * count
    if len(b) != expected:
        raise MalformedPayload(f"payload length {len(b)} != expected {expected}")
    values = np.frombuffer(b, dtype="<f4", count=count, offset=4 + 8 * rank)
    if not np.isfinite(values).all():
        raise NonFiniteValue("payload contains NaN or Inf")
    return ParameterVector(values=values.copy(), shape=tuple(int(d) for d in shape))


@dataclass(frozen=True)
class MessageHeader:
    msg_type: MsgType
    scheme: SchemeId
    round: int
    sender_id: int
    payload_len: int

    def __post_init__(self):
        if not 0 <= self.round < 2**32:
            raise MalformedEnvelope(f"round {self.round} out of u32 range")
        if not 0 <= self.sender_id < 2**32:
            raise MalformedEnvelope(f"sender_id {self.sender_id} out of u32 range")
        if not 0 <= self.payload_len < 2**64:
            raise MalformedEnvelope("payload_len out of u64 range")

    def encode(self) -> bytes:
        return struct.pack(
            _HEADER_FMT,
            MAGIC,
            VERSION,
            int(self.msg_type),
            self.scheme.wire_code,
            self.round,
            self.sender_id,
            self.payload_len,
        )

    @classmethod
    def decode(cls, b: bytes) -> "MessageHeader":
        if len(b) < HEADER_LEN:
            raise MalformedEnvelope("header truncated")
        magic, version, msg_type, scheme_code, rnd, sender, payload_len = struct.unpack_from(
            _HEADER_FMT, b, 0
        )
        if magic != MAGIC:
            raise MalformedEnvelope(f"bad magic {magic!r}")
        if version != VERSION:
            raise MalformedEnvelope(f"unsupported version {version}")
        try:
            mt = MsgType(msg_type)
        except ValueError:
            raise MalformedEnvelope(f"unknown msg_type {msg_type}") from None
        try:
            scheme = SchemeId.from_wire(scheme_code)
        except UnsupportedScheme as exc:
            raise MalformedEnvelope(str(exc)) from None
        return cls(msg_type=mt, scheme=scheme, round=rnd, sender_id=sender, payload_len=payload_len)


@dataclass(frozen=True)
class SignedEnvelope:
    header: MessageHeader
    payload: bytes
    signature: SignatureBytes

    def __post_init__(self):
        if self.header.payload_len != len(self.payload):
            raise MalformedEnvelope(
                f"payload_len {self.header.payload_len} != payload size {len(self.payload)}"
            )
        if self.signature.scheme != self.header.scheme:
            raise MalformedEnvelope("signature scheme differs from header scheme")


def build_header(msg_type: MsgType, scheme: SchemeId, round: int, sender_id: int, payload: bytes) -> MessageHeader:
    return MessageHeader(
        msg_type=msg_type,
        scheme=scheme,
        round=round,
        sender_id=sender_id,
        payload_len=len(payload),
    )


def signed_bytes(header: MessageHeader, payload: bytes) -> bytes:
    """The exact byte string signatures are computed over: header || payload."""
    return header.encode() + payload


def encode_envelope(e: SignedEnvelope) -> bytes:
    sig = e.signature.data
    if len(sig) >= 2**32:
        raise MalformedEnvelope("signature too long for u32 length field")
    return e.header.encode() + e.payload + struct.pack("<I", len(sig)) + sig


def decode_envelope(b: bytes) -> SignedEnvelope:
    header = MessageHeader.decode(b)
    body_start = HEADER_LEN
    payload_end = body_start + header.payload_len
    if len(b) < payload_end + 4:
        raise MalformedEnvelope("envelope truncated before signature length")
    payload = b[body_start:payload_end]
    (sig_len,) = struct.unpack_from("<I", b, payload_end)
    sig_end = payload_end + 4 + sig_len
    if len(b) != sig_end:
        raise MalformedEnvelope(f"envelope length {len(b)} != expected {sig_end}")
    sig = b[payload_end + 4 : sig_end]
    return SignedEnvelope(
        header=header,
        payload=payload,
        signature=SignatureBytes(scheme=header.scheme, data=sig),
    )
