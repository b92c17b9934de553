"""Framed coordinator/worker wire protocol and the parameter codec.

Frame format (all integers little-endian)::

    ┌───────────┬──────────┬──────────────┬──────────────┬──────────────┐
    │ "RGW1" 4B │ type 1B  │ len u32      │ payload      │ CRC-32 u32   │
    └───────────┴──────────┴──────────────┴──────────────┴──────────────┘

Payloads are msgpack maps; parameter vectors travel inside them as
``ParamWire`` bytes so they round-trip bit-exactly.
"""

import math
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Any, cast

import msgpack
import numpy as np

from armfleet.core.errors import ArmfleetError
from armfleet.core.policy import Manifest, ParamVector, PolicyError
from armfleet.types import (
    AckPayload,
    AssignConfigPayload,
    ErrorPayload,
    HelloPayload,
    LocalModelStats,
)

MAGIC = b"RGW1"
PARAM_FILE_MAGIC = b"RGP1"
HEADER = struct.Struct("<4sBI")
CHECKSUM = struct.Struct("<I")
HEADER_SIZE = HEADER.size
FRAME_OVERHEAD = HEADER.size + CHECKSUM.size
MAX_PAYLOAD = 1 << 31

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class MsgType(IntEnum):
    HELLO = 0
    ASSIGN_CONFIG = 1
    PARAMS = 2
    LOCAL_MODEL = 3
    SHUTDOWN = 4
    ERROR = 5
    ACK = 6


class ProtocolError(ArmfleetError):
    """Malformed frame or payload."""


class BadMagicError(ProtocolError):
    pass


class ChecksumError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class UnknownMessageError(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"Payload of {len(frame.payload)} bytes is too large", "size")
    header = HEADER.pack(MAGIC, int(frame.msg_type), len(frame.payload))
    return header + frame.payload + CHECKSUM.pack(zlib.crc32(frame.payload))


def _parse_header(data: bytes | bytearray) -> tuple[MsgType, int]:
    magic, raw_type, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"Bad frame magic {bytes(magic)!r}", "bad_magic")
    try:
        msg_type = MsgType(raw_type)
    except ValueError as e:
        raise UnknownMessageError(f"Unknown message type {raw_type}", "unknown_type") from e
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"Declared payload of {length} bytes is too large", "size")
    return msg_type, length


def _finish_frame(data: bytes | bytearray, msg_type: MsgType, length: int) -> Frame:
    payload = bytes(data[HEADER_SIZE : HEADER_SIZE + length])
    (expected,) = CHECKSUM.unpack_from(data, HEADER_SIZE + length)
    if zlib.crc32(payload) != expected:
        raise ChecksumError(f"Checksum mismatch in {msg_type.name} frame", "checksum")
    return Frame(msg_type, payload)


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one complete frame.

    Raises:
        TruncatedFrameError: If ``data`` is shorter than the declared frame.
        BadMagicError, ChecksumError, UnknownMessageError: On corruption.
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedFrameError(f"Frame header needs {HEADER_SIZE} bytes", "truncated")
    msg_type, length = _parse_header(data)
    total = length + FRAME_OVERHEAD
    if len(data) < total:
        raise TruncatedFrameError(
            f"Frame declares {total} bytes but only {len(data)} are present", "truncated"
        )
    if len(data) > total:
        raise ProtocolError(f"{len(data) - total} trailing bytes after frame", "trailing")
    return _finish_frame(data, msg_type, length)


class FrameDecoder:
    """Streaming decoder that keeps partial input until a frame completes."""

    def __init__(self) -> None:
        self._buffer = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buffer)

    def feed(self, data: bytes) -> list[Frame]:
        self._buffer.extend(data)
        frames: list[Frame] = []
        while len(self._buffer) >= HEADER_SIZE:
            msg_type, length = _parse_header(self._buffer)
            total = length + FRAME_OVERHEAD
            if len(self._buffer) < total:
                break
            frames.append(_finish_frame(self._buffer, msg_type, length))
            del self._buffer[:total]
        return frames


# Parameter codec


def encode_params(params: ParamVector) -> bytes:
    parts = [_U32.pack(len(params.manifest))]
    for name, shape in params.manifest:
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(len(shape))]
        parts += [_U64.pack(d) for d in shape]
    parts.append(_U64.pack(params.size))
    parts.append(params.values.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise TruncatedFrameError("Parameter payload ends early", "truncated")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def decode_params(data: bytes, version: int = 0) -> ParamVector:
    if not isinstance(data, (bytes, bytearray)):
        raise ProtocolError(
            f"Parameter payload must be bytes, not {type(data).__name__}", "payload"
        )
    reader = _Reader(data)
    entries: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"Tensor name is not UTF-8: {e}", "bad_name") from e
        rank = reader.u32()
        entries.append((name, tuple(reader.u64() for _ in range(rank))))
    manifest: Manifest = tuple(entries)

    count = reader.u64()
    declared = sum(math.prod(shape) for _, shape in manifest)
    if count != declared:
        raise ProtocolError(
            f"Value count {count} does not match manifest size {declared}", "count"
        )
    values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
    if reader.offset != len(data):
        raise ProtocolError("Trailing bytes after parameter values", "trailing")
    try:
        return ParamVector(values=values, manifest=manifest, version=version)
    except PolicyError as e:
        raise ProtocolError(f"Decoded parameters are invalid: {e}", "bad_params") from e


def save_params(params: ParamVector, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(PARAM_FILE_MAGIC + encode_params(params))
    return target


def load_params(path: str | Path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:4] != PARAM_FILE_MAGIC:
        raise BadMagicError(f"{path} is not a parameter file", "bad_magic")
    return decode_params(data[4:])


# Message payloads


def _pack(payload: dict[str, Any]) -> bytes:
    return cast(bytes, msgpack.packb(payload, use_bin_type=True))


def _unpack(frame: Frame, expected: MsgType) -> dict[str, Any]:
    if frame.msg_type != expected:
        raise UnknownMessageError(
            f"Expected {expected.name} frame, got {frame.msg_type.name}", "unexpected"
        )
    try:
        payload = msgpack.unpackb(frame.payload, raw=False)
    except (ValueError, TypeError, msgpack.OutOfData) as e:
        raise ProtocolError(f"Undecodable {expected.name} payload: {e}", "payload") from e
    if not isinstance(payload, dict):
        raise ProtocolError(f"{expected.name} payload must be a map", "payload")
    return cast(dict[str, Any], payload)


def _field(payload: dict[str, Any], key: str, frame_type: MsgType) -> Any:
    try:
        return payload[key]
    except KeyError as e:
        raise ProtocolError(f"{frame_type.name} payload lacks '{key}'", "payload") from e


def _mistyped(key: str, frame_type: MsgType, expected: str, value: Any) -> ProtocolError:
    return ProtocolError(
        f"{frame_type.name} field '{key}' must be {expected}, got {type(value).__name__}",
        "payload",
    )


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _int_field(payload: dict[str, Any], key: str, frame_type: MsgType) -> int:
    value = _field(payload, key, frame_type)
    if not _is_int(value):
        raise _mistyped(key, frame_type, "an integer", value)
    return cast(int, value)


def _optional_int_field(payload: dict[str, Any], key: str, frame_type: MsgType) -> int | None:
    value = _field(payload, key, frame_type)
    if value is not None and not _is_int(value):
        raise _mistyped(key, frame_type, "an integer or nil", value)
    return cast(int | None, value)


def _float_field(payload: dict[str, Any], key: str, frame_type: MsgType) -> float:
    value = _field(payload, key, frame_type)
    if not (_is_int(value) or isinstance(value, float)):
        raise _mistyped(key, frame_type, "a number", value)
    return float(value)


def _str_field(payload: dict[str, Any], key: str, frame_type: MsgType) -> str:
    value = _field(payload, key, frame_type)
    if not isinstance(value, str):
        raise _mistyped(key, frame_type, "a string", value)
    return value


def _bytes_field(payload: dict[str, Any], key: str, frame_type: MsgType) -> bytes:
    value = _field(payload, key, frame_type)
    if not isinstance(value, bytes):
        raise _mistyped(key, frame_type, "binary", value)
    return value


def _map_field(payload: dict[str, Any], key: str, frame_type: MsgType) -> dict[str, Any]:
    value = _field(payload, key, frame_type)
    if not isinstance(value, dict):
        raise _mistyped(key, frame_type, "a map", value)
    return cast(dict[str, Any], value)


def hello_frame(hello: HelloPayload) -> Frame:
    return Frame(MsgType.HELLO, _pack(dict(hello)))


def parse_hello(frame: Frame) -> HelloPayload:
    payload = _unpack(frame, MsgType.HELLO)
    return HelloPayload(
        worker_id_hint=_optional_int_field(payload, "worker_id_hint", MsgType.HELLO),
        pid=_int_field(payload, "pid", MsgType.HELLO),
        env=_str_field(payload, "env", MsgType.HELLO),
    )


def assign_config_frame(assign: AssignConfigPayload) -> Frame:
    return Frame(MsgType.ASSIGN_CONFIG, _pack(dict(assign)))


def parse_assign_config(frame: Frame) -> AssignConfigPayload:
    payload = _unpack(frame, MsgType.ASSIGN_CONFIG)
    return AssignConfigPayload(
        worker_id=_int_field(payload, "worker_id", MsgType.ASSIGN_CONFIG),
        env_spec=_map_field(payload, "env_spec", MsgType.ASSIGN_CONFIG),
        ppo_config=_map_field(payload, "ppo_config", MsgType.ASSIGN_CONFIG),
        global_seed=_int_field(payload, "global_seed", MsgType.ASSIGN_CONFIG),
    )


def params_frame(params: ParamVector, round_index: int) -> Frame:
    return Frame(
        MsgType.PARAMS,
        _pack(
            {
                "round": round_index,
                "version": params.version,
                "params": encode_params(params),
            }
        ),
    )


def parse_params(frame: Frame) -> tuple[ParamVector, int]:
    payload = _unpack(frame, MsgType.PARAMS)
    round_index = _int_field(payload, "round", MsgType.PARAMS)
    version = _int_field(payload, "version", MsgType.PARAMS)
    params = decode_params(_bytes_field(payload, "params", MsgType.PARAMS), version=version)
    return params, round_index


def local_model_frame(params: ParamVector, stats: LocalModelStats) -> Frame:
    return Frame(
        MsgType.LOCAL_MODEL,
        _pack({"version": params.version, "params": encode_params(params), "stats": dict(stats)}),
    )


def parse_local_model_stats(raw: dict[str, Any]) -> LocalModelStats:
    kind = MsgType.LOCAL_MODEL
    return LocalModelStats(
        worker_id=_int_field(raw, "worker_id", kind),
        round=_int_field(raw, "round", kind),
        total_steps=_int_field(raw, "total_steps", kind),
        cumulative_steps=_int_field(raw, "cumulative_steps", kind),
        episodes=_int_field(raw, "episodes", kind),
        mean_episode_reward=_float_field(raw, "mean_episode_reward", kind),
        collection_seconds=_float_field(raw, "collection_seconds", kind),
        update_seconds=_float_field(raw, "update_seconds", kind),
        kl_coeff=_float_field(raw, "kl_coeff", kind),
        final_kl=_float_field(raw, "final_kl", kind),
    )


def parse_local_model(frame: Frame) -> tuple[ParamVector, LocalModelStats]:
    payload = _unpack(frame, MsgType.LOCAL_MODEL)
    version = _int_field(payload, "version", MsgType.LOCAL_MODEL)
    params = decode_params(
        _bytes_field(payload, "params", MsgType.LOCAL_MODEL), version=version
    )
    stats = parse_local_model_stats(_map_field(payload, "stats", MsgType.LOCAL_MODEL))
    if stats["total_steps"] < 1:
        raise ProtocolError(
            f"LOCAL_MODEL reports {stats['total_steps']} steps, expected at least 1", "payload"
        )
    return params, stats


def ack_frame(ack: AckPayload) -> Frame:
    return Frame(MsgType.ACK, _pack(dict(ack)))


def parse_ack(frame: Frame) -> AckPayload:
    payload = _unpack(frame, MsgType.ACK)
    return AckPayload(
        worker_id=_int_field(payload, "worker_id", MsgType.ACK),
        round=_int_field(payload, "round", MsgType.ACK),
        digest=_str_field(payload, "digest", MsgType.ACK),
    )


def error_frame(error: ErrorPayload) -> Frame:
    return Frame(MsgType.ERROR, _pack(dict(error)))


def parse_error(frame: Frame) -> ErrorPayload:
    payload = _unpack(frame, MsgType.ERROR)
    return ErrorPayload(
        worker_id=_optional_int_field(payload, "worker_id", MsgType.ERROR),
        code=_str_field(payload, "code", MsgType.ERROR),
        message=_str_field(payload, "message", MsgType.ERROR),
    )


def shutdown_frame() -> Frame:
    return Frame(MsgType.SHUTDOWN)


class PeerError(ProtocolError):
    """The other side answered with an Error frame."""

    def __init__(self, payload: ErrorPayload):
        self.worker_id = payload["worker_id"]
        who = "peer" if self.worker_id is None else f"worker {self.worker_id}"
        super().__init__(f"Error from {who}: {payload['message']}", payload["code"])


def check_error(frame: Frame) -> Frame:
    """Raise ``PeerError`` for Error frames, otherwise return ``frame``."""
    if frame.msg_type == MsgType.ERROR:
        raise PeerError(parse_error(frame))
    return frame
