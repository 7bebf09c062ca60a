"""Binary datagram codec.

Every datagram starts with a 14 byte header::

    version u8 (0x01) | msg_type u8 | seq u32 | timestamp_ms u64

followed by a type specific payload.  All integers are big-endian.

=========== ==== =========================================================
type        code payload
=========== ==== =========================================================
INIT        0x01 count u16, {entity_id u32, name_len u8, name, state_len u16, state}
STATE       0x02 group_id u8, count u16, {entity_id u32, tick u32, state_len u16, state}
INPUT       0x03 input_code u8 [MOVE 0x01: dx f32, dy f32 | SHOOT 0x02: -]
PROBE       0x04 round_id u32, probe_index u8
PROBE_ACK   0x05 round_id u32, probe_index u8
=========== ==== =========================================================

Worked examples (hex)::

    PROBE seq=1 ts=0 round=1 index=0
        01 04 00000001 0000000000000000 00000001 00
    PROBE_ACK seq=2 ts=5 round=1 index=0
        01 05 00000002 0000000000000005 00000001 00
    STATE seq=3 ts=10 group=1, no entities
        01 02 00000003 000000000000000a 01 0000
    STATE seq=4 ts=10 group=0, entity 7 tick 2 state aabb
        01 02 00000004 000000000000000a 00 0001 00000007 00000002 0002 aabb
    INIT seq=0 ts=0, entity 1 role "duck" state ff
        01 01 00000000 0000000000000000 0001 00000001 04 6475636b 0001 ff
    INPUT seq=9 ts=20 MOVE dx=5.0 dy=0.0
        01 03 00000009 0000000000000014 01 40a00000 00000000
    INPUT seq=10 ts=20 SHOOT
        01 03 0000000a 0000000000000014 02
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

VERSION = 0x01
MAX_DATAGRAM = 1400

INIT = 0x01
STATE_UPDATE = 0x02
INPUT = 0x03
PROBE = 0x04
PROBE_ACK = 0x05

MOVE = 0x01
SHOOT = 0x02

_HEADER = struct.Struct(">BBIQ")
_PROBE = struct.Struct(">IB")
_U16 = struct.Struct(">H")
_STATE_HEAD = struct.Struct(">BH")
_STATE_ENTRY = struct.Struct(">IIH")
_INIT_ENTRY = struct.Struct(">IB")
_MOVE = struct.Struct(">ff")

HEADER_SIZE = _HEADER.size
STATE_ENTRY_OVERHEAD = _STATE_ENTRY.size


class WireError(Exception):
    """Base class for codec failures."""


class TruncatedError(WireError):
    pass


class UnsupportedVersionError(WireError):
    pass


class UnknownTypeError(WireError):
    pass


class TrailingDataError(WireError):
    pass


class MalformedError(WireError):
    pass


class OversizeError(WireError):
    pass


@dataclass(slots=True)
class InitEntity:
    entity_id: int
    role: str
    state: bytes


@dataclass(slots=True)
class EntityState:
    entity_id: int
    tick: int
    state: bytes


@dataclass(slots=True)
class Init:
    seq: int
    timestamp_ms: int
    entities: tuple[InitEntity, ...] = ()


@dataclass(slots=True)
class StateUpdate:
    seq: int
    timestamp_ms: int
    group_id: int
    entities: tuple[EntityState, ...] = ()


@dataclass(slots=True)
class Input:
    seq: int
    timestamp_ms: int
    code: int
    dx: float = 0.0
    dy: float = 0.0


@dataclass(slots=True)
class Probe:
    seq: int
    timestamp_ms: int
    round_id: int
    probe_index: int


@dataclass(slots=True)
class ProbeAck:
    seq: int
    timestamp_ms: int
    round_id: int
    probe_index: int


Message = Union[Init, StateUpdate, Input, Probe, ProbeAck]

_TYPE_CODES = {Init: INIT, StateUpdate: STATE_UPDATE, Input: INPUT, Probe: PROBE, ProbeAck: PROBE_ACK}


def encode(msg: Message) -> bytes:
    try:
        code = _TYPE_CODES[type(msg)]
    except KeyError:
        raise TypeError(f"not a wire message: {msg!r}") from None
    try:
        parts = [_HEADER.pack(VERSION, code, msg.seq, msg.timestamp_ms)]
        if code == PROBE or code == PROBE_ACK:
            parts.append(_PROBE.pack(msg.round_id, msg.probe_index))
        elif code == STATE_UPDATE:
            parts.append(_STATE_HEAD.pack(msg.group_id, len(msg.entities)))
            for e in msg.entities:
                parts.append(_STATE_ENTRY.pack(e.entity_id, e.tick, len(e.state)))
                parts.append(e.state)
        elif code == INPUT:
            parts.append(bytes((msg.code,)))
            if msg.code == MOVE:
                parts.append(_MOVE.pack(msg.dx, msg.dy))
        else:
            parts.append(_U16.pack(len(msg.entities)))
            for e in msg.entities:
                name = e.role.encode("utf-8")
                parts.append(_INIT_ENTRY.pack(e.entity_id, len(name)))
                parts.append(name)
                parts.append(_U16.pack(len(e.state)))
                parts.append(e.state)
    except (struct.error, ValueError) as exc:
        raise MalformedError(f"field out of range: {exc}") from None
    data = b"".join(parts)
    if len(data) > MAX_DATAGRAM:
        raise OversizeError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM}")
    return data


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, st):
        return st.unpack(self.take(st.size))


def decode(data: bytes) -> Message:
    """Decode one datagram; raises a ``WireError`` subclass on bad input."""
    data = bytes(data)
    if len(data) > MAX_DATAGRAM:
        raise OversizeError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM}")
    r = _Reader(data)
    if not data:
        raise TruncatedError("empty datagram")
    if data[0] != VERSION:
        raise UnsupportedVersionError(f"unsupported version 0x{data[0]:02x}")
    if len(data) > 1 and data[1] not in (INIT, STATE_UPDATE, INPUT, PROBE, PROBE_ACK):
        raise UnknownTypeError(f"unknown message type 0x{data[1]:02x}")
    _, code, seq, ts = r.unpack(_HEADER)
    if code == PROBE or code == PROBE_ACK:
        round_id, index = r.unpack(_PROBE)
        msg = (Probe if code == PROBE else ProbeAck)(seq, ts, round_id, index)
    elif code == STATE_UPDATE:
        group_id, count = r.unpack(_STATE_HEAD)
        entities = []
        for _ in range(count):
            eid, tick, n = r.unpack(_STATE_ENTRY)
            entities.append(EntityState(eid, tick, r.take(n)))
        msg = StateUpdate(seq, ts, group_id, tuple(entities))
    elif code == INPUT:
        (input_code,) = r.take(1)
        dx = dy = 0.0
        if input_code == MOVE:
            dx, dy = r.unpack(_MOVE)
        msg = Input(seq, ts, input_code, dx, dy)
    else:
        (count,) = r.unpack(_U16)
        entities = []
        for _ in range(count):
            eid, n = r.unpack(_INIT_ENTRY)
            try:
                role = r.take(n).decode("utf-8")
            except UnicodeDecodeError:
                raise MalformedError("role name is not valid UTF-8") from None
            (slen,) = r.unpack(_U16)
            entities.append(InitEntity(eid, role, r.take(slen)))
        msg = Init(seq, ts, tuple(entities))
    if r.pos != len(data):
        raise TrailingDataError(f"{len(data) - r.pos} trailing bytes")
    return msg


def state_entry_size(state: bytes) -> int:
    return STATE_ENTRY_OVERHEAD + len(state)


def split_state_update(seq: int, timestamp_ms: int, group_id: int,
                       entities: list[EntityState]) -> list[StateUpdate]:
    """Pack entities into as few datagrams as fit the size limit.

    Always returns at least one message; an empty batch becomes one empty update.
    Sequence numbers are assigned consecutively from ``seq``.
    """
    budget = MAX_DATAGRAM - HEADER_SIZE - _STATE_HEAD.size
    batches, cur, used = [], [], 0
    for e in entities:
        size = state_entry_size(e.state)
        if size > budget:
            raise OversizeError(f"entity {e.entity_id} state does not fit a datagram")
        if used + size > budget:
            batches.append(cur)
            cur, used = [], 0
        cur.append(e)
        used += size
    batches.append(cur)
    return [StateUpdate((seq + i) & 0xFFFFFFFF, timestamp_ms, group_id, tuple(b))
            for i, b in enumerate(batches)]


def split_init(seq: int, timestamp_ms: int, entities: list[InitEntity]) -> list[Init]:
    budget = MAX_DATAGRAM - HEADER_SIZE - _U16.size
    batches, cur, used = [], [], 0
    for e in entities:
        size = _INIT_ENTRY.size + len(e.role.encode("utf-8")) + _U16.size + len(e.state)
        if size > budget:
            raise OversizeError(f"entity {e.entity_id} does not fit a datagram")
        if used + size > budget:
            batches.append(cur)
            cur, used = [], 0
        cur.append(e)
        used += size
    batches.append(cur)
    return [Init((seq + i) & 0xFFFFFFFF, timestamp_ms, tuple(b)) for i, b in enumerate(batches)]
