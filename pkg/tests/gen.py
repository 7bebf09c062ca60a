"""Random valid configurations shared by the property tests."""

import random
import struct

from hypothesis import strategies as st

from lodsync import wire
from lodsync.organization import GroupConfig, RoleSpec
from lodsync.wire import EntityState, Init, InitEntity, Input, Probe, ProbeAck, StateUpdate, decode, encode


def random_groups(rng: random.Random, n: int | None = None, scale: float = 200.0) -> list[GroupConfig]:
    """A valid group config: n-1 increasing finite thresholds plus a catch-all."""
    n = n or rng.randint(1, 6)
    thresholds = sorted(rng.sample(range(1, 10_000), n - 1))
    thresholds = [t * scale / 10_000 for t in thresholds]
    periods = sorted(rng.sample(range(1, 500), n))
    groups = [GroupConfig(i, f"g{i}", periods[i], thresholds[i]) for i in range(n - 1)]
    groups.append(GroupConfig(n - 1, f"g{n - 1}", periods[-1], None))
    return groups


def random_roles(rng: random.Random, n: int | None = None) -> list[RoleSpec]:
    n = n or rng.randint(1, 6)
    return [RoleSpec(f"r{i}", rng.uniform(0.01, 5.0)) for i in range(n)]


@st.composite
def group_configs(draw, max_groups=6):
    n = draw(st.integers(1, max_groups))
    ths = draw(st.lists(st.floats(0, 1000, allow_nan=False), min_size=n - 1, max_size=n - 1, unique=True))
    ths.sort()
    periods = sorted(draw(st.lists(st.integers(1, 1000), min_size=n, max_size=n, unique=True)))
    groups = [GroupConfig(i, f"g{i}", periods[i], ths[i]) for i in range(n - 1)]
    groups.append(GroupConfig(n - 1, f"g{n - 1}", periods[-1], None))
    return groups


def _random_message(rng: random.Random):
    kind = rng.randrange(6)
    seq, ts = rng.getrandbits(32), rng.getrandbits(64)
    if kind == 0:
        return Probe(seq, ts, rng.getrandbits(32), rng.randrange(256))
    if kind == 1:
        return ProbeAck(seq, ts, rng.getrandbits(32), rng.randrange(256))
    if kind == 2:
        dx, dy = struct.unpack(">ff", struct.pack(">ff", rng.uniform(-1e3, 1e3), rng.uniform(-1e3, 1e3)))
        return Input(seq, ts, wire.MOVE, dx, dy)
    if kind == 3:
        return Input(seq, ts, wire.SHOOT)
    if kind == 4:
        return StateUpdate(seq, ts, rng.randrange(256), tuple(
            EntityState(rng.getrandbits(32), rng.getrandbits(32), rng.randbytes(rng.randrange(10)))
            for _ in range(rng.randrange(8))))
    return Init(seq, ts, tuple(
        InitEntity(rng.getrandbits(32), rng.choice(["duck", "cloud", "é"]), rng.randbytes(rng.randrange(10)))
        for _ in range(rng.randrange(8))))


def fuzz_round_trip(n: int, seed: int = 0) -> int:
    """Round-trip ``n`` random valid messages; returns the number of mismatches."""
    rng = random.Random(seed)
    bad = 0
    for _ in range(n):
        m = _random_message(rng)
        bad += decode(encode(m)) != m
    return bad


def fuzz_garbage(n: int, seed: int = 0) -> tuple[int, int]:
    """Decode ``n`` random byte strings; returns (typed errors, untyped crashes)."""
    rng = random.Random(seed)
    typed = crashes = 0
    for i in range(n):
        if i % 2:
            data = rng.randbytes(rng.randrange(40))
        else:
            # plausible header so the payload parsers get exercised too
            data = bytes([1, rng.randrange(1, 6)]) + rng.randbytes(rng.randrange(60))
        try:
            decode(data)
        except wire.WireError:
            typed += 1
        except Exception:
            crashes += 1
    return typed, crashes
