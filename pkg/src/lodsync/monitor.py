"""Packet-loss probing.

The server sends rounds of 100 probes, one every 50 ms, and counts the
echoes.  A round's loss is the percentage of probes left unanswered once
its deadline (last send + ack timeout) has passed.  Rounds run back to
back: a new round may start as soon as the previous one has sent its last
probe, while the previous one is still collecting late acks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PROBES_PER_ROUND = 100
PROBE_SPACING_MS = 50
ACK_TIMEOUT_MS = 500


class RoundInProgress(RuntimeError):
    """A round was started while another is still sending."""


class RoundNotClosed(RuntimeError):
    """Loss was requested before the round's deadline."""


@dataclass
class ProbeRound:
    round_id: int
    start_ms: int
    ack_timeout_ms: int = ACK_TIMEOUT_MS
    sent: list[tuple[int, int]] = field(default_factory=list)
    acked: set[int] = field(default_factory=set)

    @property
    def schedule(self) -> list[int]:
        return [self.start_ms + i * PROBE_SPACING_MS for i in range(PROBES_PER_ROUND)]

    @property
    def last_send_ms(self) -> int:
        return self.start_ms + (PROBES_PER_ROUND - 1) * PROBE_SPACING_MS

    @property
    def deadline_ms(self) -> int:
        return self.last_send_ms + self.ack_timeout_ms

    def is_closed(self, now: int) -> bool:
        return now > self.deadline_ms

    def due(self, now: int) -> list[int]:
        """Mark and return the probe indices whose send time has come."""
        out = []
        i = len(self.sent)
        while i < PROBES_PER_ROUND and self.start_ms + i * PROBE_SPACING_MS <= now:
            self.sent.append((i, self.start_ms + i * PROBE_SPACING_MS))
            out.append(i)
            i += 1
        return out

    def next_send_ms(self) -> int | None:
        i = len(self.sent)
        return self.start_ms + i * PROBE_SPACING_MS if i < PROBES_PER_ROUND else None


def round_loss(rnd: ProbeRound, now: int) -> float:
    if not rnd.is_closed(now):
        raise RoundNotClosed(f"round {rnd.round_id} closes after t={rnd.deadline_ms} ms")
    return (PROBES_PER_ROUND - len(rnd.acked)) / PROBES_PER_ROUND * 100.0


class CongestionMonitor:
    def __init__(self, ack_timeout_ms: int = ACK_TIMEOUT_MS):
        self.ack_timeout_ms = ack_timeout_ms
        self.pending: dict[int, ProbeRound] = {}
        self.current: ProbeRound | None = None
        self.next_round_id = 1
        self.rounds_completed = 0
        self.spurious_acks = 0
        self.late_acks = 0
        self.unknown_acks = 0
        self.last_loss_percent: float | None = None
        self.history: list[tuple[int, float]] = []

    def start_round(self, now: int) -> ProbeRound:
        if self.current is not None and now < self.current.last_send_ms:
            raise RoundInProgress(f"round {self.current.round_id} still sending")
        rnd = ProbeRound(self.next_round_id, now, self.ack_timeout_ms)
        self.next_round_id = (self.next_round_id + 1) & 0xFFFFFFFF
        self.pending[rnd.round_id] = rnd
        self.current = rnd
        return rnd

    def due_probes(self, now: int) -> list[tuple[int, int]]:
        """(round_id, probe_index) pairs to send at ``now``.

        A driver that woke up late still gets the previous round's last
        probes, as long as that round is pending.
        """
        out = []
        for rnd in self.pending.values():
            if len(rnd.sent) < PROBES_PER_ROUND:
                out += [(rnd.round_id, i) for i in rnd.due(now)]
        return out

    def next_send_ms(self) -> int | None:
        times = [t for t in (r.next_send_ms() for r in self.pending.values()) if t is not None]
        return min(times) if times else None

    def record_ack(self, round_id: int, probe_index: int, now: int) -> bool:
        """Register an echo; returns True if it counted toward the round."""
        rnd = self.pending.get(round_id)
        if rnd is None:
            self.unknown_acks += 1
            return False
        if rnd.is_closed(now):
            self.late_acks += 1
            return False
        if probe_index >= len(rnd.sent):
            self.spurious_acks += 1
            return False
        rnd.acked.add(probe_index)
        return True

    def poll(self, now: int) -> list[tuple[int, float]]:
        """Close rounds whose deadline passed; returns (round_id, loss) for each."""
        closed = []
        for rid in sorted(r.round_id for r in self.pending.values() if r.is_closed(now)):
            rnd = self.pending.pop(rid)
            loss = round_loss(rnd, now)
            self.rounds_completed += 1
            self.last_loss_percent = loss
            self.history.append((rnd.deadline_ms, loss))
            closed.append((rid, loss))
        return closed

    def current_congestion(self, now: int | None = None) -> float:
        if now is not None:
            self.poll(now)
        return 0.0 if self.last_loss_percent is None else self.last_loss_percent

    def counters(self) -> dict[str, float]:
        return {
            "rounds_completed": self.rounds_completed,
            "spurious_acks": self.spurious_acks,
            "last_loss_percent": self.current_congestion(),
        }
