"""Capacity-limited UDP forwarder.

Each direction gets a packets-per-second budget taken from a capacity
schedule.  Time is cut into fixed 1 s windows aligned to the proxy start;
within a window the first ``capacity`` packets are forwarded and the rest
are silently dropped.

Schedule file: one ``<start_offset_s> <pkts_per_s>`` pair per line,
``#`` comments allowed, first offset 0, offsets strictly increasing.  The
last entry holds forever.
"""

from __future__ import annotations

import argparse
import bisect
import csv
import heapq
import json
import logging
import random
import select
import signal
import socket
import sys
import time
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

WINDOW_MS = 1000
UP = "up"      # client -> server
DOWN = "down"  # server -> client
DIRECTIONS = (UP, DOWN)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class CapacitySchedule:
    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.entries:
            raise ScheduleError("empty schedule")
        if self.entries[0][0] != 0:
            raise ScheduleError("first entry must start at offset 0")
        for (a, _), (b, _) in zip(self.entries, self.entries[1:]):
            if b <= a:
                raise ScheduleError(f"offsets must be strictly increasing ({a} then {b})")
        for _, c in self.entries:
            if c < 1:
                raise ScheduleError("capacity must be at least 1 packet per second")

    @property
    def offsets(self) -> list[int]:
        return [o for o, _ in self.entries]

    def capacity_at(self, second: float) -> int:
        i = bisect.bisect_right(self.offsets, second) - 1
        return self.entries[max(i, 0)][1]

    def segments(self, end_s: float) -> list[tuple[int, float, int]]:
        """(start_s, end_s, capacity) for every segment that begins before ``end_s``."""
        out = []
        for i, (start, cap) in enumerate(self.entries):
            if start >= end_s:
                break
            stop = self.entries[i + 1][0] if i + 1 < len(self.entries) else end_s
            out.append((start, min(stop, end_s), cap))
        return out

    def to_text(self) -> str:
        return "".join(f"{o} {c}\n" for o, c in self.entries)


def parse_schedule(text: str) -> CapacitySchedule:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ScheduleError(f"line {lineno}: expected '<start_offset_s> <pkts_per_s>'")
        try:
            offset, cap = int(parts[0]), int(parts[1])
        except ValueError:
            raise ScheduleError(f"line {lineno}: offsets and capacities must be integers") from None
        if offset < 0:
            raise ScheduleError(f"line {lineno}: negative offset")
        if entries and offset == entries[-1][0]:
            raise ScheduleError(f"line {lineno}: duplicate offset {offset}")
        if entries and offset < entries[-1][0]:
            raise ScheduleError(f"line {lineno}: offset {offset} goes backwards")
        if not entries and offset != 0:
            raise ScheduleError(f"line {lineno}: first entry must start at offset 0")
        if cap < 1:
            raise ScheduleError(f"line {lineno}: capacity must be at least 1")
        entries.append((offset, cap))
    if not entries:
        raise ScheduleError("empty schedule")
    return CapacitySchedule(tuple(entries))


def load_schedule(path: str | Path) -> CapacitySchedule:
    return parse_schedule(Path(path).read_text())


@dataclass(frozen=True)
class WindowStats:
    direction: str
    window: int
    capacity: int
    forwarded: int
    dropped: int


class _Direction:
    __slots__ = ("window", "cap", "forwarded", "dropped", "history")

    def __init__(self):
        self.window = -1
        self.cap = 0
        self.forwarded = 0
        self.dropped = 0
        self.history: list[tuple[int, int, int, int]] = []


class CapacityLimiter:
    """Fixed-window admission for both directions."""

    def __init__(self, schedule: CapacitySchedule, start_ms: float = 0):
        self.schedule = schedule
        self.start_ms = start_ms
        self._dirs = {d: _Direction() for d in DIRECTIONS}

    def _roll(self, st: _Direction, window: int) -> None:
        if st.window >= 0:
            st.history.append((st.window, st.cap, st.forwarded, st.dropped))
        for w in range(st.window + 1, window):
            st.history.append((w, self.schedule.capacity_at(w), 0, 0))
        st.window = window
        st.cap = self.schedule.capacity_at(window)
        st.forwarded = st.dropped = 0

    def admit(self, direction: str, now_ms: float) -> bool:
        """True to forward, False to drop."""
        st = self._dirs[direction]
        window = int((now_ms - self.start_ms) // WINDOW_MS)
        if window != st.window:
            if window < st.window:
                raise ValueError("time went backwards")
            self._roll(st, window)
        if st.forwarded < st.cap:
            st.forwarded += 1
            return True
        st.dropped += 1
        return False

    def admit_count(self, direction: str, now_ms: float, n: int) -> int:
        """Admit ``n`` packets arriving together; the first k returned are forwarded."""
        st = self._dirs[direction]
        window = int((now_ms - self.start_ms) // WINDOW_MS)
        if window != st.window:
            if window < st.window:
                raise ValueError("time went backwards")
            self._roll(st, window)
        k = min(n, st.cap - st.forwarded)
        st.forwarded += k
        st.dropped += n - k
        return k

    def stats(self, until_ms: float | None = None) -> list[WindowStats]:
        """Window history per direction, including the current window.

        With ``until_ms`` idle windows up to that time are filled with zeros.
        """
        out = []
        last = None if until_ms is None else int((until_ms - self.start_ms - 1) // WINDOW_MS)
        for d in DIRECTIONS:
            st = self._dirs[d]
            rows = list(st.history)
            if st.window >= 0:
                rows.append((st.window, st.cap, st.forwarded, st.dropped))
            if last is not None:
                seen = rows[-1][0] if rows else -1
                rows += [(w, self.schedule.capacity_at(w), 0, 0) for w in range(seen + 1, last + 1)]
            out += [WindowStats(d, *r) for r in rows]
        return out


def write_stats(path: str | Path, stats: list[WindowStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "window_s", "capacity", "forwarded", "dropped"])
        for s in stats:
            w.writerow([s.direction, s.window, s.capacity, s.forwarded, s.dropped])


def read_stats(path: str | Path) -> list[WindowStats]:
    with open(path, newline="") as fh:
        return [WindowStats(r["direction"], int(r["window_s"]), int(r["capacity"]),
                            int(r["forwarded"]), int(r["dropped"]))
                for r in csv.DictReader(fh)]


# -- socket runtime -------------------------------------------------------------

def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


class UdpProxy:
    """Forwards between one client and one server, learning the client address."""

    def __init__(self, listen: tuple[str, int], server: tuple[str, int], schedule: CapacitySchedule,
                 *, delay_ms: float = 0.0, jitter_ms: float = 0.0, loss_up: float = 0.0,
                 loss_down: float = 0.0, seed: int = 0, rcvbuf: int = 8 << 20):
        self.server = server
        self.front = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.back = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for s in (self.front, self.back):
            s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, rcvbuf)
            s.setblocking(False)
        self.front.bind(listen)
        self.back.bind(("127.0.0.1" if server[0] in ("127.0.0.1", "localhost") else "0.0.0.0", 0))
        self.client = None
        self.schedule = schedule
        self.limiter: CapacityLimiter | None = None
        self.delay_ms = delay_ms
        self.jitter_ms = jitter_ms
        self.loss = {UP: loss_up / 100.0, DOWN: loss_down / 100.0}
        self.rng = random.Random(seed)
        self.queue: list = []
        self._qseq = 0
        self._last_due = {UP: 0.0, DOWN: 0.0}
        self.random_drops = {UP: 0, DOWN: 0}
        self.running = True

    @property
    def address(self) -> tuple[str, int]:
        return self.front.getsockname()

    def _now_ms(self):
        return time.monotonic() * 1000.0

    def _handle(self, direction, data, now):
        p = self.loss[direction]
        if p and self.rng.random() < p:
            self.random_drops[direction] += 1
            return
        if not self.limiter.admit(direction, now):
            return
        if self.delay_ms or self.jitter_ms:
            due = now + self.delay_ms + (self.rng.uniform(0, self.jitter_ms) if self.jitter_ms else 0)
            due = max(due, self._last_due[direction])  # no reordering
            self._last_due[direction] = due
            heapq.heappush(self.queue, (due, self._qseq, direction, data))
            self._qseq += 1
        else:
            self._send(direction, data)

    def _send(self, direction, data):
        try:
            if direction == UP:
                self.back.sendto(data, self.server)
            elif self.client is not None:
                self.front.sendto(data, self.client)
        except OSError:
            pass

    def run(self, duration_s: float | None = None) -> None:
        start = self._now_ms()
        self.limiter = CapacityLimiter(self.schedule, start)
        end = None if duration_s is None else start + duration_s * 1000.0
        socks = [self.front, self.back]
        while self.running:
            now = self._now_ms()
            if end is not None and now >= end:
                break
            timeout = 0.05
            if self.queue:
                timeout = max(0.0, min(timeout, (self.queue[0][0] - now) / 1000.0))
            readable, _, _ = select.select(socks, [], [], timeout)
            for s in readable:
                while True:
                    try:
                        data, addr = s.recvfrom(65535)
                    except (BlockingIOError, InterruptedError):
                        break
                    except OSError:
                        break
                    now = self._now_ms()
                    if s is self.front:
                        if self.client is None:
                            self.client = addr
                        elif addr != self.client:
                            continue
                        self._handle(UP, data, now)
                    else:
                        self._handle(DOWN, data, now)
            now = self._now_ms()
            while self.queue and self.queue[0][0] <= now:
                _, _, direction, data = heapq.heappop(self.queue)
                self._send(direction, data)
        self.stop_ms = self._now_ms()

    def stats(self) -> list[WindowStats]:
        return self.limiter.stats(getattr(self, "stop_ms", None)) if self.limiter else []

    def close(self):
        self.front.close()
        self.back.close()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lodsync-proxy", description=__doc__.splitlines()[0])
    ap.add_argument("--listen", required=True, help="client-facing addr:port")
    ap.add_argument("--server", required=True, help="game server addr:port")
    ap.add_argument("--schedule", required=True)
    ap.add_argument("--stats", required=True, help="per-window CSV written on exit")
    ap.add_argument("--delay-ms", type=float, default=0.0)
    ap.add_argument("--jitter-ms", type=float, default=0.0)
    ap.add_argument("--loss-up", type=float, default=0.0, help="extra random drop percent, client->server")
    ap.add_argument("--loss-down", type=float, default=0.0, help="extra random drop percent, server->client")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--duration", type=float, default=None, help="seconds to run (default: until SIGTERM)")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s proxy %(message)s")
    try:
        schedule = load_schedule(args.schedule)
        proxy = UdpProxy(parse_addr(args.listen), parse_addr(args.server), schedule,
                         delay_ms=args.delay_ms, jitter_ms=args.jitter_ms,
                         loss_up=args.loss_up, loss_down=args.loss_down, seed=args.seed)
    except (OSError, ValueError) as exc:
        print("ERROR " + json.dumps({"component": "proxy", "kind": type(exc).__name__,
                                     "message": str(exc)}), file=sys.stderr)
        return 2

    def _stop(*_):
        proxy.running = False

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    log.info("listening on %s:%d -> %s:%d", *proxy.address, *proxy.server)
    try:
        proxy.run(args.duration)
    finally:
        write_stats(args.stats, proxy.stats())
        proxy.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
