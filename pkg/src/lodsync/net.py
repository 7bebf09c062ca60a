"""Real UDP runners for the server, the client and a probe-only session.

Both ends timestamp with integer milliseconds since a shared ``--epoch``
(seconds since the Unix epoch, default: process start) so their metric
files line up.  The client opens the session by sending a zero MOVE every
250 ms until the server answers; the server learns the client address from
the first datagram it gets and starts the game then.

Usage::

    lodsync-server --bind 127.0.0.1:7000 --roles r.txt --groups g.txt --scene s.txt --metrics server.csv
    lodsync-client --server 127.0.0.1:7001 --bot greedy --metrics client.csv
    python -m lodsync.net probe-server --bind 127.0.0.1:7000 --rounds 10 --out rounds.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import select
import signal
import socket
import sys
import time
from pathlib import Path

from . import metrics as mx
from . import wire
from .duckhunt import Bot, DuckHunt, bot_policy, load_scene
from .engine import ClientModel, ServerEngine
from .monitor import CongestionMonitor
from .organization import load_organization
from .proxy import parse_addr

log = logging.getLogger(__name__)

HELLO_EVERY_MS = 250
ROUND_EVERY_MS = 5000


class Clock:
    def __init__(self, epoch: float | None = None):
        self.epoch = time.time() if epoch is None else epoch

    def now(self) -> int:
        return int((time.time() - self.epoch) * 1000)


def _socket(bind=None, bufsize: int = 8 << 20) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, bufsize)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, bufsize)
    if bind is not None:
        s.bind(bind)
    s.setblocking(False)
    return s


def _drain(sock: socket.socket, peer=None):
    """Read every queued datagram; yields (data, addr)."""
    while True:
        try:
            data, addr = sock.recvfrom(65535)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            # e.g. ICMP port unreachable surfaced on the next read
            continue
        if peer is None or addr == peer:
            yield data, addr


class _Stopper:
    def __init__(self):
        self.stop = False
        signal.signal(signal.SIGTERM, self._set)
        signal.signal(signal.SIGINT, self._set)

    def _set(self, *_):
        self.stop = True


# -- server -------------------------------------------------------------------------

class ServerRunner:
    def __init__(self, sock: socket.socket, engine_factory, clock: Clock, duration_s: float):
        self.sock = sock
        self.engine_factory = engine_factory
        self.engine: ServerEngine | None = None
        self.clock = clock
        self.end_ms = int(duration_s * 1000)
        self.client = None
        self.decode_errors = 0
        self.send_errors = 0

    def _send(self, msgs):
        for m in msgs:
            try:
                self.sock.sendto(wire.encode(m), self.client)
            except BlockingIOError:
                self.send_errors += 1
            except OSError as exc:
                self.send_errors += 1
                log.debug("send failed: %s", exc)

    def run(self, stopper: _Stopper | None = None) -> None:
        clock = self.clock
        while not (stopper and stopper.stop):
            now = clock.now()
            if now >= self.end_ms:
                break
            if self.engine is not None:
                self._send(self.engine.run_until(now))
                timeout = max(0, self.engine.next_wakeup() - clock.now()) / 1000.0
            else:
                timeout = 0.05
            readable, _, _ = select.select([self.sock], [], [], min(timeout, 0.05))
            if not readable:
                continue
            for data, addr in _drain(self.sock, self.client):
                try:
                    msg = wire.decode(data)
                except wire.WireError:
                    self.decode_errors += 1
                    continue
                now = clock.now()
                if self.engine is None:
                    self.client = addr
                    self.engine = self.engine_factory(now)
                    log.info("client %s:%d joined at t=%d ms", *addr, now)
                self.engine.on_message(msg, now)

    def summary(self) -> dict:
        eng = self.engine
        out = {"decode_errors": self.decode_errors, "send_errors": self.send_errors}
        if eng is None:
            return out
        out.update({
            "bot_score": eng.game.scene.score,
            "score_events_sum": sum(eng.game.scene.score_events),
            "inputs_applied": eng.inputs_applied,
            "bad_inputs": eng.bad_inputs,
            "datagrams_out": sum(v for (k, _, _), v in eng.metrics.counts.items() if k == "pkts_out"),
            "rounds_completed": eng.monitor.rounds_completed,
            "spurious_acks": eng.monitor.spurious_acks,
            "reassignment_events": len(eng.deltas),
        })
        return out


def server_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lodsync-server", description="Authoritative game server over UDP.")
    ap.add_argument("--bind", required=True, help="addr:port")
    ap.add_argument("--roles", required=True)
    ap.add_argument("--groups", required=True)
    ap.add_argument("--scene", required=True)
    ap.add_argument("--metrics", required=True, help="event CSV written on exit")
    ap.add_argument("--adaptation", choices=("lod", "fixed"), default="lod")
    ap.add_argument("--seed", type=int, default=None, help="overrides the scene seed")
    ap.add_argument("--batch", action="store_true", help="one datagram per group per tick")
    ap.add_argument("--epoch", type=float, default=None)
    ap.add_argument("--duration", type=float, default=60.0, help="seconds after the epoch to stop")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s server %(message)s")
    try:
        org = load_organization(args.roles, args.groups)
        scene = load_scene(args.scene)
        if args.seed is not None:
            scene.seed = args.seed
        sock = _socket(parse_addr(args.bind))
    except (OSError, ValueError) as exc:
        return _fail("server", exc)
    metrics = mx.MetricsLog(log_updates=False)

    def factory(now):
        return ServerEngine(org, DuckHunt(scene), adaptation=args.adaptation, batch=args.batch,
                            metrics=metrics, start_ms=now)

    runner = ServerRunner(sock, factory, Clock(args.epoch), args.duration)
    try:
        runner.run(_Stopper())
    finally:
        sock.close()
        _write(args.metrics, metrics, runner.summary())
        if runner.engine is not None:
            Path(args.metrics + ".entities").write_text(
                "entity_id,role,spawn_ms\n"
                + "".join(f"{e},{r},{t}\n" for t, e, r in sorted(runner.engine.spawn_log)))
    if runner.engine is None:
        return _fail("server", RuntimeError("no client joined before the end of the run"))
    return 0


# -- client -------------------------------------------------------------------------

class ClientRunner:
    def __init__(self, sock: socket.socket, server, model: ClientModel, clock: Clock,
                 duration_s: float, *, bot: str = "greedy", bot_ms: int = 20, sample_ms: int = 100,
                 speed: float = 300.0, hit_radius: float = 20.0):
        self.sock = sock
        self.server = server
        self.model = model
        self.clock = clock
        self.end_ms = int(duration_s * 1000)
        self.bot_name = bot
        self.bot = Bot(speed=speed, hit_radius=hit_radius)
        self.bot_ms = bot_ms
        self.sample_ms = sample_ms
        self.joined = False
        self.decode_errors = 0
        self.send_errors = 0

    def _send(self, msgs):
        for m in msgs:
            try:
                self.sock.sendto(wire.encode(m), self.server)
            except OSError:
                self.send_errors += 1

    def run(self, stopper: _Stopper | None = None) -> None:
        clock, model = self.clock, self.model
        now = clock.now()
        next_hello = now
        next_sample = (now // self.sample_ms + 1) * self.sample_ms
        next_bot = (now // self.bot_ms + 1) * self.bot_ms
        while not (stopper and stopper.stop):
            now = clock.now()
            if now >= self.end_ms:
                break
            if not self.joined and now >= next_hello:
                self._send([model.make_input(wire.MOVE, 0.0, 0.0, now)])
                next_hello = now + HELLO_EVERY_MS
            if now >= next_sample:
                model.sample_staleness(now)
                next_sample += self.sample_ms * max(1, (now - next_sample) // self.sample_ms + 1)
            if now >= next_bot:
                if self.joined and self.bot_name != "idle":
                    self._send([model.make_input(code, dx, dy, now)
                                for code, dx, dy in bot_policy(model.view(), now, self.bot, self.bot_ms)])
                next_bot += self.bot_ms * max(1, (now - next_bot) // self.bot_ms + 1)
            wake = min(next_sample, next_bot, self.end_ms, next_hello if not self.joined else self.end_ms)
            readable, _, _ = select.select([self.sock], [], [], max(0, wake - clock.now()) / 1000.0)
            if not readable:
                continue
            batch = []
            for data, _ in _drain(self.sock, self.server):
                try:
                    batch.append(wire.decode(data))
                except wire.WireError:
                    self.decode_errors += 1
            if batch:
                self.joined = True
                self._send(model.on_messages(batch, clock.now()))

    def summary(self) -> dict:
        m = self.model
        return {
            "datagrams_in": sum(v for (k, _, _), v in m.metrics.counts.items() if k == "pkts_in"),
            "updates_applied": m.updates_applied,
            "stale_rejected": m.stale_rejected,
            "dropped_unknown": m.dropped_unknown,
            "bot_shots": self.bot.shots,
            "client_decode_errors": self.decode_errors,
            "client_send_errors": self.send_errors,
        }


def client_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lodsync-client", description="Headless game client over UDP.")
    ap.add_argument("--server", required=True, help="server (or proxy) addr:port")
    ap.add_argument("--bot", choices=("greedy", "idle"), default="greedy")
    ap.add_argument("--metrics", required=True, help="event CSV written on exit")
    ap.add_argument("--scene", default=None, help="scene file for the bot's speed and hit radius")
    ap.add_argument("--sample-ms", type=int, default=100)
    ap.add_argument("--bot-ms", type=int, default=20)
    ap.add_argument("--log-updates", action="store_true")
    ap.add_argument("--epoch", type=float, default=None)
    ap.add_argument("--duration", type=float, default=60.0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s client %(message)s")
    try:
        scene = load_scene(args.scene) if args.scene else None
        server = parse_addr(args.server)
        sock = _socket(("127.0.0.1" if server[0] in ("127.0.0.1", "localhost") else "0.0.0.0", 0))
    except (OSError, ValueError) as exc:
        return _fail("client", exc)
    metrics = mx.MetricsLog(log_updates=args.log_updates)
    kw = {}
    if scene is not None:
        kw = {"speed": scene.speeds.get("reticle", 300.0), "hit_radius": scene.hit_radius}
    runner = ClientRunner(sock, server, ClientModel(metrics), Clock(args.epoch), args.duration,
                          bot=args.bot, bot_ms=args.bot_ms, sample_ms=args.sample_ms, **kw)
    try:
        runner.run(_Stopper())
    finally:
        sock.close()
        _write(args.metrics, metrics, runner.summary())
    return 0 if runner.joined else _fail("client", RuntimeError("server never answered"))


# -- probe-only session ---------------------------------------------------------

def probe_session(sock: socket.socket, clock: Clock, rounds: int, timeout_s: float = 30.0):
    """Run ``rounds`` back-to-back probe rounds against whoever says hello first.

    Returns [(round_id, loss_percent)].  The peer only has to echo probes,
    which is what the regular client does.
    """
    deadline = clock.now() + int(timeout_s * 1000)
    peer = None
    while peer is None:
        if clock.now() > deadline:
            raise TimeoutError("no peer said hello")
        if select.select([sock], [], [], 0.05)[0]:
            for _, addr in _drain(sock):
                peer = peer or addr
    mon = CongestionMonitor()
    start = clock.now()
    next_round = start
    started = 0
    results = []
    seq = 0
    while len(results) < rounds:
        now = clock.now()
        if started < rounds and now >= next_round:
            mon.start_round(now)
            started += 1
            next_round += ROUND_EVERY_MS
        for rid, idx in mon.due_probes(now):
            try:
                sock.sendto(wire.encode(wire.Probe(seq, now, rid, idx)), peer)
            except OSError:
                pass
            seq += 1
        results += mon.poll(now)
        wake = [next_round] if started < rounds else []
        nxt = mon.next_send_ms()
        if nxt is not None:
            wake.append(nxt)
        wake.append(now + 50)
        if select.select([sock], [], [], max(0, min(wake) - clock.now()) / 1000.0)[0]:
            for data, _ in _drain(sock, peer):
                try:
                    msg = wire.decode(data)
                except wire.WireError:
                    continue
                if isinstance(msg, wire.ProbeAck):
                    mon.record_ack(msg.round_id, msg.probe_index, clock.now())
    return results[:rounds]


def probe_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lodsync-net probe-server",
                                 description="Measure probe-round loss towards one echoing client.")
    ap.add_argument("--bind", required=True)
    ap.add_argument("--rounds", type=int, default=10)
    ap.add_argument("--out", required=True, help="CSV of round_id,loss_percent")
    ap.add_argument("--epoch", type=float, default=None)
    args = ap.parse_args(argv)
    try:
        sock = _socket(parse_addr(args.bind))
        results = probe_session(sock, Clock(args.epoch), args.rounds)
    except (OSError, ValueError, TimeoutError) as exc:
        return _fail("probe-server", exc)
    Path(args.out).write_text("round_id,loss_percent\n"
                              + "".join(f"{r},{mx._fmt(v)}\n" for r, v in results))
    return 0


# -- helpers ------------------------------------------------------------------------

def _write(path: str, metrics: mx.MetricsLog, summary: dict) -> None:
    metrics.write(path)
    mx.write_kv(path + ".summary", sorted(summary.items()))


def _fail(component: str, exc: Exception) -> int:
    print("ERROR " + json.dumps({"component": component, "kind": type(exc).__name__,
                                 "message": str(exc)}), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    commands = {"server": server_main, "client": client_main, "probe-server": probe_main}
    if not argv or argv[0] not in commands:
        print(f"usage: python -m lodsync.net {{{','.join(commands)}}} ...", file=sys.stderr)
        return 2
    return commands[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
