"""Constant-rate UDP load generator for saturating the proxy.

Run one ``sink`` behind the proxy and one ``source`` in front of it.  The
source sends ``--rate`` datagrams/s upstream; the sink learns the proxy's
address from the first arrival and sends ``--rate`` datagrams/s back.  Each
side writes what it sent and received per second as JSON on exit.

    python -m lodsync.loadgen sink --bind 127.0.0.1:7000 --rate 8500 --duration 60 --out sink.json
    python -m lodsync.loadgen source --target 127.0.0.1:7001 --rate 8500 --duration 60 --out src.json
"""

from __future__ import annotations

import argparse
import json
import select
import socket
import sys
import time
from collections import Counter

from . import wire
from .proxy import parse_addr

MAX_BURST = 64


def blast(sock: socket.socket, peer, rate: float, duration_s: float, *, wait_for_peer: bool = False):
    """Send at ``rate``/s to ``peer`` while counting arrivals; returns a stats dict."""
    sent, received, errors = Counter(), Counter(), 0
    payload = wire.encode(wire.Probe(0, 0, 0, 0))
    start = time.monotonic()
    if wait_for_peer:
        while peer is None and time.monotonic() - start < duration_s:
            if select.select([sock], [], [], 0.05)[0]:
                try:
                    _, peer = sock.recvfrom(65535)
                except OSError:
                    pass
        start = time.monotonic()
        if peer is not None:
            received[0] += 1
    n_sent = 0
    end = start + duration_s
    while peer is not None:
        now = time.monotonic()
        if now >= end:
            break
        due = min(int(rate * (now - start)) - n_sent, MAX_BURST)
        sec = int(now - start)
        for _ in range(max(0, due)):
            try:
                sock.sendto(payload, peer)
                sent[sec] += 1
            except OSError:
                errors += 1
            n_sent += 1
        if select.select([sock], [], [], 0.0005)[0]:
            sec = int(time.monotonic() - start)
            while True:
                try:
                    sock.recvfrom(65535)
                except (BlockingIOError, InterruptedError):
                    break
                except OSError:
                    continue
                received[sec] += 1
    return {"sent": [sent[i] for i in range(int(duration_s) + 1)],
            "received": [received[i] for i in range(int(duration_s) + 1)],
            "send_errors": errors}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lodsync-loadgen", description="Constant-rate UDP load.")
    ap.add_argument("role", choices=("source", "sink"))
    ap.add_argument("--bind", default="127.0.0.1:0")
    ap.add_argument("--target", default=None, help="proxy addr:port (source only)")
    ap.add_argument("--rate", type=float, required=True)
    ap.add_argument("--duration", type=float, required=True)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    try:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
            sock.setsockopt(socket.SOL_SOCKET, opt, 8 << 20)
        sock.bind(parse_addr(args.bind))
        sock.setblocking(False)
        if args.role == "source":
            if args.target is None:
                raise ValueError("source needs --target")
            stats = blast(sock, parse_addr(args.target), args.rate, args.duration)
        else:
            stats = blast(sock, None, args.rate, args.duration, wait_for_peer=True)
    except (OSError, ValueError) as exc:
        print("ERROR " + json.dumps({"component": "loadgen", "kind": type(exc).__name__,
                                     "message": str(exc)}), file=sys.stderr)
        return 2
    with open(args.out, "w") as fh:
        json.dump(stats, fh)
    return 0


if __name__ == "__main__":
    sys.exit(main())
