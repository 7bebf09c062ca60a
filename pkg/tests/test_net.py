import json
import socket
import subprocess
import sys
import threading
import time

import pytest

from lodsync import wire
from lodsync.engine import ClientModel
from lodsync.metrics import MetricsLog
from lodsync.net import Clock, ClientRunner, _socket, probe_session
from lodsync.proxy import UP, UdpProxy, parse_schedule

pytestmark = pytest.mark.realsocket


def test_probe_session_counts_echoes():
    server = _socket(("127.0.0.1", 0))
    peer = _socket(("127.0.0.1", 0))
    stop = threading.Event()

    def echo():
        # hello, then ack every probe except index multiples of 10
        peer.sendto(b"hi", server.getsockname())
        while not stop.is_set():
            try:
                data, addr = peer.recvfrom(100)
            except BlockingIOError:
                time.sleep(0.001)
                continue
            msg = wire.decode(data)
            if msg.probe_index % 10:
                peer.sendto(wire.encode(wire.ProbeAck(0, 0, msg.round_id, msg.probe_index)), addr)

    th = threading.Thread(target=echo)
    th.start()
    try:
        results = probe_session(server, Clock(), rounds=1)
    finally:
        stop.set()
        th.join()
        server.close()
        peer.close()
    assert results == [(1, 10.0)]


def test_client_runner_joins_and_echoes():
    server = _socket(("127.0.0.1", 0))
    client_sock = _socket(("127.0.0.1", 0))
    model = ClientModel(MetricsLog())
    runner = ClientRunner(client_sock, server.getsockname(), model, Clock(), 1.0, bot="idle")
    th = threading.Thread(target=runner.run)
    th.start()
    deadline = time.time() + 2
    addr = None
    while addr is None and time.time() < deadline:
        try:
            data, addr = server.recvfrom(100)
        except BlockingIOError:
            time.sleep(0.005)
    assert isinstance(wire.decode(data), wire.Input)
    server.sendto(wire.encode(wire.Probe(0, 0, 7, 3)), addr)
    ack = None
    while ack is None and time.time() < deadline:
        try:
            msg = wire.decode(server.recvfrom(100)[0])
            if isinstance(msg, wire.ProbeAck):
                ack = msg
        except BlockingIOError:
            time.sleep(0.005)
    th.join()
    server.close()
    client_sock.close()
    assert (ack.round_id, ack.probe_index) == (7, 3)
    assert runner.joined


def test_loadgen_through_proxy(tmp_path):
    proxy_sched = parse_schedule("0 300\n")
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    sink_port = sink.getsockname()[1]
    sink.close()
    proxy = UdpProxy(("127.0.0.1", 0), ("127.0.0.1", sink_port), proxy_sched)
    th = threading.Thread(target=proxy.run, args=(2.5,))
    py = [sys.executable, "-m", "lodsync.loadgen"]
    sink_p = subprocess.Popen(py + ["sink", "--bind", f"127.0.0.1:{sink_port}", "--rate", "500",
                                    "--duration", "3", "--out", str(tmp_path / "sink.json")])
    time.sleep(0.3)
    th.start()
    src = subprocess.run(py + ["source", "--target", f"127.0.0.1:{proxy.address[1]}", "--rate", "500",
                               "--duration", "2", "--out", str(tmp_path / "src.json")])
    th.join()
    sink_p.wait(timeout=10)
    proxy.close()
    assert src.returncode == 0 and sink_p.returncode == 0
    up = [s for s in proxy.stats() if s.direction == UP]
    assert up[0].forwarded == 300 and up[0].dropped > 0
    assert sum(json.loads((tmp_path / "sink.json").read_text())["received"]) == sum(s.forwarded for s in up)


def test_server_cli_fails_cleanly_without_client(tmp_path):
    from lodsync.harness import data_path
    res = subprocess.run([sys.executable, "-m", "lodsync.net", "server", "--bind", "127.0.0.1:0",
                          "--roles", str(data_path("roles.txt")), "--groups", str(data_path("groups.txt")),
                          "--scene", str(data_path("scene.txt")), "--metrics", str(tmp_path / "s.csv"),
                          "--duration", "0.3"], capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.strip().splitlines()[-1].startswith("ERROR {")
    assert (tmp_path / "s.csv").exists()
