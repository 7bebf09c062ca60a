import socket
import threading
import time

import pytest
from hypothesis import given, strategies as st

from lodsync.harness import data_path
from lodsync.proxy import (
    DOWN, UP, CapacityLimiter, CapacitySchedule, ScheduleError, UdpProxy, load_schedule, main,
    parse_schedule, read_stats, write_stats,
)

TABLE2 = [(0, 6000), (30, 3000), (60, 5000), (90, 2900), (120, 7000), (150, 2500), (180, 3500), (210, 3100)]


def test_default_schedule_file():
    assert list(load_schedule(data_path("table2.sched")).entries) == TABLE2


def test_single_line_holds_forever():
    s = parse_schedule("0 1000\n")
    assert s.capacity_at(0) == 1000 and s.capacity_at(10**6) == 1000


def test_step_at_thirty_seconds():
    s = CapacitySchedule(tuple(TABLE2))
    assert s.capacity_at(29.999) == 6000 and s.capacity_at(30.0) == 3000
    assert s.capacity_at(300) == 3100


@pytest.mark.parametrize("text,fragment", [
    ("0 100\n30 200\n30 300\n", "line 3: duplicate"),
    ("0 100\n30 200\n20 300\n", "line 3"),
    ("0 100\n30 0\n", "line 2"),
    ("", "empty"),
    ("# only a comment\n", "empty"),
    ("5 100\n", "line 1"),
    ("0 x\n", "line 1"),
    ("0 100 7\n", "line 1"),
])
def test_schedule_errors(text, fragment):
    with pytest.raises(ScheduleError, match=fragment):
        parse_schedule(text)


def test_segments():
    s = CapacitySchedule(tuple(TABLE2))
    assert s.segments(75) == [(0, 30, 6000), (30, 60, 3000), (60, 75, 5000)]
    assert s.segments(240)[-1] == (210, 240, 3100)


def offer_uniform(lim: CapacityLimiter, direction: str, n: int, start_ms: float = 0.0):
    verdicts = [lim.admit(direction, start_ms + i * 1000.0 / n) for i in range(n)]
    return verdicts.count(True), verdicts.count(False)


def test_capacity_6000_offer_7000():
    lim = CapacityLimiter(parse_schedule("0 6000\n"))
    assert offer_uniform(lim, UP, 7000) == (6000, 1000)


def test_at_capacity_everything_passes():
    lim = CapacityLimiter(parse_schedule("0 3000\n"))
    assert offer_uniform(lim, DOWN, 3000) == (3000, 0)


def test_directions_are_independent():
    lim = CapacityLimiter(parse_schedule("0 10\n"))
    assert offer_uniform(lim, UP, 20) == (10, 10)
    assert offer_uniform(lim, DOWN, 20) == (10, 10)


def test_windows_aligned_to_start():
    lim = CapacityLimiter(parse_schedule("0 2\n"), start_ms=500)
    assert [lim.admit(UP, t) for t in (500, 600, 1400, 1500, 1501)] == [True, True, False, True, True]


def test_time_going_backwards_is_an_error():
    lim = CapacityLimiter(parse_schedule("0 2\n"))
    lim.admit(UP, 2500)
    with pytest.raises(ValueError):
        lim.admit(UP, 100)


def test_stats_fill_idle_windows_with_zeros():
    lim = CapacityLimiter(parse_schedule("0 5\n2 7\n"))
    assert all(s.forwarded == 0 and s.dropped == 0 for s in lim.stats(4000))
    assert [(s.window, s.capacity) for s in lim.stats(4000) if s.direction == UP] == [
        (0, 5), (1, 5), (2, 7), (3, 7)]
    lim.admit(UP, 2100)
    rows = [s for s in lim.stats(4000) if s.direction == UP]
    assert [r.window for r in rows] == [0, 1, 2, 3] and rows[2].forwarded == 1


def test_stats_csv_round_trip(tmp_path):
    lim = CapacityLimiter(parse_schedule("0 3\n"))
    for t in range(0, 3000, 100):
        lim.admit(UP, t)
    write_stats(tmp_path / "s.csv", lim.stats())
    assert read_stats(tmp_path / "s.csv") == lim.stats()


arrivals = st.lists(st.tuples(st.sampled_from([UP, DOWN]), st.integers(0, 5000)), max_size=400)


@given(arrivals, st.integers(1, 30))
def test_capacity_and_conservation(trace, cap):
    trace = sorted(trace, key=lambda a: a[1])
    lim = CapacityLimiter(parse_schedule(f"0 {cap}\n2 {cap + 3}\n"))
    verdicts = [lim.admit(d, t) for d, t in trace]
    stats = lim.stats(6000)
    for s in stats:
        assert s.forwarded <= s.capacity
        received = sum(1 for d, t in trace if d == s.direction and t // 1000 == s.window)
        assert s.forwarded + s.dropped == received
    # determinism
    lim2 = CapacityLimiter(parse_schedule(f"0 {cap}\n2 {cap + 3}\n"))
    assert [lim2.admit(d, t) for d, t in trace] == verdicts


@given(st.lists(st.tuples(st.integers(0, 3000), st.integers(0, 12)), max_size=100), st.integers(1, 40))
def test_admit_count_matches_one_by_one(bursts, cap):
    bursts.sort()
    a = CapacityLimiter(parse_schedule(f"0 {cap}\n"))
    b = CapacityLimiter(parse_schedule(f"0 {cap}\n"))
    for t, n in bursts:
        assert a.admit_count(UP, t, n) == sum(b.admit(UP, t) for _ in range(n))
    assert a.stats(4000) == b.stats(4000)


def test_cli_reports_bad_schedule(tmp_path, capsys):
    bad = tmp_path / "bad.sched"
    bad.write_text("0 100\n10 0\n")
    assert main(["--listen", "127.0.0.1:0", "--server", "127.0.0.1:9", "--schedule", str(bad),
                 "--stats", str(tmp_path / "x.csv")]) == 2
    assert '"line 2' in capsys.readouterr().err


# -- real sockets ------------------------------------------------------------------

def _udp():
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    s.settimeout(2.0)
    return s


@pytest.mark.realsocket
@pytest.mark.parametrize("delay_ms,jitter_ms", [(0, 0), (5, 10)])
def test_udp_forwarding_budget_and_order(delay_ms, jitter_ms):
    server, client = _udp(), _udp()
    proxy = UdpProxy(("127.0.0.1", 0), server.getsockname(), parse_schedule("0 50\n"),
                     delay_ms=delay_ms, jitter_ms=jitter_ms, seed=1)
    th = threading.Thread(target=proxy.run, args=(3.0,))
    th.start()
    try:
        for i in range(80):
            client.sendto(i.to_bytes(4, "big"), proxy.address)
        got = []
        try:
            while True:
                data, back = server.recvfrom(100)
                got.append(int.from_bytes(data, "big"))
        except socket.timeout:
            pass
        assert got == list(range(50))  # first 50 of the window, in order
        server.sendto(b"pong", back)
        assert client.recvfrom(100)[0] == b"pong"
    finally:
        proxy.running = False
        th.join()
        proxy.close()
        server.close()
        client.close()
    up = [s for s in proxy.stats() if s.direction == UP]
    assert up[0].forwarded == 50 and up[0].dropped == 30


@pytest.mark.realsocket
def test_udp_random_loss_flag():
    server, client = _udp(), _udp()
    proxy = UdpProxy(("127.0.0.1", 0), server.getsockname(), parse_schedule("0 100000\n"),
                     loss_up=50.0, seed=3)
    th = threading.Thread(target=proxy.run, args=(1.5,))
    th.start()
    for i in range(400):
        client.sendto(b"x", proxy.address)
        if i % 50 == 0:
            time.sleep(0.001)
    th.join()
    proxy.close()
    got = 0
    server.settimeout(0.2)
    try:
        while True:
            server.recvfrom(10)
            got += 1
    except socket.timeout:
        pass
    server.close()
    client.close()
    assert got + proxy.random_drops[UP] == 400
    assert 140 < got < 260
