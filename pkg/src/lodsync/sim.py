"""Deterministic virtual-clock run of server, proxy and client in one loop.

Messages travel as objects (no encoding) through two FIFO links with a
fixed one-way latency; the proxy's admission rule is applied inline.  Datagrams
emitted in the same millisecond are admitted together, in emission order.  The
loop jumps from event to event, so a minutes-long scenario runs in seconds.

Within one millisecond the order is: staleness sample, deliveries to the
client, deliveries to the server, server maintenance and tick, bot tick.
"""

from __future__ import annotations

import random
from collections import deque

from . import wire
from .duckhunt import Bot, DuckHunt, bot_policy
from .engine import ClientModel, ServerEngine
from .metrics import MetricsLog
from .monitor import PROBES_PER_ROUND
from .organization import Organization
from .proxy import DOWN, UP, CapacityLimiter


def exact_drop(index: int, k: int) -> bool:
    """True for exactly ``k`` of the indices 0..99, spread evenly."""
    return (index + 1) * k // PROBES_PER_ROUND > index * k // PROBES_PER_ROUND


def simulate(cfg, org: Organization, game: DuckHunt, schedule=None):
    """Run ``cfg`` (a ScenarioConfig) and return (metrics, server, client, limiter)."""
    metrics = MetricsLog(log_updates=cfg.log_updates)
    server = ServerEngine(org, game, adaptation=cfg.adaptation, batch=cfg.batch, metrics=metrics)
    client = ClientModel(metrics)
    limiter = CapacityLimiter(schedule) if schedule is not None else None
    client_on_messages = client.on_messages
    rng_down = random.Random(f"{cfg.seed}:down")
    rng_up = random.Random(f"{cfg.seed}:up")
    p_down, p_up = cfg.loss_down / 100.0, cfg.loss_up / 100.0
    probe_k = cfg.probe_loss
    latency = cfg.latency_ms
    down: deque = deque()
    up: deque = deque()
    Probe = wire.Probe

    def send(link, msgs, t, rng, p, direction):
        if p:
            msgs = [m for m in msgs if rng.random() >= p]
        if probe_k is not None and direction == DOWN:
            msgs = [m for m in msgs if type(m) is not Probe or not exact_drop(m.probe_index, probe_k)]
        if limiter is not None:
            msgs = msgs[:limiter.admit_count(direction, t, len(msgs))]
        if msgs:
            link.append((t + latency, msgs))

    bot = Bot(speed=game.config.speeds.get("reticle", 300.0), hit_radius=game.config.hit_radius)
    end = int(round(cfg.duration_s * 1000))
    bot_ms, sample_ms = cfg.bot_ms, cfg.sample_ms
    next_bot = bot_ms if cfg.bot != "idle" else end
    next_sample = 0
    t = 0
    while t < end:
        if t >= next_sample:
            client.sample_staleness(t)
            next_sample += sample_ms
        while down and down[0][0] <= t:
            replies = client_on_messages(down.popleft()[1], t)
            if replies:
                send(up, replies, t, rng_up, p_up, UP)
        while up and up[0][0] <= t:
            for msg in up.popleft()[1]:
                server.on_message(msg, t)
        out = server.run_until(t)
        if out:
            send(down, out, t, rng_down, p_down, DOWN)
        if t >= next_bot:
            inputs = [client.make_input(code, dx, dy, t)
                      for code, dx, dy in bot_policy(client.view(), t, bot, bot_ms)]
            if inputs:
                send(up, inputs, t, rng_up, p_up, UP)
            next_bot += bot_ms
        nxt = min(server.next_wakeup(), next_bot, next_sample, end)
        if down and down[0][0] < nxt:
            nxt = down[0][0]
        if up and up[0][0] < nxt:
            nxt = up[0][0]
        t = max(nxt, t + (0 if (down and down[0][0] <= t) or (up and up[0][0] <= t) else 1))
    return metrics, server, client, limiter, bot
