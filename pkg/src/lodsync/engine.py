"""Server game loop and client model applier.

The server keeps one schedule per communication group: when a group is due
its entities' absolute states are sent and the group's next due time moves
forward by exactly one period.  Every 5 s the maintenance step reads the
latest probe-round loss, checks the entity of reference and, if its group
would change, reassigns everyone.  Entities that changed group are sent
once immediately and then follow their new group's schedule.

All times are integer milliseconds on whatever clock the driver uses
(virtual in the simulator, wall clock in the socket runners).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

from . import wire
from .duckhunt import DuckHunt, decode_state
from .metrics import CONTROL, MetricsLog
from .monitor import CongestionMonitor
from .organization import AssignmentChange, Organization, er_trigger_check, reassign_all

log = logging.getLogger(__name__)

MAINTENANCE_MS = 5000
EntityState = wire.EntityState
StateUpdate = wire.StateUpdate
U32 = 0xFFFFFFFF


class ServerEngine:
    def __init__(self, org: Organization, game: DuckHunt, *, adaptation: str = "lod",
                 batch: bool = False, monitor: CongestionMonitor | None = None,
                 metrics: MetricsLog | None = None, start_ms: int = 0):
        if adaptation not in ("lod", "fixed"):
            raise ValueError(f"adaptation must be 'lod' or 'fixed', got {adaptation!r}")
        self.org = org
        self.game = game
        self.adaptation = adaptation
        self.batch = batch
        self.monitor = monitor or CongestionMonitor()
        self.metrics = metrics if metrics is not None else MetricsLog()
        self.seq = 0
        self.tick = 0
        self.next_due = {g.group_id: start_ms for g in org.groups}
        self.maintenance_due = start_ms + MAINTENANCE_MS
        self.movers: set[int] = set()
        self.deltas: list[tuple[int, AssignmentChange]] = []
        self.congestion_log: list[tuple[int, float]] = []
        self.bad_inputs = 0
        self.inputs_applied = 0
        self._outbox: list = []
        self.spawn_log: list[tuple[int, int, str]] = []
        self._pinned = org.groups.groups[0].group_id if adaptation == "fixed" else None
        game.start()
        scene = game.scene.entities
        self._add_entities([scene[eid] for eid in sorted(scene)], start_ms)
        self._outbox.append(self.roster(start_ms))
        self.monitor.start_round(start_ms)

    # -- helpers --------------------------------------------------------------

    def _next_seq(self) -> int:
        s = self.seq
        self.seq = (s + 1) & U32
        return s

    def _add_entities(self, ents, now):
        for e in ents:
            rec = self.org.add_entity(e.entity_id, e.kind, group=self._pinned)
            self.spawn_log.append((now, e.entity_id, e.kind))
            self.metrics.event(now, "group_join", e.entity_id, rec.current_group, 0)

    def roster(self, now: int) -> wire.Init:
        """INIT listing every live entity; the client treats it as the full roster."""
        init = tuple(wire.InitEntity(eid, rec.role, self.game.blob(eid))
                     for eid, rec in sorted(self.org.entities.items()))
        return wire.Init(self._next_seq(), now, init)

    def next_wakeup(self) -> int:
        t = min(min(self.next_due.values()), self.maintenance_due)
        probe = self.monitor.next_send_ms()
        return t if probe is None else min(t, probe)

    # -- operations -------------------------------------------------------------

    def _advance(self, now: int) -> None:
        spawned, removed = self.game.advance_to(now)
        for eid in removed:
            rec = self.org.remove_entity(eid)
            self.metrics.event(now, "group_leave", eid, rec.current_group, None)
            self.movers.discard(eid)
        if spawned:
            self._add_entities(spawned, now)
        if spawned or removed:
            self._outbox.append(self.roster(now))

    def server_tick(self, now: int) -> list:
        """Datagrams (as message objects) due at ``now``."""
        self._advance(now)
        out, self._outbox = self._outbox, []
        count = self.metrics.count
        if out:
            count("pkts_out", now, CONTROL, len(out))
        for g in self.org.groups:
            gid = g.group_id
            due = self.next_due[gid] <= now
            if not due and not self.movers:
                continue
            if due:
                members = self.org.members(gid)
                self.next_due[gid] += g.period_ms
            else:
                members = [self.org.entities[m] for m in sorted(self.movers)
                           if self.org.entities[m].current_group == gid]
                if not members:
                    continue
            if self.movers:
                for m in members:
                    self.movers.discard(m.entity_id)
            if not members and not self.batch:
                continue
            self.tick = tick = (self.tick + 1) & U32
            blob = self.game.blob
            seq = self.seq
            if self.batch:
                states = []
                for m in members:
                    m.last_update_tick = tick
                    states.append(EntityState(m.entity_id, tick, blob(m.entity_id)))
                msgs = wire.split_state_update(seq, now, gid, states)
            else:
                msgs = []
                for m in members:
                    m.last_update_tick = tick
                    eid = m.entity_id
                    msgs.append(StateUpdate(seq, now, gid, (EntityState(eid, tick, blob(eid)),)))
                    seq = (seq + 1) & U32
            self.seq = (self.seq + len(msgs)) & U32
            out.extend(msgs)
            count("pkts_out", now, gid, len(msgs))
        for round_id, idx in self.monitor.due_probes(now):
            out.append(wire.Probe(self._next_seq(), now, round_id, idx))
            count("pkts_out", now, CONTROL)
        return out

    def server_on_input(self, msg: wire.Input, now: int) -> bool:
        self._advance(now)
        if self.game.apply_input(msg.code, msg.dx, msg.dy):
            self.inputs_applied += 1
            return True
        self.bad_inputs += 1
        return False

    def server_on_ack(self, msg: wire.ProbeAck, now: int) -> None:
        self.monitor.record_ack(msg.round_id, msg.probe_index, now)

    def on_message(self, msg, now: int) -> None:
        if isinstance(msg, wire.ProbeAck):
            self.server_on_ack(msg, now)
        elif isinstance(msg, wire.Input):
            self.server_on_input(msg, now)

    def server_maintenance(self, now: int) -> list[AssignmentChange]:
        congestion = self.monitor.current_congestion(now)
        self.congestion_log.append((now, congestion))
        self.metrics.event(now, "loss_percent", None, None, congestion)
        delta = []
        if self.adaptation == "lod" and self.org.entities and er_trigger_check(self.org, congestion):
            delta = reassign_all(self.org, congestion)
            for ch in delta:
                self.deltas.append((now, ch))
                self.movers.add(ch.entity_id)
                self.metrics.event(now, "reassignment", ch.entity_id, ch.new_group, ch.old_group)
            if delta:
                log.info("t=%d congestion=%.1f%% reassigned %d entities", now, congestion, len(delta))
        self.monitor.start_round(now)
        self.maintenance_due += MAINTENANCE_MS
        # periodic roster resend heals a lost INIT
        self._outbox.append(self.roster(now))
        return delta

    def run_until(self, now: int) -> list:
        """Maintenance (if due) followed by the tick at ``now``."""
        while self.maintenance_due <= now:
            self.server_maintenance(now)
        return self.server_tick(now)


@dataclass
class ClientEntity:
    role: str | None
    state: bytes
    tick: int
    recv_ms: int


class ClientModel:
    BUFFER_LIMIT = 100

    def __init__(self, metrics: MetricsLog | None = None):
        self.entities: dict[int, ClientEntity] = {}
        self.buffer: deque[tuple[int, int, int, bytes, int]] = deque()
        self.metrics = metrics if metrics is not None else MetricsLog(log_updates=False)
        self.seq = 0
        self.stale_rejected = 0
        self.dropped_unknown = 0
        self.updates_applied = 0
        self.roster_ms = -1

    def _next_seq(self) -> int:
        s = self.seq
        self.seq = (s + 1) & U32
        return s

    def apply_init(self, msg: wire.Init, now: int) -> None:
        if msg.timestamp_ms < self.roster_ms:
            return
        self.roster_ms = msg.timestamp_ms
        listed = {e.entity_id for e in msg.entities}
        for eid in [eid for eid in self.entities if eid not in listed]:
            del self.entities[eid]
        for e in msg.entities:
            cur = self.entities.get(e.entity_id)
            if cur is None:
                self.entities[e.entity_id] = ClientEntity(e.role, e.state, 0, now)
            else:
                cur.role = e.role
        if self.buffer:
            keep = deque()
            for item in self.buffer:
                gid, eid, tick, state, t = item
                if eid in self.entities:
                    self._apply(gid, eid, tick, state, t)
                else:
                    keep.append(item)
            self.buffer = keep

    def _apply(self, gid, eid, tick, state, now) -> bool:
        cur = self.entities[eid]
        if tick <= cur.tick:
            self.stale_rejected += 1
            return False
        cur.tick = tick
        cur.state = state
        cur.recv_ms = now
        self.updates_applied += 1
        if self.metrics.log_updates:
            self.metrics.event(now, "update_applied", eid, gid, tick)
        return True

    def client_apply_update(self, msg: wire.StateUpdate, now: int) -> int:
        applied = 0
        known = self.entities
        for e in msg.entities:
            if e.entity_id in known:
                applied += self._apply(msg.group_id, e.entity_id, e.tick, e.state, now)
            elif len(self.buffer) < self.BUFFER_LIMIT:
                self.buffer.append((msg.group_id, e.entity_id, e.tick, e.state, now))
            else:
                self.dropped_unknown += 1
        return applied

    def client_on_probe(self, msg: wire.Probe, now: int) -> wire.ProbeAck:
        return wire.ProbeAck(self._next_seq(), now, msg.round_id, msg.probe_index)

    def on_message(self, msg, now: int):
        """Handle one inbound message; returns a reply message or None."""
        if type(msg) is StateUpdate:
            self.metrics.count("pkts_in", now, msg.group_id)
            self.client_apply_update(msg, now)
            return None
        self.metrics.count("pkts_in", now, CONTROL)
        if isinstance(msg, wire.Probe):
            return self.client_on_probe(msg, now)
        elif isinstance(msg, wire.Init):
            self.apply_init(msg, now)
        return None

    def on_messages(self, msgs, now: int) -> list:
        """Handle a burst of messages arriving at ``now``; returns the replies."""
        replies = []
        counts = {}
        known = self.entities
        for msg in msgs:
            if type(msg) is StateUpdate:
                gid = msg.group_id
                counts[gid] = counts.get(gid, 0) + 1
                if len(msg.entities) == 1 and not self.metrics.log_updates:
                    e = msg.entities[0]
                    cur = known.get(e.entity_id)
                    if cur is not None and e.tick > cur.tick:
                        cur.tick = e.tick
                        cur.state = e.state
                        cur.recv_ms = now
                        self.updates_applied += 1
                        continue
                self.client_apply_update(msg, now)
                continue
            counts[CONTROL] = counts.get(CONTROL, 0) + 1
            if type(msg) is wire.Probe:
                replies.append(self.client_on_probe(msg, now))
            elif type(msg) is wire.Init:
                self.apply_init(msg, now)
        for gid, n in counts.items():
            self.metrics.count("pkts_in", now, gid, n)
        return replies

    def staleness(self, entity_id: int, now: int) -> int:
        try:
            return now - self.entities[entity_id].recv_ms
        except KeyError:
            raise KeyError(f"entity {entity_id} was never initialised") from None

    def sample_staleness(self, now: int) -> None:
        for eid in sorted(self.entities):
            self.metrics.event(now, "staleness_sample", eid, None, now - self.entities[eid].recv_ms)

    def view(self) -> dict[int, tuple[str, float, float, int]]:
        """Decoded client-side scene for the bot."""
        out = {}
        for eid, e in self.entities.items():
            if e.role is not None and len(e.state) == 9:
                x, y, status = decode_state(e.state)
                out[eid] = (e.role, x, y, status)
        return out

    def make_input(self, code: int, dx: float, dy: float, now: int) -> wire.Input:
        return wire.Input(self._next_seq(), now, code, dx, dy)
