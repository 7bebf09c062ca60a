"""Headless "My Duck Hunt" workload.

Everything numeric here (counts, speeds, points, radii) is testbed
calibration loaded from a scene file, not a property of the sync scheme.
The scene is 800x600 with y growing downwards; flamingos and gombas live
on the ground line.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

from . import wire

WIDTH = 800.0
HEIGHT = 600.0
GROUND_Y = 560.0
SKY_BOTTOM = 400.0
KINDS = ("cloud", "duck", "flamingo", "gomba", "reticle")
ALIVE, DEAD = 0, 1
RETICLE_ID = 1

_STATE = struct.Struct(">ffB")
STATE_SIZE = _STATE.size  # 9


def encode_state(x: float, y: float, status: int) -> bytes:
    return _STATE.pack(x, y, status)


def decode_state(blob: bytes) -> tuple[float, float, int]:
    return _STATE.unpack(blob)


@dataclass
class SceneConfig:
    seed: int = 42
    rounds: int = 5
    wave_s: float = 40.0
    hit_radius: float = 20.0
    gomba_reach: float = 10.0
    counts: dict[str, int] = field(default_factory=lambda: {
        "duck": 8, "flamingo": 3, "gomba": 3, "cloud": 5})
    speeds: dict[str, float] = field(default_factory=lambda: {
        "duck": 120.0, "flamingo": 25.0, "gomba": 40.0, "cloud": 20.0, "reticle": 300.0})
    points: dict[str, int] = field(default_factory=lambda: {
        "duck": 100, "gomba": 50, "flamingo": -200})


def parse_scene(text: str) -> SceneConfig:
    cfg = SceneConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            key = tok[0]
            if key == "spawn" and len(tok) == 3 and tok[2].startswith("count="):
                _check_kind(tok[1], lineno)
                cfg.counts[tok[1]] = int(tok[2][6:])
            elif key == "speed" and len(tok) == 3:
                _check_kind(tok[1], lineno)
                cfg.speeds[tok[1]] = float(tok[2])
            elif key == "points" and len(tok) == 3:
                _check_kind(tok[1], lineno)
                cfg.points[tok[1]] = int(tok[2])
            elif key == "seed" and len(tok) == 2:
                cfg.seed = int(tok[1])
            elif key == "rounds" and len(tok) == 2:
                cfg.rounds = int(tok[1])
            elif key == "wave_s" and len(tok) == 2:
                cfg.wave_s = float(tok[1])
            elif key == "hit_radius" and len(tok) == 2:
                cfg.hit_radius = float(tok[1])
            else:
                raise ValueError(f"unrecognised directive {line!r}")
        except ValueError as exc:
            raise ValueError(f"scene line {lineno}: {exc}") from None
    if not 1 <= cfg.rounds <= 5:
        raise ValueError("rounds must be in 1..5")
    return cfg


def _check_kind(kind, lineno):
    if kind not in KINDS:
        raise ValueError(f"unknown entity kind {kind!r}")


def load_scene(path: str | Path) -> SceneConfig:
    return parse_scene(Path(path).read_text())


@dataclass
class SceneEntity:
    entity_id: int
    kind: str
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    status: int = ALIVE

    @property
    def alive(self) -> bool:
        return self.status == ALIVE

    def blob(self) -> bytes:
        return encode_state(self.x, self.y, self.status)


def spawn_wave(round_number: int, config: SceneConfig | None = None, first_id: int = 2,
               cycle: int = 0) -> list[SceneEntity]:
    """Deterministically spawn one wave (reticle excluded)."""
    if not 1 <= round_number <= 5:
        raise ValueError(f"round number must be in 1..5, got {round_number}")
    cfg = config or SceneConfig()
    rng = random.Random(f"{cfg.seed}:{cycle}:{round_number}")
    out = []
    eid = first_id
    for kind in ("cloud", "duck", "flamingo", "gomba"):
        speed = cfg.speeds.get(kind, 0.0)
        for _ in range(cfg.counts.get(kind, 0)):
            if kind == "cloud":
                x, y = rng.uniform(0, WIDTH), rng.uniform(20, 150)
                vx, vy = speed * rng.choice((-1, 1)), 0.0
            elif kind == "duck":
                x, y = rng.uniform(50, WIDTH - 50), rng.uniform(100, SKY_BOTTOM)
                # later rounds fly faster
                a = rng.uniform(0, 2 * math.pi)
                s = speed * (1 + 0.1 * (round_number - 1))
                vx, vy = s * math.cos(a), s * math.sin(a)
            elif kind == "flamingo":
                x, y = rng.uniform(100, WIDTH - 100), GROUND_Y
                vx, vy = speed * rng.choice((-1, 1)), 0.0
            else:
                x, y = rng.choice((rng.uniform(0, 60), rng.uniform(WIDTH - 60, WIDTH))), GROUND_Y
                vx, vy = 0.0, 0.0
            out.append(SceneEntity(eid, kind, x, y, vx, vy))
            eid += 1
    return out


class Scene:
    def __init__(self, config: SceneConfig | None = None):
        self.config = config or SceneConfig()
        self.entities: dict[int, SceneEntity] = {
            RETICLE_ID: SceneEntity(RETICLE_ID, "reticle", WIDTH / 2, HEIGHT / 2)}
        self.score = 0
        self.score_events: list[int] = []

    @property
    def reticle(self) -> SceneEntity:
        return self.entities[RETICLE_ID]

    def add(self, ents):
        for e in ents:
            self.entities[e.entity_id] = e

    def _score(self, delta):
        if delta:
            self.score += delta
            self.score_events.append(delta)


def step(scene: Scene, dt_ms: float) -> None:
    if dt_ms <= 0:
        raise ValueError("dt must be positive")
    dt = dt_ms / 1000.0
    cfg = scene.config
    flamingos = [e for e in scene.entities.values() if e.kind == "flamingo" and e.alive]
    for e in scene.entities.values():
        if not e.alive or e.kind == "reticle":
            continue
        if e.kind == "cloud":
            e.x = (e.x + e.vx * dt) % WIDTH
        elif e.kind == "duck":
            e.x, e.vx = _bounce(e.x + e.vx * dt, e.vx, 0.0, WIDTH)
            e.y, e.vy = _bounce(e.y + e.vy * dt, e.vy, 0.0, SKY_BOTTOM)
        elif e.kind == "flamingo":
            e.x, e.vx = _bounce(e.x + e.vx * dt, e.vx, 0.0, WIDTH)
        elif e.kind == "gomba" and flamingos:
            target = min(flamingos, key=lambda f: (abs(f.x - e.x), f.entity_id))
            gap = target.x - e.x
            move = cfg.speeds.get("gomba", 0.0) * dt
            e.vx = math.copysign(cfg.speeds.get("gomba", 0.0), gap) if gap else 0.0
            e.x = target.x if abs(gap) <= move else e.x + math.copysign(move, gap)
    for g in scene.entities.values():
        if g.kind != "gomba" or not g.alive:
            continue
        for f in flamingos:
            if f.alive and abs(f.x - g.x) <= cfg.gomba_reach:
                f.status = DEAD
                f.vx = 0.0
                scene._score(cfg.points.get("flamingo", 0))


def _bounce(pos, vel, lo, hi):
    if pos < lo:
        return lo + (lo - pos), abs(vel)
    if pos > hi:
        return hi - (pos - hi), -abs(vel)
    return pos, vel


def apply_shot(scene: Scene, x: float | None = None, y: float | None = None) -> int:
    """Shoot at (x, y), defaulting to the reticle; returns the score delta."""
    if x is None:
        x, y = scene.reticle.x, scene.reticle.y
    cfg = scene.config
    hits = [(math.hypot(e.x - x, e.y - y), e.entity_id, e) for e in scene.entities.values()
            if e.alive and e.kind not in ("reticle", "cloud")]
    hits = [h for h in hits if h[0] <= cfg.hit_radius]
    if not hits:
        return 0
    best = min(hits, key=lambda h: h[:2])[2]
    best.status = DEAD
    best.vx = best.vy = 0.0
    delta = cfg.points.get(best.kind, 0)
    scene._score(delta)
    return delta


def apply_move(scene: Scene, dx: float, dy: float) -> None:
    r = scene.reticle
    r.x = min(max(r.x + dx, 0.0), WIDTH)
    r.y = min(max(r.y + dy, 0.0), HEIGHT)


class DuckHunt:
    """Authoritative game: a scene advanced on a fixed physics step, wave after wave."""

    physics_ms = 10

    def __init__(self, config: SceneConfig | None = None):
        self.config = config or SceneConfig()
        self.scene = Scene(self.config)
        self.time_ms = 0
        self.round = 0
        self.cycle = 0
        self.wave_start = 0
        self.next_id = RETICLE_ID + 1
        self.wave_ids: list[int] = []
        self.invalid_inputs = 0
        self._blobs: dict[int, bytes] = {}

    def roles(self) -> dict[int, str]:
        return {eid: e.kind for eid, e in self.scene.entities.items()}

    def blob(self, entity_id: int) -> bytes:
        b = self._blobs.get(entity_id)
        if b is None:
            b = self._blobs[entity_id] = self.scene.entities[entity_id].blob()
        return b

    def _next_wave(self):
        removed = self.wave_ids
        for eid in removed:
            del self.scene.entities[eid]
        self.round += 1
        if self.round > self.config.rounds:
            self.round = 1
            self.cycle += 1
        ents = spawn_wave(self.round, self.config, self.next_id, self.cycle)
        self.next_id += len(ents)
        self.scene.add(ents)
        self.wave_ids = [e.entity_id for e in ents]
        self.wave_start = self.time_ms
        return ents, removed

    def start(self):
        """Spawn the first wave; returns the spawned entities."""
        ents, _ = self._next_wave()
        return ents

    def advance_to(self, now: int):
        """Run physics up to ``now``; returns (spawned, removed_ids) for any wave change."""
        spawned, removed = [], []
        while self.time_ms + self.physics_ms <= now:
            self.time_ms += self.physics_ms
            step(self.scene, self.physics_ms)
            self._blobs.clear()
            ducks_left = any(e.alive for e in self.scene.entities.values() if e.kind == "duck")
            if not ducks_left or self.time_ms - self.wave_start >= self.config.wave_s * 1000:
                new, gone = self._next_wave()
                spawned += new
                removed += gone
        born = {e.entity_id for e in spawned}
        return ([e for e in spawned if e.entity_id in self.scene.entities],
                [eid for eid in removed if eid not in born])

    def apply_input(self, code: int, dx: float = 0.0, dy: float = 0.0) -> bool:
        self._blobs.clear()
        if code == wire.MOVE:
            if not (math.isfinite(dx) and math.isfinite(dy)):
                self.invalid_inputs += 1
                return False
            apply_move(self.scene, dx, dy)
        elif code == wire.SHOOT:
            apply_shot(self.scene)
        else:
            self.invalid_inputs += 1
            return False
        return True


# -- bot ----------------------------------------------------------------------

@dataclass
class Bot:
    """Deterministic player acting on the client's (possibly stale) view."""

    speed: float = 300.0
    hit_radius: float = 20.0
    guard_radius: float = 50.0
    cooldown_ms: int = 200
    last_shot_ms: int = -10**9
    shots: int = 0


def bot_policy(view: dict[int, tuple[str, float, float, int]], now: int, bot: Bot,
               dt_ms: int = 20) -> list[tuple[int, float, float]]:
    """Inputs for this tick as (code, dx, dy) tuples.

    ``view`` maps entity id to (kind, x, y, status) as the client sees it.
    """
    me = view.get(RETICLE_ID)
    if me is None:
        return []
    _, rx, ry, _ = me
    alive = [(eid, k, x, y) for eid, (k, x, y, s) in view.items() if s == ALIVE and k != "reticle"]
    flamingos = [(x, y) for _, k, x, y in alive if k == "flamingo"]
    threats = [a for a in alive if a[1] == "gomba"
               and any(math.hypot(a[2] - fx, a[3] - fy) <= bot.guard_radius for fx, fy in flamingos)]
    pool = threats or [a for a in alive if a[1] == "duck"]
    if not pool:
        return []
    _, _, tx, ty = min(pool, key=lambda a: (math.hypot(a[2] - rx, a[3] - ry), a[0]))
    gap = math.hypot(tx - rx, ty - ry)
    out = []
    if gap <= bot.hit_radius:
        if now - bot.last_shot_ms >= bot.cooldown_ms:
            bot.last_shot_ms = now
            bot.shots += 1
            out.append((wire.SHOOT, 0.0, 0.0))
        return out
    reach = bot.speed * dt_ms / 1000.0
    scale = min(1.0, reach / gap)
    out.append((wire.MOVE, (tx - rx) * scale, (ty - ry) * scale))
    return out
