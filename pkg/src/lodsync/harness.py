"""Scenario runner, metric reports and lod-vs-fixed comparison.

A scenario config is a line-oriented ``key value`` file::

    mode simulated          # or realsocket
    adaptation lod          # or fixed (everything pinned to the first group)
    schedule table2.sched   # capacity schedule, or none
    roles default           # default = packaged file
    groups default
    scene default
    duration 210
    seed 42

Optional keys: latency_ms, loss_down, loss_up (random drop percent),
probe_loss (exact probes dropped per 100-probe round), sample_ms, bot_ms,
bot (greedy|idle), log_updates (0|1), batch (0|1).  Relative paths are
resolved against the config file's directory.

A report directory holds ``events.csv`` (``time_ms,kind,entity_id,group_id,value``),
``summary.csv`` (``key,value``) and ``entities.csv`` (``entity_id,role,spawn_ms``).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics as mx
from .duckhunt import DuckHunt, load_scene
from .organization import Organization, parse_groups, parse_roles
from .proxy import DOWN, UP, CapacitySchedule, load_schedule, parse_schedule, read_stats
from .sim import simulate

log = logging.getLogger(__name__)

DATA = resources.files("lodsync") / "data"
UNLIMITED = CapacitySchedule(((0, 1_000_000_000),))


def data_path(name: str) -> Path:
    return Path(str(DATA / name))


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    mode: str = "simulated"
    adaptation: str = "lod"
    schedule: Path | None = None
    roles: Path = field(default_factory=lambda: data_path("roles.txt"))
    groups: Path = field(default_factory=lambda: data_path("groups.txt"))
    scene: Path = field(default_factory=lambda: data_path("scene.txt"))
    duration_s: float = 60.0
    seed: int = 42
    latency_ms: int = 2
    loss_down: float = 0.0
    loss_up: float = 0.0
    probe_loss: int | None = None
    sample_ms: int = 100
    bot_ms: int = 20
    bot: str = "greedy"
    log_updates: bool = False
    batch: bool = False

    def __post_init__(self):
        for name in ("schedule", "roles", "groups", "scene"):
            v = getattr(self, name)
            if isinstance(v, str):
                setattr(self, name, Path(v))

    def validate(self) -> None:
        if self.mode not in ("simulated", "realsocket"):
            raise ScenarioError(f"mode must be simulated or realsocket, got {self.mode!r}")
        if self.adaptation not in ("lod", "fixed"):
            raise ScenarioError(f"adaptation must be lod or fixed, got {self.adaptation!r}")
        if not self.duration_s > 0:
            raise ScenarioError("duration must be positive")
        for name in ("schedule", "roles", "groups", "scene"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ScenarioError(f"{name} file not found: {p}")
        if self.probe_loss is not None and not 0 <= self.probe_loss <= 100:
            raise ScenarioError("probe_loss must be in 0..100")
        if self.bot not in ("greedy", "idle"):
            raise ScenarioError(f"unknown bot policy {self.bot!r}")
        if self.sample_ms <= 0 or self.bot_ms <= 0 or self.latency_ms < 0:
            raise ScenarioError("sample_ms and bot_ms must be positive, latency_ms non-negative")

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def config_hash(self) -> str:
        """Git-style blob hash over the settings and referenced file contents."""
        parts = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = v.read_text()
            parts.append(f"{f.name}={v!r}")
        body = "\n".join(parts).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


_INT_KEYS = {"seed", "latency_ms", "sample_ms", "bot_ms"}
_FLOAT_KEYS = {"loss_down", "loss_up"}
_BOOL_KEYS = {"log_updates", "batch"}


def parse_scenario(text: str, base: Path | None = None) -> ScenarioConfig:
    cfg = ScenarioConfig()
    base = base or Path.cwd()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ScenarioError(f"line {lineno}: expected 'key value'")
        key, value = parts[0], parts[1].strip()
        try:
            if key in ("schedule", "roles", "groups", "scene"):
                if value.lower() == "none" and key == "schedule":
                    path = None
                elif value.lower() == "default":
                    path = data_path({"schedule": "table2.sched", "roles": "roles.txt",
                                      "groups": "groups.txt", "scene": "scene.txt"}[key])
                else:
                    path = Path(value) if Path(value).is_absolute() else base / value
                setattr(cfg, key, path)
            elif key == "duration":
                cfg.duration_s = float(value)
            elif key == "probe_loss":
                cfg.probe_loss = None if value.lower() == "none" else int(value)
            elif key in _INT_KEYS:
                setattr(cfg, key, int(value))
            elif key in _FLOAT_KEYS:
                setattr(cfg, key, float(value))
            elif key in _BOOL_KEYS:
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            elif key in ("mode", "adaptation", "bot"):
                setattr(cfg, key, value)
            else:
                raise ScenarioError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


@dataclass
class MetricsReport:
    rows: list[tuple]
    summary: dict[str, str]
    entities: list[tuple[int, str, int]]

    # -- persistence -----------------------------------------------------------

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.csv").write_text(mx.rows_to_csv(self.rows))
        mx.write_kv(out / "summary.csv", self.summary.items())
        (out / "entities.csv").write_text(
            "entity_id,role,spawn_ms\n" + "".join(f"{e},{r},{t}\n" for e, r, t in self.entities))
        return out

    @classmethod
    def load(cls, out_dir: str | Path) -> "MetricsReport":
        out = Path(out_dir)
        ents = []
        for line in (out / "entities.csv").read_text().splitlines()[1:]:
            e, r, t = line.split(",")
            ents.append((int(e), r, int(t)))
        return cls(mx.read_rows(out / "events.csv"), mx.read_kv(out / "summary.csv"), ents)

    # -- views --------------------------------------------------------------------

    def of_kind(self, kind: str) -> list[tuple]:
        return [r for r in self.rows if r[1] == kind]

    @property
    def roles(self) -> dict[int, str]:
        return {e: r for e, r, _ in self.entities}

    def timeline(self) -> list[tuple[int, int, int]]:
        """(time_ms, entity_id, group_id) membership changes, joins included."""
        return [(r[0], r[2], r[3]) for r in self.rows if r[1] in ("group_join", "reassignment")]

    def groups_at(self, time_ms: int) -> dict[int, int]:
        """Group of every entity alive at ``time_ms``."""
        cur = {}
        for t, kind, eid, gid, _ in self.rows:
            if t > time_ms:
                break
            if kind in ("group_join", "reassignment"):
                cur[eid] = gid
            elif kind == "group_leave":
                cur.pop(eid, None)
        return cur

    def update_intervals(self) -> dict[int, list[tuple[int, int, int]]]:
        """Per entity: (receive time, interval since previous, group) from update_applied rows."""
        last, out = {}, {}
        for t, kind, eid, gid, _ in self.rows:
            if kind != "update_applied":
                continue
            if eid in last:
                out.setdefault(eid, []).append((t, t - last[eid], gid))
            last[eid] = t
        return out

    def staleness_arrays(self):
        s = self.of_kind("staleness_sample")
        t = np.array([r[0] for r in s], dtype=np.int64)
        e = np.array([r[2] for r in s], dtype=np.int64)
        v = np.array([r[4] for r in s], dtype=float)
        return t, e, v

    def per_second(self, kind: str, updates_only: bool = False) -> dict[int, int]:
        out: dict[int, int] = {}
        for t, k, _, gid, v in self.rows:
            if k == kind and (not updates_only or (gid is not None and gid >= 0)):
                out[t // 1000] = out.get(t // 1000, 0) + int(v)
        return out

    def segments(self) -> list[tuple[float, float, int | None]]:
        duration = float(self.summary["duration_s"])
        sched = self.summary.get("schedule", "none")
        if sched == "none":
            return [(0.0, duration, None)]
        entries = tuple(tuple(int(x) for x in item.split(":")) for item in sched.split(";"))
        return [(float(a), float(b), c) for a, b, c in CapacitySchedule(entries).segments(duration)]


def _schedule_text(schedule: CapacitySchedule | None) -> str:
    return "none" if schedule is None else ";".join(f"{o}:{c}" for o, c in schedule.entries)


def _build(cfg: ScenarioConfig):
    roles, er = parse_roles(Path(cfg.roles).read_text())
    org = Organization.from_specs(roles, parse_groups(Path(cfg.groups).read_text()), er)
    scene = load_scene(cfg.scene)
    scene.seed = cfg.seed
    schedule = load_schedule(cfg.schedule) if cfg.schedule is not None else None
    return org, DuckHunt(scene), schedule


def _summary_head(cfg: ScenarioConfig, schedule) -> dict[str, str]:
    return {
        "mode": cfg.mode,
        "adaptation": cfg.adaptation,
        "seed": str(cfg.seed),
        "duration_s": mx._fmt(float(cfg.duration_s)),
        "schedule": _schedule_text(schedule),
        "config_hash": cfg.config_hash(),
    }


def run_simulated(cfg: ScenarioConfig) -> MetricsReport:
    org, game, schedule = _build(cfg)
    metrics, server, client, limiter, bot = simulate(cfg, org, game, schedule)
    rows = metrics.all_rows()
    summary = _summary_head(cfg, schedule)
    summary.update({
        "status": "ok",
        "bot_score": str(game.scene.score),
        "bot_shots": str(bot.shots),
        "score_events_sum": str(sum(game.scene.score_events)),
        "inputs_applied": str(server.inputs_applied),
        "datagrams_out": str(sum(v for (k, _, _), v in metrics.counts.items() if k == "pkts_out")),
        "datagrams_in": str(sum(v for (k, _, _), v in metrics.counts.items() if k == "pkts_in")),
        "updates_applied": str(client.updates_applied),
        "stale_rejected": str(client.stale_rejected),
        "rounds_completed": str(server.monitor.rounds_completed),
        "spurious_acks": str(server.monitor.spurious_acks),
        "reassignment_events": str(len(server.deltas)),
    })
    if limiter is not None:
        stats = limiter.stats(cfg.duration_s * 1000)
        for d in (UP, DOWN):
            summary[f"proxy_forwarded_{d}"] = str(sum(s.forwarded for s in stats if s.direction == d))
            summary[f"proxy_dropped_{d}"] = str(sum(s.dropped for s in stats if s.direction == d))
    ents = [(eid, role, t) for t, eid, role in server.spawn_log]
    return MetricsReport(rows, summary, sorted(ents))


# -- realsocket -------------------------------------------------------------------

def free_udp_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_realsocket(cfg: ScenarioConfig, work_dir: str | Path) -> MetricsReport:
    """Run server, proxy and client as local processes over loopback UDP."""
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    org, game, schedule = _build(cfg)  # validates the files before spawning anything
    sched_path = work / "schedule.sched"
    sched_path.write_text((schedule or UNLIMITED).to_text())
    server_port, proxy_port = free_udp_port(), free_udp_port()
    epoch = time.time()
    py = [sys.executable, "-m"]
    common = ["--epoch", repr(epoch), "--duration", str(cfg.duration_s)]
    env = dict(os.environ)
    server_cmd = py + ["lodsync.net", "server", "--bind", f"127.0.0.1:{server_port}",
                       "--roles", str(cfg.roles), "--groups", str(cfg.groups), "--scene", str(cfg.scene),
                       "--metrics", str(work / "server.csv"), "--adaptation", cfg.adaptation,
                       "--seed", str(cfg.seed)] + common + (["--batch"] if cfg.batch else [])
    proxy_cmd = py + ["lodsync.proxy", "--listen", f"127.0.0.1:{proxy_port}",
                      "--server", f"127.0.0.1:{server_port}", "--schedule", str(sched_path),
                      "--stats", str(work / "proxy.csv"), "--seed", str(cfg.seed),
                      "--loss-down", str(cfg.loss_down), "--loss-up", str(cfg.loss_up),
                      "--duration", str(cfg.duration_s + 3)]
    client_cmd = py + ["lodsync.net", "client", "--server", f"127.0.0.1:{proxy_port}",
                       "--bot", cfg.bot, "--metrics", str(work / "client.csv"), "--scene", str(cfg.scene),
                       "--sample-ms", str(cfg.sample_ms), "--bot-ms", str(cfg.bot_ms)] + common + (
                           ["--log-updates"] if cfg.log_updates else [])
    procs = {}
    logs = {}
    for name, cmd in (("server", server_cmd), ("proxy", proxy_cmd), ("client", client_cmd)):
        logs[name] = open(work / f"{name}.log", "w")
        procs[name] = subprocess.Popen(cmd, stdout=logs[name], stderr=subprocess.STDOUT, env=env)
        time.sleep(0.2)
    failures = []
    deadline = time.time() + cfg.duration_s + 60
    for name, p in procs.items():
        try:
            rc = p.wait(timeout=max(1.0, deadline - time.time()))
        except subprocess.TimeoutExpired:
            p.kill()
            rc = "timeout"
        if rc != 0:
            failures.append(f"{name}:{rc}")
    for fh in logs.values():
        fh.close()

    rows, summary, ents = [], _summary_head(cfg, schedule), []
    for part in ("server", "client"):
        path = work / f"{part}.csv"
        if path.exists():
            rows += mx.read_rows(path)
        kv = work / f"{part}.csv.summary"
        if kv.exists():
            summary.update({f"{k}": v for k, v in mx.read_kv(kv).items()})
    rows.sort(key=lambda r: (r[0], mx._ORDER[r[1]], -2 if r[2] is None else r[2],
                             -2 if r[3] is None else r[3]))
    ent_path = work / "server.csv.entities"
    if ent_path.exists():
        for line in ent_path.read_text().splitlines()[1:]:
            e, r, t = line.split(",")
            ents.append((int(e), r, int(t)))
    if (work / "proxy.csv").exists():
        stats = read_stats(work / "proxy.csv")
        for d in (UP, DOWN):
            summary[f"proxy_forwarded_{d}"] = str(sum(s.forwarded for s in stats if s.direction == d))
            summary[f"proxy_dropped_{d}"] = str(sum(s.dropped for s in stats if s.direction == d))
    summary["status"] = "ok" if not failures else "failed " + " ".join(failures)
    return MetricsReport(rows, summary, sorted(ents))


def run_scenario(cfg: ScenarioConfig, work_dir: str | Path | None = None) -> MetricsReport:
    cfg.validate()
    if cfg.mode == "simulated":
        return run_simulated(cfg)
    if work_dir is None:
        raise ScenarioError("realsocket mode needs a working directory")
    return run_realsocket(cfg, work_dir)


# -- comparison ---------------------------------------------------------------------

@dataclass
class SegmentComparison:
    start_s: float
    end_s: float
    capacity: int | None
    metrics: dict[str, tuple[float, float]]

    def delta(self, name: str) -> float:
        a, b = self.metrics[name]
        return a - b


def _segment_metrics(rep: MetricsReport, start: float, end: float) -> dict[str, float]:
    lo, hi = int(start * 1000), int(end * 1000)
    span = end - start
    out_all = out_upd = inn = 0
    for t, k, _, gid, v in rep.rows:
        if lo <= t < hi:
            if k == "pkts_out":
                out_all += v
                if gid is not None and gid >= 0:
                    out_upd += v
            elif k == "pkts_in":
                inn += v
    res = {
        "update_datagrams_per_s": out_upd / span,
        "datagrams_out_per_s": out_all / span,
        "datagrams_in_per_s": inn / span,
        "drop_rate_down": (1 - inn / out_all) if out_all else 0.0,
    }
    t, e, v = rep.staleness_arrays()
    roles = rep.roles
    role_arr = np.array([roles.get(int(x), "?") for x in e]) if len(e) else np.array([], dtype=str)
    window = (t >= lo) & (t < hi)
    for role in sorted(set(roles.values())):
        sel = window & (role_arr == role)
        res[f"staleness_mean_ms.{role}"] = float(v[sel].mean()) if sel.any() else float("nan")
    return res


def compare(rep_a: MetricsReport, rep_b: MetricsReport) -> list[SegmentComparison]:
    for key in ("seed", "duration_s", "schedule"):
        if rep_a.summary.get(key) != rep_b.summary.get(key):
            raise ScenarioError(f"reports differ in {key}: {rep_a.summary.get(key)} vs {rep_b.summary.get(key)}")
    out = []
    for start, end, cap in rep_a.segments():
        ma, mb = _segment_metrics(rep_a, start, end), _segment_metrics(rep_b, start, end)
        out.append(SegmentComparison(start, end, cap, {k: (ma[k], mb.get(k, float("nan"))) for k in ma}))
    return out


def comparison_csv(rep_a: MetricsReport, rep_b: MetricsReport, segs: list[SegmentComparison]) -> str:
    lines = ["segment_start_s,segment_end_s,capacity,metric,a,b,delta"]
    for s in segs:
        cap = "" if s.capacity is None else str(s.capacity)
        for name, (a, b) in s.metrics.items():
            lines.append(f"{mx._fmt(s.start_s)},{mx._fmt(s.end_s)},{cap},{name},"
                         f"{a:.6g},{b:.6g},{a - b:.6g}")
    sa, sb = int(rep_a.summary.get("bot_score", 0)), int(rep_b.summary.get("bot_score", 0))
    lines.append(f"0,{rep_a.summary['duration_s']},,bot_score,{sa},{sb},{sa - sb}")
    return "\n".join(lines) + "\n"


# -- CLI --------------------------------------------------------------------------------

def _fail(kind: str, message: str) -> int:
    print("ERROR " + json.dumps({"kind": kind, "message": message}), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lodsync-sim", description="Run and compare sync scenarios.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    cmp_ = sub.add_parser("compare", help="compare two report directories")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    cmp_.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    try:
        if args.cmd == "run":
            cfg = load_scenario(args.config)
            rep = run_scenario(cfg, Path(args.out) / "work")
            rep.write(args.out)
            if rep.summary.get("status") != "ok":
                return _fail("component_failure", rep.summary["status"])
            print(f"ok {args.out}")
        else:
            a, b = MetricsReport.load(args.a), MetricsReport.load(args.b)
            Path(args.out).write_text(comparison_csv(a, b, compare(a, b)))
            print(f"ok {args.out}")
    except (ScenarioError, OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
