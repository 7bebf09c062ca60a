"""Event log shared by server, client and harness.

Rows are ``time_ms,kind,entity_id,group_id,value``.  Per-second datagram
counters are folded into ``pkts_out``/``pkts_in`` rows stamped at the start
of their second; ``group_id`` is the update group, or -1 for control traffic
(INIT, probes, acks, inputs).
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

COLUMNS = ("time_ms", "kind", "entity_id", "group_id", "value")
KINDS = ("group_join", "reassignment", "group_leave", "loss_percent", "update_applied",
         "staleness_sample", "pkts_out", "pkts_in")
_ORDER = {k: i for i, k in enumerate(KINDS)}
CONTROL = -1


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(int(v)) if v.is_integer() else repr(v)
    return str(v)


class MetricsLog:
    def __init__(self, log_updates: bool = True):
        self.log_updates = log_updates
        self.rows: list[tuple] = []
        self.counts: dict[tuple[str, int, int], int] = defaultdict(int)

    def event(self, time_ms, kind, entity_id=None, group_id=None, value=None):
        self.rows.append((time_ms, kind, entity_id, group_id, value))

    def count(self, kind: str, time_ms: int, group_id: int = CONTROL, n: int = 1):
        self.counts[(kind, time_ms // 1000, group_id)] += n

    def all_rows(self) -> list[tuple]:
        rows = list(self.rows)
        rows += [(sec * 1000, kind, None, gid, n) for (kind, sec, gid), n in self.counts.items()]
        rows.sort(key=lambda r: (r[0], _ORDER[r[1]],
                                 -2 if r[2] is None else r[2], -2 if r[3] is None else r[3]))
        return rows

    def to_csv(self) -> str:
        return rows_to_csv(self.all_rows())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(v) for v in r) + "\n")
    return buf.getvalue()


def read_rows(path: str | Path) -> list[tuple]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append((
                int(rec["time_ms"]), rec["kind"],
                int(rec["entity_id"]) if rec["entity_id"] else None,
                int(rec["group_id"]) if rec["group_id"] else None,
                float(rec["value"]) if rec["value"] else None,
            ))
    return out


def write_kv(path: str | Path, items) -> None:
    Path(path).write_text("".join(f"{k},{_fmt(v)}\n" for k, v in items))


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split(",", 1)
            out[k] = v
    return out
