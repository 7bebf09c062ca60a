"""Entity organization: roles, communication groups and group assignment.

An entity's score is ``weight * congestion`` where congestion is the
measured loss in percent (0..100).  The expected group for a score is the
group with the smallest threshold that is strictly greater than the score;
a group without threshold catches everything else.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple


class ConfigError(ValueError):
    """Invalid role/group configuration."""


@dataclass(frozen=True)
class RoleSpec:
    name: str
    weight: float

    def __post_init__(self):
        if not self.weight > 0 or math.isinf(self.weight):
            raise ConfigError(f"role {self.name!r}: weight must be a positive finite number")


@dataclass(frozen=True)
class GroupConfig:
    group_id: int
    name: str
    period_ms: int
    threshold: float | None = None

    @property
    def ceiling(self) -> float:
        """Threshold with the catch-all mapped to +inf."""
        return math.inf if self.threshold is None else self.threshold


@dataclass
class EntityRecord:
    entity_id: int
    role: str
    current_group: int
    state: bytes = b""
    last_update_tick: int = 0


class AssignmentChange(NamedTuple):
    entity_id: int
    old_group: int
    new_group: int


def score_coefficient(weight: float, congestion: float) -> float:
    if not weight > 0:
        raise ValueError(f"weight must be positive, got {weight!r}")
    if not 0.0 <= congestion <= 100.0:
        raise ValueError(f"congestion must be a percentage in [0, 100], got {congestion!r}")
    return weight * congestion


def validate_group_config(groups: Iterable[GroupConfig]) -> list[str]:
    """Return every violated group invariant; an empty list means valid."""
    groups = list(groups)
    problems = []
    if not groups:
        return ["no groups"]
    ids = [g.group_id for g in groups]
    if ids != list(range(len(groups))):
        problems.append("group ids must be 0..n-1 in importance order")
    if len({g.name for g in groups}) != len(groups):
        problems.append("duplicate group names")
    for g in groups:
        if not isinstance(g.period_ms, int) or g.period_ms <= 0:
            problems.append(f"group {g.name!r}: period_ms must be a positive integer")
        if g.threshold is not None and not (g.threshold >= 0 and math.isfinite(g.threshold)):
            problems.append(f"group {g.name!r}: threshold must be a finite non-negative number")
    catch_alls = [g for g in groups if g.threshold is None]
    if not catch_alls:
        problems.append("no catch-all")
    elif len(catch_alls) > 1:
        problems.append("multiple catch-alls")
    finite = [g.threshold for g in groups if g.threshold is not None]
    if any(b <= a for a, b in zip(finite, finite[1:])):
        problems.append("thresholds not strictly increasing")
    by_ceiling = sorted(groups, key=lambda g: g.ceiling)
    if by_ceiling != groups:
        problems.append("groups not listed in threshold order")
    periods = [g.period_ms for g in by_ceiling]
    if any(b <= a for a, b in zip(periods, periods[1:])):
        problems.append("period not increasing with threshold")
    return problems


class GroupTable:
    """Sorted view over a valid group list for fast lookups."""

    def __init__(self, groups: Iterable[GroupConfig]):
        self.groups = list(groups)
        problems = validate_group_config(self.groups)
        if problems:
            raise ConfigError("; ".join(problems))
        finite = [g for g in self.groups if g.threshold is not None]
        self._thresholds = [g.threshold for g in finite]
        self._ids = [g.group_id for g in finite]
        self.catch_all = next(g.group_id for g in self.groups if g.threshold is None)
        self._by_id = {g.group_id: g for g in self.groups}

    def expected(self, score: float) -> int:
        # first threshold strictly above the score
        i = bisect.bisect_right(self._thresholds, score)
        return self._ids[i] if i < len(self._ids) else self.catch_all

    def __getitem__(self, group_id: int) -> GroupConfig:
        return self._by_id[group_id]

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)


def expected_group(score: float, groups: Iterable[GroupConfig] | GroupTable) -> int:
    table = groups if isinstance(groups, GroupTable) else GroupTable(groups)
    return table.expected(score)


@dataclass
class Organization:
    roles: dict[str, RoleSpec]
    groups: GroupTable
    er_role: str
    entities: dict[int, EntityRecord] = field(default_factory=dict)
    # congestion used by the most recent assignment; new entities join accordingly
    congestion: float = 0.0
    # bumped on every membership change
    version: int = 0
    _members: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.groups, GroupTable):
            self.groups = GroupTable(self.groups)
        if self.er_role not in self.roles:
            raise ConfigError(f"entity-of-reference role {self.er_role!r} is not a declared role")

    @classmethod
    def from_specs(cls, roles: Iterable[RoleSpec], groups: Iterable[GroupConfig], er_role: str):
        table = {}
        for r in roles:
            if r.name in table:
                raise ConfigError(f"duplicate role {r.name!r}")
            table[r.name] = r
        return cls(table, GroupTable(groups), er_role)

    def group_for_role(self, role: str, congestion: float | None = None) -> int:
        c = self.congestion if congestion is None else congestion
        return self.groups.expected(score_coefficient(self.roles[role].weight, c))

    def add_entity(self, entity_id: int, role: str, state: bytes = b"",
                   group: int | None = None) -> EntityRecord:
        if role not in self.roles:
            raise ConfigError(f"unknown role {role!r}")
        if entity_id in self.entities:
            raise ValueError(f"duplicate entity id {entity_id}")
        if group is None:
            group = self.group_for_role(role)
        self.groups[group]  # KeyError on unknown group
        rec = EntityRecord(entity_id, role, group, state)
        self.entities[entity_id] = rec
        self.version += 1
        return rec

    def remove_entity(self, entity_id: int) -> EntityRecord:
        self.version += 1
        return self.entities.pop(entity_id)

    def members(self, group_id: int) -> list[EntityRecord]:
        """Entities of a group in id order (cached until membership changes)."""
        key = (self.version, group_id)
        cached = self._members.get(key)
        if cached is None:
            if len(self._members) > 64:
                self._members.clear()
            cached = self._members[key] = [self.entities[eid] for eid in sorted(self.entities)
                                           if self.entities[eid].current_group == group_id]
        return cached

    def reference_entity(self) -> EntityRecord:
        for e in self.entities.values():
            if e.role == self.er_role:
                return e
        raise ConfigError(f"no entity carries the reference role {self.er_role!r}")

    def assignment(self) -> dict[int, int]:
        return {eid: e.current_group for eid, e in self.entities.items()}


def er_trigger_check(org: Organization, congestion: float) -> bool:
    er = org.reference_entity()
    return org.group_for_role(er.role, congestion) != er.current_group


def reassign_all(org: Organization, congestion: float) -> list[AssignmentChange]:
    """Move every entity to the expected group for ``congestion``."""
    per_role = {name: org.group_for_role(name, congestion) for name in org.roles}
    delta = []
    for e in org.entities.values():
        new = per_role[e.role]
        if new != e.current_group:
            delta.append(AssignmentChange(e.entity_id, e.current_group, new))
            e.current_group = new
    org.congestion = congestion
    if delta:
        org.version += 1
    return delta


# -- config files ---------------------------------------------------------

def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _kv(tokens, lineno):
    out = {}
    flags = []
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
        else:
            flags.append(tok)
    return out, flags


def parse_roles(text: str) -> tuple[list[RoleSpec], str]:
    """Parse ``role <name> weight=<w> [er]`` lines; returns roles and the ER role."""
    roles, er = [], []
    for lineno, tokens in _lines(text):
        if tokens[0] != "role" or len(tokens) < 3:
            raise ConfigError(f"line {lineno}: expected 'role <name> weight=<decimal> [er]'")
        kv, flags = _kv(tokens[2:], lineno)
        if "weight" not in kv or set(kv) != {"weight"} or set(flags) - {"er"}:
            raise ConfigError(f"line {lineno}: expected 'role <name> weight=<decimal> [er]'")
        try:
            weight = float(kv["weight"])
        except ValueError:
            raise ConfigError(f"line {lineno}: bad weight {kv['weight']!r}") from None
        try:
            roles.append(RoleSpec(tokens[1], weight))
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        if "er" in flags:
            er.append(tokens[1])
    if len(er) != 1:
        raise ConfigError(f"exactly one role must carry the 'er' flag, found {len(er)}")
    if len({r.name for r in roles}) != len(roles):
        raise ConfigError("duplicate role names")
    return roles, er[0]


def parse_groups(text: str) -> list[GroupConfig]:
    """Parse ``group <name> period_ms=<n> threshold=<decimal|none>``; file order is importance order."""
    groups = []
    for lineno, tokens in _lines(text):
        if tokens[0] != "group" or len(tokens) != 4:
            raise ConfigError(f"line {lineno}: expected 'group <name> period_ms=<integer> threshold=<decimal|none>'")
        kv, flags = _kv(tokens[2:], lineno)
        if flags or set(kv) != {"period_ms", "threshold"}:
            raise ConfigError(f"line {lineno}: expected period_ms= and threshold=")
        try:
            period = int(kv["period_ms"])
            threshold = None if kv["threshold"].lower() == "none" else float(kv["threshold"])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        groups.append(GroupConfig(len(groups), tokens[1], period, threshold))
    problems = validate_group_config(groups)
    if problems:
        raise ConfigError("; ".join(problems))
    return groups


def load_organization(roles_path: str | Path, groups_path: str | Path) -> Organization:
    roles, er = parse_roles(Path(roles_path).read_text())
    groups = parse_groups(Path(groups_path).read_text())
    return Organization.from_specs(roles, groups, er)
