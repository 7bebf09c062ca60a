"""Steady 10% probe loss: watch entities leave the Optimal group.

Prints the measured loss per maintenance cycle, the group of each role
after it settles, and the update intervals the client observes.

    python demos/loss_step.py
"""

from collections import Counter

from lodsync.harness import ScenarioConfig, run_scenario

rep = run_scenario(ScenarioConfig(duration_s=30, probe_loss=10, log_updates=True))
print("measured loss per cycle:", [(t, v) for t, _, _, _, v in rep.of_kind("loss_percent")])

moves = Counter(t for t, *_ in rep.of_kind("reassignment"))
print("reassignments by time (ms):", dict(moves))

roles = rep.roles
settled = rep.groups_at(29_999)
by_role = {}
for eid, gid in settled.items():
    by_role.setdefault(roles[eid], Counter())[gid] += 1
print("groups after settling:", {r: dict(c) for r, c in sorted(by_role.items())})

gaps = {}
for eid, seq in rep.update_intervals().items():
    for t, gap, _ in seq:
        if t >= 15_000:
            gaps.setdefault(roles[eid], Counter())[gap] += 1
print("client-side update intervals (ms):", {r: dict(c) for r, c in sorted(gaps.items())})
